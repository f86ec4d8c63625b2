#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mssm/tensor.hpp"

namespace mssm {

// Linear beta ramp with cumulative alpha products, all in float64.
// alpha_bar[0] = 1 so step 0 denotes the clean sample.
struct DiffusionSchedule {
  std::int64_t steps = 0;
  std::vector<double> beta;       // index 1..steps, beta[0] unused
  std::vector<double> alpha_bar;  // index 0..steps, strictly decreasing
};

inline DiffusionSchedule make_schedule(std::int64_t steps, double beta_min, double beta_max) {
  if (steps < 1) throw std::invalid_argument("schedule: need at least one step");
  if (!(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0)) {
    throw std::invalid_argument("schedule: need 0 < beta_min < beta_max < 1");
  }
  DiffusionSchedule s;
  s.steps = steps;
  s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  for (std::int64_t t = 1; t <= steps; ++t) {
    const double frac =
        steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.beta[static_cast<std::size_t>(t)] = beta_min + (beta_max - beta_min) * frac;
    s.alpha_bar[static_cast<std::size_t>(t)] =
        s.alpha_bar[static_cast<std::size_t>(t - 1)] * (1.0 - s.beta[static_cast<std::size_t>(t)]);
  }
  return s;
}

inline void check_step(const DiffusionSchedule& s, std::int64_t t) {
  if (t < 1 || t > s.steps) throw std::invalid_argument("schedule: step out of range");
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor add_noise(const Tensor& x0, std::int64_t t, const Tensor& eps,
                        const DiffusionSchedule& s) {
  check_step(s, t);
  if (!x0.same_dims(eps)) throw std::invalid_argument("add_noise: shape mismatch");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double ca = std::sqrt(ab);
  const double ce = std::sqrt(1.0 - ab);
  Tensor out = x0;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ca * out[i] + ce * eps[i];
  return out;
}

// Guided prediction. s = 1 returns the conditional prediction unchanged.
inline Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double s) {
  if (!eps_cond.same_dims(eps_uncond)) throw std::invalid_argument("cfg: shape mismatch");
  if (s == 1.0) return eps_cond;
  Tensor out = eps_uncond;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += s * (eps_cond[i] - out[i]);
  return out;
}

// Evenly spaced decreasing sub-sequence ending near the bottom of the ramp,
// e.g. T=100, n=20 -> 100, 95, ..., 5.
inline std::vector<std::int64_t> ddim_step_sequence(std::int64_t steps, std::int64_t n) {
  if (n < 1 || n > steps) throw std::invalid_argument("ddim: bad step count");
  const std::int64_t stride = steps / n;
  std::vector<std::int64_t> out;
  for (std::int64_t t = steps; t >= 1 && static_cast<std::int64_t>(out.size()) < n; t -= stride) {
    out.push_back(t);
  }
  return out;
}

// Noise predictor the sampler drives. `conditional` selects the conditional
// or the null-embedding pass for guidance.
using EpsModel = std::function<Tensor(const Tensor& x_t, std::int64_t t, bool conditional)>;

// Deterministic sampler over a decreasing step sub-sequence:
//   x0_hat  = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
//   x_next  = sqrt(abar_next) x0_hat + sqrt(1 - abar_next) eps
// The final target step is 0, so the return value is the x0 estimate.
inline Tensor ddim_sample(const EpsModel& model, const DiffusionSchedule& sched,
                          const std::vector<std::int64_t>& steps, double guidance,
                          const Tensor& x_init) {
  if (steps.empty()) throw std::invalid_argument("ddim: empty step sequence");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    check_step(sched, steps[i]);
    if (i > 0 && steps[i] >= steps[i - 1]) {
      throw std::invalid_argument("ddim: steps must be strictly decreasing");
    }
  }
  Tensor x = x_init;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const std::int64_t t = steps[i];
    const std::int64_t t_next = i + 1 < steps.size() ? steps[i + 1] : 0;
    Tensor eps = model(x, t, true);
    if (!eps.same_dims(x)) throw std::invalid_argument("ddim: model output shape mismatch");
    if (guidance != 1.0) {
      eps = cfg_combine(eps, model(x, t, false), guidance);
    }
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double ab_next = sched.alpha_bar[static_cast<std::size_t>(t_next)];
    const double inv_sa = 1.0 / std::sqrt(ab);
    const double se = std::sqrt(1.0 - ab);
    const double sa_next = std::sqrt(ab_next);
    const double se_next = std::sqrt(1.0 - ab_next);
    for (std::int64_t k = 0; k < x.size(); ++k) {
      const double x0_hat = (x[k] - se * eps[k]) * inv_sa;
      x[k] = sa_next * x0_hat + se_next * eps[k];
    }
  }
  return x;
}

}  // namespace mssm
