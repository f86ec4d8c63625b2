#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mssm/denoiser.hpp"
#include "mssm/diffusion.hpp"
#include "mssm/gradcheck.hpp"
#include "mssm/synthetic.hpp"

namespace mssm {

struct TrainConfig {
  std::int64_t steps = 2000;
  std::int64_t batch = 4;
  double lr = 1e-3;
  double momentum = 0.9;
  double p_uncond = 0.1;
  std::uint64_t seed = 1;
};

// Per-sample noising draw; one shared protocol for the loss value and the
// loss graph keeps the two paths comparable.
struct NoiseDraw {
  std::int64_t t = 1;
  Tensor eps;
  bool conditional = true;
};

inline NoiseDraw draw_noise(Rng& rng, const DiffusionSchedule& sched, const TokenLayout& layout,
                            double p_uncond) {
  NoiseDraw d;
  d.t = 1 + rng.uniform_int(sched.steps);
  d.eps = rng.normal_tensor(layout.volume_dims());
  d.conditional = rng.uniform() >= p_uncond;
  return d;
}

// Mean squared noise-prediction error over a batch, as a differentiable graph.
// Gates are shared across the batch; guidance dropout is drawn per sample.
inline Var training_loss_graph(Tape& tape, const DenoiserVars& vars, const ModelConfig& cfg,
                               const DiffusionSchedule& sched,
                               const std::vector<SyntheticItem>& batch, const GateConfig& gates,
                               double p_uncond, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("training_loss: empty batch");
  validate_gates(gates);
  Var total;
  std::int64_t elements = 0;
  for (const SyntheticItem& item : batch) {
    const NoiseDraw d = draw_noise(rng, sched, cfg.layout, p_uncond);
    const Tensor x_t = add_noise(item.sample.x0, d.t, d.eps, sched);
    ConditionBundle cond = item.cond;
    cond.gates = gates;
    Var pred = denoiser_forward(tape, vars, cfg, x_t, d.t, cond, d.conditional);
    Var diff = sub(pred, tape.leaf(flatten(d.eps)));
    Var sq = sum(mul(diff, diff));
    total = total.valid() ? add(total, sq) : sq;
    elements += d.eps.size();
  }
  return scale(total, 1.0 / static_cast<double>(elements));
}

// Loss for an arbitrary predictor, used by tests and oracles. The predictor
// sees the noised volume, the step, the item, and the guidance-dropout flag,
// and returns a predicted-noise volume.
using EpsPredictor =
    std::function<Tensor(const Tensor& x_t, std::int64_t t, const SyntheticItem&, bool cond)>;

inline double training_loss_value(const EpsPredictor& model, const ModelConfig& cfg,
                                  const DiffusionSchedule& sched,
                                  const std::vector<SyntheticItem>& batch,
                                  const GateConfig& gates, double p_uncond, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("training_loss: empty batch");
  validate_gates(gates);
  double total = 0.0;
  std::int64_t elements = 0;
  for (const SyntheticItem& item : batch) {
    const NoiseDraw d = draw_noise(rng, sched, cfg.layout, p_uncond);
    const Tensor x_t = add_noise(item.sample.x0, d.t, d.eps, sched);
    const Tensor pred = model(x_t, d.t, item, d.conditional);
    if (!pred.same_dims(d.eps)) throw std::invalid_argument("training_loss: prediction shape");
    for (std::int64_t i = 0; i < pred.size(); ++i) {
      const double e = pred[i] - d.eps[i];
      total += e * e;
    }
    elements += d.eps.size();
  }
  return total / static_cast<double>(elements);
}

// Plain gradient descent with momentum: v = mu v + g, p -= lr v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(Tape& tape, const std::vector<std::pair<Tensor*, Var>>& bound) {
    if (velocity_.empty()) {
      velocity_.reserve(bound.size());
      for (const auto& [tensor, var] : bound) velocity_.emplace_back(tensor->dims());
    }
    if (velocity_.size() != bound.size()) {
      throw std::logic_error("optimizer: parameter list changed between steps");
    }
    for (std::size_t i = 0; i < bound.size(); ++i) {
      Tensor g = tape.grad(bound[i].second);
      Tensor& v = velocity_[i];
      Tensor& p = *bound[i].first;
      for (std::int64_t k = 0; k < g.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        p[k] -= lr_ * v[k];
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

struct TrainLogRow {
  std::int64_t step = 0;
  double loss = 0.0;
  GateConfig gates;
  double wall_ms = 0.0;
};

using TrainLogFn = std::function<void(const TrainLogRow&)>;

// Full training run. Fresh synthetic batches are drawn from the seeded
// stream each step, so the run is a pure function of (configs, seed).
inline DenoiserParams train_model(const ModelConfig& cfg, const DiffusionSchedule& sched,
                                  const MaskSet& masks, const TrainConfig& train,
                                  const TrainLogFn& log = {}) {
  if (train.steps < 1 || train.batch < 1) throw std::invalid_argument("train: bad step/batch");
  Rng rng(train.seed);
  Rng init_rng = rng.split(1);
  DenoiserParams params = init_denoiser(cfg, init_rng);
  SgdMomentum opt(train.lr, train.momentum);
  for (std::int64_t step = 1; step <= train.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<SyntheticItem> batch = gen_synthetic(train.batch, cfg.layout, masks, rng);
    const GateConfig gates = sample_gate_config(rng);
    Tape tape;
    Binder bind(tape, true);
    DenoiserVars vars = leaf_denoiser(bind, params);
    Var loss = training_loss_graph(tape, vars, cfg, sched, batch, gates, train.p_uncond, rng);
    tape.backward(loss);
    opt.step(tape, bind.bound());
    const auto t1 = std::chrono::steady_clock::now();
    if (log) {
      log({step, scalar_value(loss.value()), gates,
           std::chrono::duration<double, std::milli>(t1 - t0).count()});
    }
  }
  return params;
}

struct SampleOptions {
  GateConfig gates{true, true};
  double guidance = 2.0;
  std::int64_t ddim_steps = 20;
  std::uint64_t seed = 2024;
};

// Deterministic generation for one condition bundle; the init noise comes
// from the option seed.
inline Tensor sample_volume(DenoiserParams& params, const ModelConfig& cfg,
                            const DiffusionSchedule& sched, const ConditionBundle& cond,
                            const SampleOptions& opt) {
  validate_gates(opt.gates);
  ConditionBundle gated = cond;
  gated.gates = opt.gates;
  Rng rng(opt.seed);
  const Tensor x_init = rng.normal_tensor(cfg.layout.volume_dims());
  const EpsModel model = [&](const Tensor& x_t, std::int64_t t, bool conditional) {
    return predict_noise(params, cfg, x_t, t, gated, conditional);
  };
  const auto steps = ddim_step_sequence(sched.steps, opt.ddim_steps);
  return ddim_sample(model, sched, steps, opt.guidance, x_init);
}

// Region/signal correlations pooled over freshly drawn evaluation samples.
// Pooling (value, signal) pairs across samples tames the estimator variance
// a single short clip would have.
struct PooledEval {
  double corr_mouth_audio = 0.0;
  double corr_face_motion = 0.0;
  double cross_corr = 0.0;
};

inline PooledEval evaluate_pooled(DenoiserParams& params, const ModelConfig& cfg,
                                  const DiffusionSchedule& sched, const MaskSet& masks,
                                  std::int64_t n_eval, const SampleOptions& opt,
                                  std::uint64_t data_seed) {
  if (n_eval < 1) throw std::invalid_argument("evaluate: need at least one sample");
  Rng rng(data_seed);
  std::vector<double> mouth, upper, audio, motion;
  for (std::int64_t i = 0; i < n_eval; ++i) {
    const SyntheticItem item = gen_synthetic_one(cfg.layout, masks, rng);
    SampleOptions per = opt;
    per.seed = opt.seed + static_cast<std::uint64_t>(i);
    const Tensor generated = sample_volume(params, cfg, sched, item.cond, per);
    const auto m_mouth = region_means(generated, masks.audio);
    const auto m_upper = region_means(generated, masks.motion);
    for (std::int64_t t = 0; t < cfg.layout.frames; ++t) {
      mouth.push_back(m_mouth[static_cast<std::size_t>(t)]);
      upper.push_back(m_upper[static_cast<std::size_t>(t)]);
      audio.push_back(item.sample.audio_signal[static_cast<std::size_t>(t)]);
      motion.push_back(item.sample.motion_signal[static_cast<std::size_t>(t)]);
    }
  }
  PooledEval out;
  out.corr_mouth_audio = pearson(mouth, audio);
  out.corr_face_motion = pearson(upper, motion);
  out.cross_corr = pearson(mouth, motion);
  return out;
}

}  // namespace mssm
