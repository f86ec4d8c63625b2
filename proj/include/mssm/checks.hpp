#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mssm/denoiser.hpp"
#include "mssm/gradcheck.hpp"
#include "mssm/train.hpp"

// Self-verification suite: scan equivalence, gradient checks, region
// isolation, gate semantics, and serialization round trips. The `check`
// command and the acceptance tests both run these.
namespace mssm {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Builds a scalar graph from leaf tensors and compares every analytic input
// gradient against central differences. Returns the worst relative error.
inline double check_graph_grads(const std::vector<Tensor>& inputs,
                                const std::function<Var(Tape&, std::vector<Var>&)>& build,
                                double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
  Var loss = build(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          Tape t2;
          std::vector<Var> vs;
          vs.reserve(inputs.size());
          for (std::size_t j = 0; j < inputs.size(); ++j) {
            vs.push_back(t2.leaf(j == i ? probe : inputs[j], false));
          }
          return scalar_value(build(t2, vs).value());
        },
        inputs[i], h);
    worst = std::max(worst, grad_rel_error(tape.grad(vars[i]), fd));
  }
  return worst;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

// Non-degenerate random geometry: mouth shares the face's lower rows so the
// motion remainder is never empty.
inline MaskSet random_masks(const TokenLayout& layout, Rng& rng) {
  const std::int64_t h = layout.height;
  const std::int64_t w = layout.width;
  Rect face;
  face.top = rng.uniform_int(h - 1);
  face.bottom = face.top + 2 + rng.uniform_int(h - face.top - 1);
  face.left = rng.uniform_int(w);
  face.right = face.left + 1 + rng.uniform_int(w - face.left);
  Rect mouth;
  mouth.top = face.top + 1 + rng.uniform_int(face.bottom - face.top - 1);
  mouth.bottom = face.bottom;
  mouth.left = face.left;
  mouth.right = face.right;
  return make_masks(mouth, face, layout);
}

inline void randomize_params(PcmParams& p, Rng& rng) {
  for_each_param(p, "", [&](const std::string&, Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.5 * rng.normal();
  });
}

struct PcmFixture {
  TokenLayout layout;
  MaskSet masks;
  PcmParams params;
  Tensor z, e_id, e_audio, e_motion;
};

inline PcmFixture random_pcm_fixture(Rng& rng) {
  PcmFixture fx;
  fx.layout.frames = 1 + rng.uniform_int(3);
  fx.layout.height = 2 + rng.uniform_int(3);
  fx.layout.width = 1 + rng.uniform_int(4);
  fx.layout.channels = 2 + rng.uniform_int(5);
  fx.masks = random_masks(fx.layout, rng);
  const std::int64_t d_state = 1 + rng.uniform_int(3);
  fx.params = init_pcm_params(fx.layout.channels, d_state, kSignalEmbedDim, kIdEmbedDim, rng);
  randomize_params(fx.params, rng);
  fx.z = rng.normal_tensor({fx.layout.tokens(), fx.layout.channels});
  fx.e_id = rng.normal_tensor({1, kIdEmbedDim});
  fx.e_audio = rng.normal_tensor({fx.layout.frames, kSignalEmbedDim});
  fx.e_motion = rng.normal_tensor({fx.layout.frames, kSignalEmbedDim});
  return fx;
}

inline Tensor run_pcm(const PcmFixture& fx, const Tensor& e_audio, const Tensor& e_motion,
                      const GateConfig& gates) {
  Tape tape;
  PcmVars vars = leaf_pcm(tape, fx.params, false);
  Var out = pcm_forward(tape.leaf(fx.z), tape.leaf(fx.e_id), tape.leaf(e_audio),
                        tape.leaf(e_motion), fx.masks.audio, fx.masks.motion, gates, vars,
                        fx.layout);
  return out.value();
}

inline ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.layout = {2, 2, 2, 2};
  cfg.c_model = 6;
  cfg.d_state = 2;
  cfg.blocks = 2;
  return cfg;
}

}  // namespace detail

// Criterion: chunked scan reproduces the sequential scan on random cases,
// chunk sizes 1, 7, 32 and the full length, max abs diff < 1e-9.
inline CheckResult check_scan_equivalence(std::uint64_t seed, int cases = 100,
                                          std::int64_t max_len = 4096) {
  Rng rng(seed);
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const std::int64_t len = 1 + rng.uniform_int(max_len);
    const std::int64_t c = 1 + rng.uniform_int(8);
    const std::int64_t n = 1 + rng.uniform_int(8);
    SsmParams p = init_ssm_params(c, n, rng);
    p.w_b = rng.normal_tensor({c, n}, 0.5);
    p.w_c = rng.normal_tensor({c, n}, 0.5);
    p.w_dt = rng.normal_tensor({c, c}, 0.3);
    p.d = rng.normal_tensor({c}, 1.0);
    const Tensor x = rng.normal_tensor({len, c});
    const Tensor ref = scan_sequential(x, p);
    for (std::int64_t chunk : {std::int64_t{1}, std::int64_t{7}, std::int64_t{32}, len}) {
      worst = std::max(worst, max_abs_diff(ref, scan_chunked(x, p, chunk)));
    }
  }
  return {"scan_chunked matches scan_sequential", worst < 1e-9,
          "max abs diff " + detail::fmt(worst) + " over " + std::to_string(cases) + " cases"};
}

// One seed's worth of per-operation gradient checks; worst relative error.
inline double check_op_grads_once(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  const auto track = [&](double err) { worst = std::max(worst, err); };
  const std::int64_t t = 3 + rng.uniform_int(3);
  const std::int64_t c = 2 + rng.uniform_int(3);

  const Tensor wsum = rng.normal_tensor({t, c});
  const auto weighted = [&](Tape& tp, const Var& v) { return sum(mul(v, tp.leaf(wsum))); };

  track(check_graph_grads({rng.normal_tensor({t, c}), rng.normal_tensor({t, c})},
                          [&](Tape& tp, std::vector<Var>& v) {
                            return weighted(tp, add(v[0], v[1]));
                          }));
  track(check_graph_grads({rng.normal_tensor({t, c}), rng.normal_tensor({t, c})},
                          [&](Tape& tp, std::vector<Var>& v) {
                            return weighted(tp, sub(v[0], v[1]));
                          }));
  track(check_graph_grads({rng.normal_tensor({t, c}), rng.normal_tensor({t, c})},
                          [&](Tape& tp, std::vector<Var>& v) {
                            return weighted(tp, mul(v[0], v[1]));
                          }));
  track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape& tp, std::vector<Var>& v) {
    return weighted(tp, scale(v[0], -1.7));
  }));
  track(check_graph_grads({rng.normal_tensor({t, c}), rng.normal_tensor({c})},
                          [&](Tape& tp, std::vector<Var>& v) {
                            return weighted(tp, add_bias(v[0], v[1]));
                          }));
  {
    const std::int64_t o = 2 + rng.uniform_int(3);
    const Tensor wo = rng.normal_tensor({t, o});
    track(check_graph_grads({rng.normal_tensor({t, c}), rng.normal_tensor({c, o})},
                            [&](Tape& tp, std::vector<Var>& v) {
                              return sum(mul(linear(v[0], v[1]), tp.leaf(wo)));
                            }));
  }
  track(check_graph_grads(
      {rng.normal_tensor({t, c}), rng.normal_tensor({c}), rng.normal_tensor({c})},
      [&](Tape& tp, std::vector<Var>& v) {
        return weighted(tp, layer_norm(v[0], v[1], v[2], 1e-5));
      }));
  track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape& tp, std::vector<Var>& v) {
    return weighted(tp, gelu(v[0]));
  }));
  track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape& tp, std::vector<Var>& v) {
    return weighted(tp, softplus(v[0]));
  }));
  track(check_graph_grads({rng.normal_tensor({t, c}, 0.5)}, [&](Tape& tp, std::vector<Var>& v) {
    return weighted(tp, neg_exp(v[0]));
  }));
  track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape&, std::vector<Var>& v) {
    return sum(v[0]);
  }));
  track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape& tp, std::vector<Var>& v) {
    return weighted(tp, reverse_tokens(v[0]));
  }));
  {
    const Tensor wrep = rng.normal_tensor({3 * t, c});
    track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape& tp, std::vector<Var>& v) {
      return sum(mul(repeat_tokens(v[0], 3), tp.leaf(wrep)));
    }));
  }
  {
    const Tensor wcat = rng.normal_tensor({2 * t, c});
    track(check_graph_grads(
        {rng.normal_tensor({t, c}), rng.normal_tensor({t, c})},
        [&](Tape& tp, std::vector<Var>& v) {
          return sum(mul(concat_tokens({v[0], v[1]}), tp.leaf(wcat)));
        }));
  }
  {
    std::vector<std::int64_t> idx{t - 1, 0, 1};
    const Tensor wg = rng.normal_tensor({3, c});
    track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape& tp, std::vector<Var>& v) {
      return sum(mul(gather_tokens(v[0], idx), tp.leaf(wg)));
    }));
    track(check_graph_grads(
        {rng.normal_tensor({t, c}), rng.normal_tensor({3, c})},
        [&](Tape& tp, std::vector<Var>& v) {
          return weighted(tp, scatter_tokens(v[0], v[1], idx));
        }));
  }
  {
    // full selective scan w.r.t. x and every parameter
    const std::int64_t n = 2 + rng.uniform_int(2);
    SsmParams p = init_ssm_params(c, n, rng);
    p.w_b = rng.normal_tensor({c, n}, 0.5);
    p.w_c = rng.normal_tensor({c, n}, 0.5);
    p.w_dt = rng.normal_tensor({c, c}, 0.3);
    p.b_dt = rng.normal_tensor({c}, 0.3);
    p.d = rng.normal_tensor({c});
    track(check_graph_grads(
        {rng.normal_tensor({t, c}), p.a_log, p.w_b, p.w_c, p.w_dt, p.b_dt, p.d},
        [&](Tape& tp, std::vector<Var>& v) {
          SsmVars sv{v[1], v[2], v[3], v[4], v[5], v[6]};
          return weighted(tp, ssm_scan(v[0], sv));
        }));
    SsmParams pb = init_ssm_params(c, n, rng);
    track(check_graph_grads({rng.normal_tensor({t, c})}, [&](Tape& tp, std::vector<Var>& v) {
      SsmVars fwd = leaf_ssm(tp, p, false);
      SsmVars bwd = leaf_ssm(tp, pb, false);
      return weighted(tp, ssm_bidirectional(v[0], fwd, bwd));
    }));
  }
  return worst;
}

// One seed's worth of full-denoiser gradient checks: the training loss on a
// tiny model (under 2k parameters), differentiated against every parameter.
inline double check_denoiser_grads_once(std::uint64_t seed) {
  const ModelConfig cfg = detail::tiny_model_config();
  const auto [mouth, face] = default_face_rects(cfg.layout);
  const MaskSet masks = make_masks(mouth, face, cfg.layout);
  const DiffusionSchedule sched = make_schedule(10, 1e-4, 0.02);
  Rng rng(seed);
  DenoiserParams params = init_denoiser(cfg, rng);
  const auto batch = gen_synthetic(1, cfg.layout, masks, rng);
  const GateConfig gates{true, true};
  const std::uint64_t noise_seed = rng.next_u64();

  Tape tape;
  Binder bind(tape, true);
  DenoiserVars vars = leaf_denoiser(bind, params);
  Rng noise_rng(noise_seed);
  Var loss = training_loss_graph(tape, vars, cfg, sched, batch, gates, 0.0, noise_rng);
  tape.backward(loss);

  double worst = 0.0;
  for (const auto& [tensor_ptr, var] : bind.bound()) {
    const Tensor analytic = tape.grad(var);
    const Tensor saved = *tensor_ptr;
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          *tensor_ptr = probe;
          Tape t2;
          Binder b2(t2, false);
          DenoiserVars v2 = leaf_denoiser(b2, params);
          Rng nr(noise_seed);
          Var l2 = training_loss_graph(t2, v2, cfg, sched, batch, gates, 0.0, nr);
          *tensor_ptr = saved;
          return scalar_value(l2.value());
        },
        saved, 1e-5);
    *tensor_ptr = saved;
    worst = std::max(worst, grad_rel_error(analytic, fd));
  }
  return worst;
}

// Criterion: every differentiable operation and the full denoiser agree with
// finite differences (relative error < 1e-4) over at least 10 seeds each.
inline CheckResult check_gradients(std::uint64_t seed, int seeds = 10) {
  double worst_ops = 0.0;
  double worst_model = 0.0;
  for (int i = 0; i < seeds; ++i) {
    worst_ops = std::max(worst_ops, check_op_grads_once(seed + static_cast<std::uint64_t>(i)));
    worst_model = std::max(worst_model,
                           check_denoiser_grads_once(seed + 1000 + static_cast<std::uint64_t>(i)));
  }
  const double worst = std::max(worst_ops, worst_model);
  return {"analytic gradients match finite differences", worst < 1e-4,
          "worst rel err: ops " + detail::fmt(worst_ops) + ", denoiser " +
              detail::fmt(worst_model) + " over " + std::to_string(seeds) + " seeds"};
}

// Criterion: with both gates open and disjoint masks, tokens outside a
// branch's mask are bit-identical under perturbations of that branch's
// control embedding.
inline CheckResult check_region_isolation(std::uint64_t seed, int trials = 1000) {
  Rng rng(seed);
  int violations = 0;
  for (int i = 0; i < trials; ++i) {
    const detail::PcmFixture fx = detail::random_pcm_fixture(rng);
    const GateConfig gates{true, true};
    const Tensor base = detail::run_pcm(fx, fx.e_audio, fx.e_motion, gates);

    Tensor e_audio2 = fx.e_audio;
    for (std::int64_t k = 0; k < e_audio2.size(); ++k) e_audio2[k] += rng.normal();
    const Tensor bumped_audio = detail::run_pcm(fx, e_audio2, fx.e_motion, gates);

    Tensor e_motion2 = fx.e_motion;
    for (std::int64_t k = 0; k < e_motion2.size(); ++k) e_motion2[k] += rng.normal();
    const Tensor bumped_motion = detail::run_pcm(fx, fx.e_audio, e_motion2, gates);

    const auto keep_audio = broadcast_mask(fx.masks.audio, fx.layout);
    const auto keep_motion = broadcast_mask(fx.masks.motion, fx.layout);
    const std::int64_t c = fx.layout.channels;
    for (std::int64_t tok = 0; tok < fx.layout.tokens(); ++tok) {
      const bool in_audio = keep_audio[static_cast<std::size_t>(tok)] != 0;
      const bool in_motion = keep_motion[static_cast<std::size_t>(tok)] != 0;
      for (std::int64_t j = 0; j < c; ++j) {
        if (!in_audio &&
            std::memcmp(&base[tok * c + j], &bumped_audio[tok * c + j], sizeof(double)) != 0) {
          ++violations;
        }
        if (!in_motion &&
            std::memcmp(&base[tok * c + j], &bumped_motion[tok * c + j], sizeof(double)) != 0) {
          ++violations;
        }
      }
    }
  }
  return {"region isolation under control perturbations", violations == 0,
          std::to_string(violations) + " violating values over " + std::to_string(trials) +
              " trials"};
}

// Criterion: a closed gate makes the layer bit-invariant to that branch's
// inputs and its control gradient exactly zero; (0,0) is rejected.
inline CheckResult check_gate_semantics(std::uint64_t seed, int trials = 50) {
  Rng rng(seed);
  int failures = 0;
  std::string note;
  for (int i = 0; i < trials; ++i) {
    const detail::PcmFixture fx = detail::random_pcm_fixture(rng);
    const Tensor e_audio2 = rng.normal_tensor(fx.e_audio.dims());
    const Tensor e_motion2 = rng.normal_tensor(fx.e_motion.dims());

    const Tensor audio_only = detail::run_pcm(fx, fx.e_audio, fx.e_motion, {true, false});
    const Tensor audio_only2 = detail::run_pcm(fx, fx.e_audio, e_motion2, {true, false});
    if (!audio_only.bit_equal(audio_only2)) ++failures;

    const Tensor motion_only = detail::run_pcm(fx, fx.e_audio, fx.e_motion, {false, true});
    const Tensor motion_only2 = detail::run_pcm(fx, e_audio2, fx.e_motion, {false, true});
    if (!motion_only.bit_equal(motion_only2)) ++failures;

    try {
      detail::run_pcm(fx, fx.e_audio, fx.e_motion, {false, false});
      ++failures;
      note = "(0,0) was not rejected";
    } catch (const std::invalid_argument&) {
    }

    // gradient routing: closed branch's embedding gets an exactly-zero grad
    for (const bool audio_open : {true, false}) {
      const GateConfig gates{audio_open, !audio_open};
      Tape tape;
      PcmVars vars = leaf_pcm(tape, fx.params, false);
      Var ea = tape.leaf(fx.e_audio, true);
      Var em = tape.leaf(fx.e_motion, true);
      Var out = pcm_forward(tape.leaf(fx.z), tape.leaf(fx.e_id), ea, em, fx.masks.audio,
                            fx.masks.motion, gates, vars, fx.layout);
      Var loss = sum(mul(out, out));
      tape.backward(loss);
      const Tensor g_open = tape.grad(audio_open ? ea : em);
      const Tensor g_closed = tape.grad(audio_open ? em : ea);
      if (max_abs(g_closed) != 0.0) ++failures;
      if (max_abs(g_open) == 0.0) ++failures;
    }
  }
  return {"gate semantics and gradient routing", failures == 0,
          std::to_string(failures) + " failures over " + std::to_string(trials) + " trials" +
              (note.empty() ? "" : "; " + note)};
}

// Criterion: flatten/unflatten, drop/paste, TNSR encode/decode and checkpoint
// save/load all reproduce their inputs bit-exactly.
inline CheckResult check_round_trips(std::uint64_t seed, int trials = 25) {
  Rng rng(seed);
  int failures = 0;
  std::string note;
  for (int i = 0; i < trials; ++i) {
    TokenLayout layout;
    layout.frames = 1 + rng.uniform_int(4);
    layout.height = 2 + rng.uniform_int(4);
    layout.width = 1 + rng.uniform_int(5);
    layout.channels = 1 + rng.uniform_int(5);
    const Tensor vol = rng.normal_tensor(layout.volume_dims());
    if (!unflatten(flatten(vol), layout).bit_equal(vol)) {
      ++failures;
      note = "flatten/unflatten";
    }

    // drop then paste restores the original sequence
    const MaskSet masks = detail::random_masks(layout, rng);
    const auto keep = broadcast_mask(masks.audio, layout);
    const auto idx = kept_indices(keep);
    Tape tape;
    Var z = tape.leaf(flatten(vol));
    Var dropped = mask_drop(z, keep, 0);
    Var pasted = mask_paste(z, dropped, idx);
    if (!pasted.value().bit_equal(z.value())) {
      ++failures;
      note = "mask_drop/mask_paste";
    }

    Tensor t = rng.normal_tensor({1 + rng.uniform_int(3), 1 + rng.uniform_int(5)});
    t[0] = 0.0;
    if (t.size() > 1) t[1] = -0.0;
    if (t.size() > 2) t[2] = 5e-324;  // smallest subnormal
    const auto bytes = tnsr_encode(t);
    if (!tnsr_decode(bytes.data(), bytes.size()).bit_equal(t)) {
      ++failures;
      note = "tnsr encode/decode";
    }
  }
  {
    const ModelConfig cfg = detail::tiny_model_config();
    Rng prng(seed ^ 0xabcdef);
    DenoiserParams params = init_denoiser(cfg, prng);
    const auto dir = std::filesystem::temp_directory_path() /
                     ("mssm_ckpt_check_" + std::to_string(seed));
    save_checkpoint(dir, params);
    DenoiserParams loaded = load_checkpoint(dir, cfg);
    bool same = true;
    for_each_param(params, [&](const std::string& name, Tensor& t) {
      Tensor* other = nullptr;
      for_each_param(loaded, [&](const std::string& n2, Tensor& t2) {
        if (n2 == name) other = &t2;
      });
      if (!other || !other->bit_equal(t)) same = false;
    });
    std::filesystem::remove_all(dir);
    if (!same) {
      ++failures;
      note = "checkpoint save/load";
    }
  }
  return {"bit-exact round trips", failures == 0,
          failures == 0 ? "flatten, drop/paste, tnsr, checkpoint all exact"
                        : std::to_string(failures) + " failures (" + note + ")"};
}

inline std::vector<CheckResult> run_check_suite(std::uint64_t seed) {
  std::vector<CheckResult> results;
  results.push_back(check_scan_equivalence(seed + 1));
  results.push_back(check_gradients(seed + 2));
  results.push_back(check_region_isolation(seed + 3));
  results.push_back(check_gate_semantics(seed + 4));
  results.push_back(check_round_trips(seed + 5));
  return results;
}

}  // namespace mssm
