#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mssm/mask_ssm.hpp"
#include "mssm/ops.hpp"
#include "mssm/rng.hpp"
#include "mssm/ssm.hpp"

// Parallel-control layer: identity concatenation, two gated masked-scan
// branches (audio, motion), per-token normalization of the branch sum, and a
// residual token map back onto the input.
namespace mssm {

// Binary branch gates. At least one must be open.
struct GateConfig {
  bool audio = true;
  bool motion = true;

  bool operator==(const GateConfig&) const = default;
};

inline void validate_gates(const GateConfig& g) {
  if (!g.audio && !g.motion) {
    throw std::invalid_argument("gates: at least one branch must be open");
  }
}

// Uniform over the three admissible configurations; (0,0) is never produced.
inline GateConfig sample_gate_config(Rng& rng) {
  switch (rng.uniform_int(3)) {
    case 0: return {true, false};
    case 1: return {false, true};
    default: return {true, true};
  }
}

inline const char* gate_config_name(const GateConfig& g) {
  if (g.audio && g.motion) return "11";
  return g.audio ? "10" : "01";
}

// Token-wise two-layer map with a linear bypass:
//   f(x) = gelu(x w1 + b1) w2 + b2 + x w_skip
// Zeroing the output side (w2, b2, w_skip) makes f vanish; w_skip = I with
// w2 = 0 makes f the exact identity.
struct TokenMlpParams {
  Tensor w1, b1, w2, b2, w_skip;
};

struct TokenMlpVars {
  Var w1, b1, w2, b2, w_skip;
};

inline Tensor identity_matrix(std::int64_t n) {
  Tensor m({n, n});
  for (std::int64_t i = 0; i < n; ++i) m.at({i, i}) = 1.0;
  return m;
}

inline TokenMlpParams init_token_mlp(std::int64_t channels, Rng& rng, bool zero_output) {
  TokenMlpParams p;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(channels));
  p.w1 = rng.normal_tensor({channels, channels}, s1);
  p.b1 = Tensor({channels});
  p.b2 = Tensor({channels});
  if (zero_output) {
    p.w2 = Tensor({channels, channels});
    p.w_skip = Tensor({channels, channels});
  } else {
    p.w2 = rng.normal_tensor({channels, channels}, 0.02);
    p.w_skip = identity_matrix(channels);
  }
  return p;
}

inline TokenMlpVars leaf_token_mlp(Binder& bind, TokenMlpParams& p) {
  return {bind(p.w1), bind(p.b1), bind(p.w2), bind(p.b2), bind(p.w_skip)};
}

inline Var token_map(const Var& x, const TokenMlpVars& p) {
  Var hidden = gelu(linear_bias(x, p.w1, p.b1));
  return add(add_bias(linear(hidden, p.w2), p.b2), linear(x, p.w_skip));
}

// One control branch: an embedding-to-channel projection plus the two scan
// directions.
struct ControlBranchParams {
  Tensor ctl_w;  // (E, C)
  Tensor ctl_b;  // (C)
  SsmParams fwd;
  SsmParams bwd;
};

struct ControlBranchVars {
  Var ctl_w, ctl_b;
  SsmVars fwd, bwd;
};

inline ControlBranchParams init_control_branch(std::int64_t embed_dim, std::int64_t channels,
                                               std::int64_t d_state, Rng& rng) {
  ControlBranchParams p;
  p.ctl_w = rng.normal_tensor({embed_dim, channels}, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
  p.ctl_b = Tensor({channels});
  p.fwd = init_ssm_params(channels, d_state, rng);
  p.bwd = init_ssm_params(channels, d_state, rng);
  return p;
}

inline ControlBranchVars leaf_control_branch(Binder& bind, ControlBranchParams& p) {
  return {bind(p.ctl_w), bind(p.ctl_b), leaf_ssm(bind, p.fwd), leaf_ssm(bind, p.bwd)};
}

struct PcmParams {
  TokenMlpParams f1;  // applied to z before the identity concat
  TokenMlpParams f2;  // applied to the normalized aggregate; output side zero at init
  Tensor id_w;        // (E_id, C)
  Tensor id_b;        // (C)
  Tensor ln_gain;     // (C)
  Tensor ln_bias;     // (C)
  ControlBranchParams audio;
  ControlBranchParams motion;
  double ln_eps = 1e-5;
};

struct PcmVars {
  TokenMlpVars f1, f2;
  Var id_w, id_b, ln_gain, ln_bias;
  ControlBranchVars audio, motion;
  double ln_eps = 1e-5;
};

inline PcmParams init_pcm_params(std::int64_t channels, std::int64_t d_state,
                                 std::int64_t ctl_embed_dim, std::int64_t id_embed_dim,
                                 Rng& rng) {
  PcmParams p;
  p.f1 = init_token_mlp(channels, rng, false);
  p.f2 = init_token_mlp(channels, rng, true);
  p.id_w = rng.normal_tensor({id_embed_dim, channels},
                             1.0 / std::sqrt(static_cast<double>(id_embed_dim)));
  p.id_b = Tensor({channels});
  p.ln_gain = Tensor::full({channels}, 1.0);
  p.ln_bias = Tensor({channels});
  p.audio = init_control_branch(ctl_embed_dim, channels, d_state, rng);
  p.motion = init_control_branch(ctl_embed_dim, channels, d_state, rng);
  return p;
}

inline PcmVars leaf_pcm(Binder& bind, PcmParams& p) {
  PcmVars v;
  v.f1 = leaf_token_mlp(bind, p.f1);
  v.f2 = leaf_token_mlp(bind, p.f2);
  v.id_w = bind(p.id_w);
  v.id_b = bind(p.id_b);
  v.ln_gain = bind(p.ln_gain);
  v.ln_bias = bind(p.ln_bias);
  v.audio = leaf_control_branch(bind, p.audio);
  v.motion = leaf_control_branch(bind, p.motion);
  v.ln_eps = p.ln_eps;
  return v;
}

inline PcmVars leaf_pcm(Tape& tape, const PcmParams& p, bool requires_grad) {
  PcmParams copy = p;
  Binder bind(tape, requires_grad);
  return leaf_pcm(bind, copy);
}

// z' = [id_proj(e_id); f1(z)], one identity token in front of the content.
inline Var concat_identity(const Var& z, const Var& e_id, const PcmVars& p) {
  Var id_token = linear_bias(e_id, p.id_w, p.id_b);
  return concat_tokens({id_token, token_map(z, p.f1)});
}

inline void require_disjoint(const ControlMask& a, const ControlMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("masks: extent mismatch");
  }
  for (std::size_t i = 0; i < a.grid.size(); ++i) {
    if (a.grid[i] && b.grid[i]) {
      throw std::invalid_argument("masks: control regions overlap while both gates are open");
    }
  }
}

// Full layer. A closed gate's branch contributes the unmodified z, so the
// background signal entering the norm does not depend on the gate state.
// With mask_drop_enabled = false (the ablated variant) both branches scan and
// paste the full token set and the given masks are ignored.
//   e_audio, e_motion: raw per-frame embeddings, (frames, E)
inline Var pcm_forward(const Var& z, const Var& e_id, const Var& e_audio, const Var& e_motion,
                       const ControlMask& m_audio, const ControlMask& m_motion,
                       const GateConfig& gates, const PcmVars& p, const TokenLayout& layout,
                       bool mask_drop_enabled = true) {
  validate_gates(gates);
  const ControlMask* audio_mask = &m_audio;
  const ControlMask* motion_mask = &m_motion;
  ControlMask full;
  if (mask_drop_enabled) {
    if (gates.audio && gates.motion) require_disjoint(m_audio, m_motion);
  } else {
    full = ControlMask(std::vector<std::uint8_t>(
                           static_cast<std::size_t>(layout.height * layout.width), 1),
                       layout.height, layout.width, MaskKind::face);
    audio_mask = &full;
    motion_mask = &full;
  }
  Var z_prime = concat_identity(z, e_id, p);
  Var branch_audio = z;
  Var branch_motion = z;
  if (gates.audio) {
    Var ctl = linear_bias(e_audio, p.audio.ctl_w, p.audio.ctl_b);
    branch_audio = mask_ssm_forward(z, z_prime, *audio_mask, ctl, p.audio.fwd, p.audio.bwd, layout);
  }
  if (gates.motion) {
    Var ctl = linear_bias(e_motion, p.motion.ctl_w, p.motion.ctl_b);
    branch_motion =
        mask_ssm_forward(z, z_prime, *motion_mask, ctl, p.motion.fwd, p.motion.bwd, layout);
  }
  Var aggregated = layer_norm(add(branch_audio, branch_motion), p.ln_gain, p.ln_bias, p.ln_eps);
  return add(token_map(aggregated, p.f2), z);
}

// Single-head scaled-dot-product cross-attention with a residual add; the
// aggregation comparator for the ablation and the scaling benchmark.
struct CrossAttnParams {
  Tensor w_q, w_k, w_v;  // (C, C)
};

inline CrossAttnParams init_cross_attn(std::int64_t channels, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  return {rng.normal_tensor({channels, channels}, s),
          rng.normal_tensor({channels, channels}, s),
          rng.normal_tensor({channels, channels}, s)};
}

inline Tensor cross_attention_baseline(const Tensor& z, const Tensor& e_ctl,
                                       const CrossAttnParams& p) {
  if (z.rank() != 2 || e_ctl.rank() != 2) {
    throw std::invalid_argument("cross_attention: expected (tokens, channels)");
  }
  if (e_ctl.dim(0) < 1) throw std::invalid_argument("cross_attention: empty control set");
  if (z.dim(1) != e_ctl.dim(1) || p.w_q.dim(0) != z.dim(1)) {
    throw std::invalid_argument("cross_attention: channel mismatch");
  }
  const std::int64_t t = z.dim(0);
  const std::int64_t s = e_ctl.dim(0);
  const std::int64_t c = z.dim(1);
  const Tensor q = detail::matmul_raw(z, p.w_q);
  const Tensor k = detail::matmul_raw(e_ctl, p.w_k);
  const Tensor v = detail::matmul_raw(e_ctl, p.w_v);
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
  Tensor out = z;
  std::vector<double> scores(static_cast<std::size_t>(s));
  for (std::int64_t i = 0; i < t; ++i) {
    const double* qi = q.data() + i * c;
    double m = -1e300;
    for (std::int64_t j = 0; j < s; ++j) {
      const double* kj = k.data() + j * c;
      double dot = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) dot += qi[ch] * kj[ch];
      scores[static_cast<std::size_t>(j)] = dot * inv_sqrt_c;
      m = std::max(m, scores[static_cast<std::size_t>(j)]);
    }
    double denom = 0.0;
    for (std::int64_t j = 0; j < s; ++j) {
      scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - m);
      denom += scores[static_cast<std::size_t>(j)];
    }
    double* oi = out.data() + i * c;
    const double inv_denom = 1.0 / denom;
    for (std::int64_t j = 0; j < s; ++j) {
      const double w = scores[static_cast<std::size_t>(j)] * inv_denom;
      const double* vj = v.data() + j * c;
      for (std::int64_t ch = 0; ch < c; ++ch) oi[ch] += w * vj[ch];
    }
  }
  return out;
}

}  // namespace mssm
