#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssm/diffusion.hpp"
#include "mssm/mask.hpp"
#include "mssm/pcm.hpp"
#include "mssm/synthetic.hpp"
#include "mssm/tnsr.hpp"

#include <nlohmann/json.hpp>

// Noise-prediction backbone: input projection over the channel-concatenated
// noisy and reference tokens, a sinusoidal timestep embedding added per token,
// then blocks of {token-wise map -> control layer}, and an output projection
// back to latent channels. All conditioning flows through the control layers.
namespace mssm {

struct ModelConfig {
  TokenLayout layout;         // latent volume shape
  std::int64_t c_model = 16;  // working channel width
  std::int64_t d_state = 8;
  std::int64_t blocks = 2;
  bool use_mask_drop = true;  // false builds the ablated variant without masks
};

struct BlockParams {
  TokenMlpParams mix;
  PcmParams pcm;
};

struct DenoiserParams {
  Tensor in_w, in_b;
  std::vector<BlockParams> blocks;
  Tensor out_w, out_b;
  Tensor null_audio, null_motion;  // learned guidance-dropout tokens, (1, E)
};

inline DenoiserParams init_denoiser(const ModelConfig& cfg, Rng& rng) {
  validate_layout(cfg.layout);
  if (cfg.c_model < 2 || cfg.d_state < 1 || cfg.blocks < 1) {
    throw std::invalid_argument("model: bad extents");
  }
  DenoiserParams p;
  const std::int64_t c_in = 2 * cfg.layout.channels;
  p.in_w = rng.normal_tensor({c_in, cfg.c_model}, 1.0 / std::sqrt(static_cast<double>(c_in)));
  p.in_b = Tensor({cfg.c_model});
  for (std::int64_t k = 0; k < cfg.blocks; ++k) {
    BlockParams b;
    b.mix = init_token_mlp(cfg.c_model, rng, false);
    b.pcm = init_pcm_params(cfg.c_model, cfg.d_state, kSignalEmbedDim, kIdEmbedDim, rng);
    p.blocks.push_back(std::move(b));
  }
  p.out_w = rng.normal_tensor({cfg.c_model, cfg.layout.channels},
                              1.0 / std::sqrt(static_cast<double>(cfg.c_model)));
  p.out_b = Tensor({cfg.layout.channels});
  p.null_audio = rng.normal_tensor({1, kSignalEmbedDim}, 0.02);
  p.null_motion = rng.normal_tensor({1, kSignalEmbedDim}, 0.02);
  return p;
}

// --- stable parameter enumeration (checkpoints, optimizer) ---

template <class F>
void for_each_param(TokenMlpParams& p, const std::string& pre, F&& f) {
  f(pre + ".w1", p.w1);
  f(pre + ".b1", p.b1);
  f(pre + ".w2", p.w2);
  f(pre + ".b2", p.b2);
  f(pre + ".w_skip", p.w_skip);
}

template <class F>
void for_each_param(SsmParams& p, const std::string& pre, F&& f) {
  f(pre + ".a_log", p.a_log);
  f(pre + ".w_b", p.w_b);
  f(pre + ".w_c", p.w_c);
  f(pre + ".w_dt", p.w_dt);
  f(pre + ".b_dt", p.b_dt);
  f(pre + ".d", p.d);
}

template <class F>
void for_each_param(ControlBranchParams& p, const std::string& pre, F&& f) {
  f(pre + ".ctl.w", p.ctl_w);
  f(pre + ".ctl.b", p.ctl_b);
  for_each_param(p.fwd, pre + ".fwd", f);
  for_each_param(p.bwd, pre + ".bwd", f);
}

template <class F>
void for_each_param(PcmParams& p, const std::string& pre, F&& f) {
  for_each_param(p.f1, pre + ".f1", f);
  for_each_param(p.f2, pre + ".f2", f);
  f(pre + ".id_proj.w", p.id_w);
  f(pre + ".id_proj.b", p.id_b);
  f(pre + ".norm.gain", p.ln_gain);
  f(pre + ".norm.bias", p.ln_bias);
  for_each_param(p.audio, pre + ".audio", f);
  for_each_param(p.motion, pre + ".motion", f);
}

template <class F>
void for_each_param(DenoiserParams& p, F&& f) {
  f("in_proj.w", p.in_w);
  f("in_proj.b", p.in_b);
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    const std::string pre = "block" + std::to_string(k);
    for_each_param(p.blocks[k].mix, pre + ".mix", f);
    for_each_param(p.blocks[k].pcm, pre + ".pcm", f);
  }
  f("out_proj.w", p.out_w);
  f("out_proj.b", p.out_b);
  f("cfg_null.audio", p.null_audio);
  f("cfg_null.motion", p.null_motion);
}

inline std::int64_t param_count(DenoiserParams& p) {
  std::int64_t n = 0;
  for_each_param(p, [&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

// --- tape binding ---

struct BlockVars {
  TokenMlpVars mix;
  PcmVars pcm;
};

struct DenoiserVars {
  Var in_w, in_b, out_w, out_b, null_audio, null_motion;
  std::vector<BlockVars> blocks;
};

inline DenoiserVars leaf_denoiser(Binder& bind, DenoiserParams& p) {
  DenoiserVars v;
  v.in_w = bind(p.in_w);
  v.in_b = bind(p.in_b);
  for (auto& b : p.blocks) {
    BlockVars bv;
    bv.mix = leaf_token_mlp(bind, b.mix);
    bv.pcm = leaf_pcm(bind, b.pcm);
    v.blocks.push_back(bv);
  }
  v.out_w = bind(p.out_w);
  v.out_b = bind(p.out_b);
  v.null_audio = bind(p.null_audio);
  v.null_motion = bind(p.null_motion);
  return v;
}

// Standard sinusoidal embedding of an integer step, length = channels.
inline Tensor timestep_embedding(std::int64_t t, std::int64_t channels) {
  Tensor e({channels});
  const std::int64_t half = channels / 2;
  for (std::int64_t k = 0; k < half; ++k) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(k) / std::max<std::int64_t>(1, half - 1));
    e[2 * k] = std::sin(static_cast<double>(t) * freq);
    e[2 * k + 1] = std::cos(static_cast<double>(t) * freq);
  }
  if (channels % 2 == 1) e[channels - 1] = 0.0;
  return e;
}

// Per-token additive embedding: the timestep sinusoid on every token plus
// frame-phase sinusoids matching the harmonics the control featurization
// carries. Without a frame marker on the content side no layer could tell
// which frame a token belongs to.
inline Tensor token_embedding(const TokenLayout& layout, std::int64_t t, std::int64_t channels) {
  const Tensor temb = timestep_embedding(t, channels);
  Tensor e({layout.tokens(), channels});
  const std::int64_t per_frame = layout.height * layout.width;
  for (std::int64_t tok = 0; tok < layout.tokens(); ++tok) {
    const std::int64_t frame = tok / per_frame;
    const double phase = 2.0 * 3.14159265358979323846 * static_cast<double>(frame) /
                         static_cast<double>(layout.frames);
    double* row = e.data() + tok * channels;
    for (std::int64_t j = 0; j < channels; ++j) row[j] = temb[j];
    std::int64_t col = 0;
    for (std::int64_t k = 1; k <= kFramePhaseHarmonics && col + 1 < channels; ++k) {
      row[col++] += std::sin(static_cast<double>(k) * phase);
      row[col++] += std::cos(static_cast<double>(k) * phase);
    }
  }
  return e;
}

// Masks each branch actually uses. Single-signal modes hand the whole face
// to the open branch; with both gates open each branch keeps its own region.
inline std::pair<const ControlMask*, const ControlMask*> effective_masks(const MaskSet& masks,
                                                                         const GateConfig& g) {
  validate_gates(g);
  if (g.audio && g.motion) return {&masks.audio, &masks.motion};
  if (g.audio) return {&masks.face, &masks.motion};
  return {&masks.audio, &masks.face};
}

// Builds the prediction graph for one sample. `conditional` = false swaps the
// control embeddings of open branches for the learned null tokens.
inline Var denoiser_forward(Tape& tape, const DenoiserVars& v, const ModelConfig& cfg,
                            const Tensor& x_t, std::int64_t t, const ConditionBundle& cond,
                            bool conditional) {
  const TokenLayout& layout = cfg.layout;
  validate_gates(cond.gates);
  if (!x_t.same_dims(cond.reference)) {
    throw std::invalid_argument("denoiser: reference shape mismatch");
  }
  const Tensor xt_tokens = flatten(x_t);
  const Tensor ref_tokens = flatten(cond.reference);
  Tensor input({layout.tokens(), 2 * layout.channels});
  for (std::int64_t r = 0; r < layout.tokens(); ++r) {
    for (std::int64_t j = 0; j < layout.channels; ++j) {
      input.at({r, j}) = xt_tokens[r * layout.channels + j];
      input.at({r, layout.channels + j}) = ref_tokens[r * layout.channels + j];
    }
  }
  Var h = linear_bias(tape.leaf(std::move(input)), v.in_w, v.in_b);
  h = add(h, tape.leaf(token_embedding(layout, t, cfg.c_model)));

  Var e_id = tape.leaf(cond.e_id);
  Var e_audio, e_motion;
  if (cond.gates.audio) {
    e_audio = conditional ? tape.leaf(cond.e_audio)
                          : repeat_tokens(v.null_audio, layout.frames);
  }
  if (cond.gates.motion) {
    e_motion = conditional ? tape.leaf(cond.e_motion)
                           : repeat_tokens(v.null_motion, layout.frames);
  }
  const auto [m_audio, m_motion] = effective_masks(cond.masks, cond.gates);

  TokenLayout model_layout = layout;
  model_layout.channels = cfg.c_model;
  for (const BlockVars& b : v.blocks) {
    h = token_map(h, b.mix);
    h = pcm_forward(h, e_id, e_audio, e_motion, *m_audio, *m_motion, cond.gates, b.pcm,
                    model_layout, cfg.use_mask_drop);
  }
  return linear_bias(h, v.out_w, v.out_b);
}

// Convenience wrapper for inference; returns the predicted noise volume.
inline Tensor predict_noise(DenoiserParams& params, const ModelConfig& cfg, const Tensor& x_t,
                            std::int64_t t, const ConditionBundle& cond, bool conditional) {
  Tape tape;
  Binder bind(tape, false);
  DenoiserVars v = leaf_denoiser(bind, params);
  Var out = denoiser_forward(tape, v, cfg, x_t, t, cond, conditional);
  return unflatten(out.value(), cfg.layout);
}

// --- checkpoints: JSON manifest mapping name -> TNSR file ---

inline std::string param_file_name(const std::string& name) {
  std::string f = name;
  for (char& ch : f) {
    if (ch == '.') ch = '_';
  }
  return f + ".tnsr";
}

inline void save_checkpoint(const std::filesystem::path& dir, DenoiserParams& params) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  nlohmann::json manifest = nlohmann::json::object();
  for_each_param(params, [&](const std::string& name, Tensor& t) {
    const std::string file = param_file_name(name);
    write_tnsr(dir / file, t);
    manifest[name] = file;
  });
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline DenoiserParams load_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg) {
  const std::filesystem::path manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw IoError("checkpoint manifest not found: " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    const auto bytes = read_file(manifest_path);
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint manifest unreadable: " + std::string(e.what()));
  }
  Rng rng(0);
  DenoiserParams params = init_denoiser(cfg, rng);
  std::size_t used = 0;
  for_each_param(params, [&](const std::string& name, Tensor& t) {
    if (!manifest.contains(name)) throw IoError("checkpoint missing parameter: " + name);
    Tensor loaded = read_tnsr(dir / manifest[name].get<std::string>());
    if (!loaded.same_dims(t)) throw IoError("checkpoint shape mismatch for: " + name);
    t = std::move(loaded);
    ++used;
  });
  if (used != manifest.size()) throw IoError("checkpoint has unexpected extra parameters");
  return params;
}

}  // namespace mssm
