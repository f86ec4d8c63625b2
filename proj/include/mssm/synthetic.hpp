#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mssm/mask.hpp"
#include "mssm/pcm.hpp"
#include "mssm/rng.hpp"
#include "mssm/tensor.hpp"

// Synthetic stand-in data: latent volumes whose masked regions carry known
// per-frame driving scalars, so control fidelity is measurable against ground
// truth.
namespace mssm {

inline constexpr std::int64_t kSignalEmbedDim = 12;
inline constexpr std::int64_t kIdEmbedDim = 8;
inline constexpr std::int64_t kFramePhaseHarmonics = 2;

// Fixed featurization of a scalar series; no learned encoder. Each frame's
// token carries value sinusoids (sin(s) is injective on [-1, 1]), the value
// modulated by frame-phase harmonics, and pure frame-phase markers. The
// product features matter: the scan's input/output projections are linear in
// token features, so a value-times-phase term can only reach a state if it
// already exists in the embedding; writing the modulated value and reading it
// against the content token's own phase gives a frame-matched kernel.
inline Tensor sinusoidal_signal_features(const std::vector<double>& sig) {
  const std::int64_t f = static_cast<std::int64_t>(sig.size());
  if (f < 1) throw std::invalid_argument("signal features: empty series");
  Tensor e({f, kSignalEmbedDim});
  for (std::int64_t t = 0; t < f; ++t) {
    const double s = sig[static_cast<std::size_t>(t)];
    const double phase = 2.0 * 3.14159265358979323846 * static_cast<double>(t) /
                         static_cast<double>(f);
    const double v = std::sin(s);
    std::int64_t col = 0;
    e.at({t, col++}) = v;
    e.at({t, col++}) = std::cos(s);
    e.at({t, col++}) = std::sin(2.0 * s);
    e.at({t, col++}) = std::cos(2.0 * s);
    for (std::int64_t k = 1; k <= kFramePhaseHarmonics; ++k) {
      e.at({t, col++}) = v * std::sin(static_cast<double>(k) * phase);
      e.at({t, col++}) = v * std::cos(static_cast<double>(k) * phase);
    }
    for (std::int64_t k = 1; k <= kFramePhaseHarmonics; ++k) {
      e.at({t, col++}) = std::sin(static_cast<double>(k) * phase);
      e.at({t, col++}) = std::cos(static_cast<double>(k) * phase);
    }
  }
  return e;
}

inline Tensor identity_embedding(std::uint64_t identity_seed) {
  Rng rng(identity_seed ^ 0x715ea5e11d5eedULL);
  return rng.normal_tensor({1, kIdEmbedDim});
}

// Frame-constant appearance texture derived from the identity seed.
inline Tensor identity_texture(std::uint64_t identity_seed, const TokenLayout& layout) {
  validate_layout(layout);
  Rng rng(identity_seed ^ 0x7e87a9e37e87a9ULL);
  Tensor vol(layout.volume_dims());
  const std::int64_t per_frame = layout.height * layout.width * layout.channels;
  for (std::int64_t i = 0; i < per_frame; ++i) {
    const double v = rng.uniform(-1.0, 1.0);
    for (std::int64_t t = 0; t < layout.frames; ++t) vol[t * per_frame + i] = v;
  }
  return vol;
}

// Random walk reflected at the [-1, 1] boundaries, so it never saturates.
inline std::vector<double> smooth_random_walk(std::int64_t n, Rng& rng) {
  std::vector<double> out(static_cast<std::size_t>(n));
  double x = rng.uniform(-0.8, 0.8);
  for (std::int64_t t = 0; t < n; ++t) {
    out[static_cast<std::size_t>(t)] = x;
    x += 0.45 * rng.normal();
    while (x > 1.0 || x < -1.0) {
      if (x > 1.0) x = 2.0 - x;
      if (x < -1.0) x = -2.0 - x;
    }
  }
  return out;
}

// Clean latent x0, the driving scalars, and the identity seed. Inside the
// audio mask, channel 0 of frame t equals a_t exactly; inside the motion mask
// it equals m_t; everything else is identity texture.
struct SyntheticSample {
  Tensor x0;
  std::vector<double> audio_signal;
  std::vector<double> motion_signal;
  std::uint64_t identity_seed = 0;
};

struct ConditionBundle {
  Tensor e_audio;    // (frames, kSignalEmbedDim)
  Tensor e_motion;   // (frames, kSignalEmbedDim)
  Tensor e_id;       // (1, kIdEmbedDim)
  Tensor reference;  // identity texture volume, channel-concatenated with the noise input
  MaskSet masks;
  GateConfig gates{true, true};
};

struct SyntheticItem {
  SyntheticSample sample;
  ConditionBundle cond;
};

// Texture everywhere, with channel 0 of the audio region carrying a_t and
// channel 0 of the motion region carrying m_t, per frame.
inline Tensor compose_volume(const Tensor& texture, const std::vector<double>& audio_signal,
                             const std::vector<double>& motion_signal, const MaskSet& masks,
                             const TokenLayout& layout) {
  if (texture.dims() != layout.volume_dims()) {
    throw std::invalid_argument("compose_volume: texture does not match layout");
  }
  Tensor vol = texture;
  for (std::int64_t t = 0; t < layout.frames; ++t) {
    for (std::int64_t y = 0; y < layout.height; ++y) {
      for (std::int64_t x = 0; x < layout.width; ++x) {
        double* voxel = vol.data() + ((t * layout.height + y) * layout.width + x) * layout.channels;
        if (masks.audio.at(y, x)) {
          voxel[0] = audio_signal[static_cast<std::size_t>(t)];
        } else if (masks.motion.at(y, x)) {
          voxel[0] = motion_signal[static_cast<std::size_t>(t)];
        }
      }
    }
  }
  return vol;
}

inline SyntheticItem gen_synthetic_one(const TokenLayout& layout, const MaskSet& masks,
                                       Rng& rng) {
  SyntheticItem item;
  item.sample.identity_seed = rng.next_u64();
  item.sample.audio_signal = smooth_random_walk(layout.frames, rng);
  item.sample.motion_signal = smooth_random_walk(layout.frames, rng);
  item.cond.reference = identity_texture(item.sample.identity_seed, layout);
  item.sample.x0 = compose_volume(item.cond.reference, item.sample.audio_signal,
                                  item.sample.motion_signal, masks, layout);
  item.cond.e_audio = sinusoidal_signal_features(item.sample.audio_signal);
  item.cond.e_motion = sinusoidal_signal_features(item.sample.motion_signal);
  item.cond.e_id = identity_embedding(item.sample.identity_seed);
  item.cond.masks = masks;
  return item;
}

inline std::vector<SyntheticItem> gen_synthetic(std::int64_t count, const TokenLayout& layout,
                                                const MaskSet& masks, Rng& rng) {
  if (count < 1) throw std::invalid_argument("gen_synthetic: count must be positive");
  std::vector<SyntheticItem> items;
  items.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) items.push_back(gen_synthetic_one(layout, masks, rng));
  return items;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("pearson: series must have equal length >= 2");
  }
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw std::invalid_argument("pearson: zero-variance series");
  return sab / std::sqrt(saa * sbb);
}

// Per-frame channel-0 mean over a mask's region.
inline std::vector<double> region_means(const Tensor& volume, const ControlMask& region) {
  if (volume.rank() != 4) throw std::invalid_argument("region_means: expected (f,h,w,c)");
  const std::int64_t f = volume.dim(0);
  const std::int64_t h = volume.dim(1);
  const std::int64_t w = volume.dim(2);
  const std::int64_t c = volume.dim(3);
  if (region.height != h || region.width != w) {
    throw std::invalid_argument("region_means: mask does not match volume");
  }
  std::vector<double> means(static_cast<std::size_t>(f), 0.0);
  const double inv = 1.0 / static_cast<double>(region.ones());
  for (std::int64_t t = 0; t < f; ++t) {
    double s = 0.0;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        if (region.at(y, x)) s += volume[((t * h + y) * w + x) * c];
      }
    }
    means[static_cast<std::size_t>(t)] = s * inv;
  }
  return means;
}

struct RegionMetrics {
  double corr_mouth_audio = 0.0;  // mouth-region mean vs a_t
  double corr_face_motion = 0.0;  // motion-region mean vs m_t
  double cross_corr = 0.0;        // mouth-region mean vs the wrong signal m_t
};

inline RegionMetrics region_control_metrics(const Tensor& generated,
                                            const std::vector<double>& audio_signal,
                                            const std::vector<double>& motion_signal,
                                            const MaskSet& masks) {
  const std::vector<double> mouth = region_means(generated, masks.audio);
  const std::vector<double> upper = region_means(generated, masks.motion);
  RegionMetrics m;
  m.corr_mouth_audio = pearson(mouth, audio_signal);
  m.corr_face_motion = pearson(upper, motion_signal);
  m.cross_corr = pearson(mouth, motion_signal);
  return m;
}

}  // namespace mssm
