#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssm/tensor.hpp"
#include "mssm/tnsr.hpp"

#include <nlohmann/json.hpp>

namespace mssm {

// Half-open cell rectangle: rows [top, bottom), columns [left, right).
struct Rect {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t bottom = 0;
  std::int64_t right = 0;

  std::int64_t area() const { return (bottom - top) * (right - left); }
  bool non_degenerate() const { return bottom > top && right > left; }
  bool contains(const Rect& o) const {
    return o.top >= top && o.bottom <= bottom && o.left >= left && o.right <= right;
  }
  bool operator==(const Rect&) const = default;
};

// Shape of a latent volume and its flattening rule:
//   token_index(t, y, x) = (t * height + y) * width + x
struct TokenLayout {
  std::int64_t frames = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;

  std::int64_t tokens() const { return frames * height * width; }
  std::int64_t token_index(std::int64_t t, std::int64_t y, std::int64_t x) const {
    return (t * height + y) * width + x;
  }
  std::vector<std::int64_t> volume_dims() const { return {frames, height, width, channels}; }
  bool operator==(const TokenLayout&) const = default;
};

inline void validate_layout(const TokenLayout& l) {
  if (l.frames < 1 || l.height < 1 || l.width < 1 || l.channels < 1) {
    throw std::invalid_argument("layout: all extents must be positive");
  }
}

// (f, h, w, c) volume -> (f*h*w, c) token sequence. Row-major storage makes
// this a pure reshape, so the round trip is bit-exact.
inline Tensor flatten(const Tensor& volume) {
  if (volume.rank() != 4) throw std::invalid_argument("flatten: expected a (f,h,w,c) volume");
  const std::int64_t tokens = volume.dim(0) * volume.dim(1) * volume.dim(2);
  return volume.reshaped({tokens, volume.dim(3)});
}

inline Tensor unflatten(const Tensor& tokens, const TokenLayout& layout) {
  validate_layout(layout);
  if (tokens.rank() != 2 || tokens.dim(0) != layout.tokens() ||
      tokens.dim(1) != layout.channels) {
    throw std::invalid_argument("unflatten: token shape does not match layout");
  }
  return tokens.reshaped(layout.volume_dims());
}

enum class MaskKind { face, audio, motion };

inline const char* mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::face: return "face";
    case MaskKind::audio: return "audio";
    case MaskKind::motion: return "motion";
  }
  return "?";
}

// Binary (height x width) grid marking a signal's control region. Must have
// at least one set cell.
struct ControlMask {
  std::vector<std::uint8_t> grid;  // row-major, values 0/1
  std::int64_t height = 0;
  std::int64_t width = 0;
  MaskKind kind = MaskKind::face;

  ControlMask() = default;
  ControlMask(std::vector<std::uint8_t> g, std::int64_t h, std::int64_t w, MaskKind k)
      : grid(std::move(g)), height(h), width(w), kind(k) {
    if (h < 1 || w < 1 || static_cast<std::int64_t>(grid.size()) != h * w) {
      throw std::invalid_argument("mask: grid size does not match extents");
    }
    std::int64_t set = 0;
    for (std::uint8_t v : grid) {
      if (v > 1) throw std::invalid_argument("mask: values must be 0 or 1");
      set += v;
    }
    if (set == 0) throw std::invalid_argument("mask: control region is empty");
  }

  std::uint8_t at(std::int64_t y, std::int64_t x) const {
    return grid[static_cast<std::size_t>(y * width + x)];
  }
  std::int64_t ones() const {
    std::int64_t s = 0;
    for (std::uint8_t v : grid) s += v;
    return s;
  }
};

inline ControlMask mask_from_rect(const Rect& r, std::int64_t h, std::int64_t w, MaskKind kind) {
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(h * w), 0);
  for (std::int64_t y = r.top; y < r.bottom; ++y) {
    for (std::int64_t x = r.left; x < r.right; ++x) {
      grid[static_cast<std::size_t>(y * w + x)] = 1;
    }
  }
  return ControlMask(std::move(grid), h, w, kind);
}

// Per-token keep flags: token (t, y, x) is kept iff the mask is set at (y, x),
// for every frame t.
inline std::vector<std::uint8_t> broadcast_mask(const ControlMask& m, const TokenLayout& layout) {
  validate_layout(layout);
  if (m.height != layout.height || m.width != layout.width) {
    throw std::invalid_argument("broadcast_mask: mask extents do not match layout");
  }
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(layout.tokens()));
  for (std::int64_t t = 0; t < layout.frames; ++t) {
    for (std::int64_t y = 0; y < layout.height; ++y) {
      for (std::int64_t x = 0; x < layout.width; ++x) {
        keep[static_cast<std::size_t>(layout.token_index(t, y, x))] = m.at(y, x);
      }
    }
  }
  return keep;
}

struct MaskSet {
  ControlMask face;
  ControlMask audio;
  ControlMask motion;
  Rect face_rect;
  Rect mouth_rect;
};

// face covers the face rectangle, audio covers the mouth rectangle, and
// motion is the face with the mouth carved out. Audio and motion partition
// the face region, so the two control branches never touch the same token.
inline MaskSet make_masks(const Rect& mouth, const Rect& face, const TokenLayout& layout) {
  validate_layout(layout);
  const Rect grid{0, 0, layout.height, layout.width};
  if (!mouth.non_degenerate() || !face.non_degenerate()) {
    throw std::invalid_argument("make_masks: degenerate rectangle");
  }
  if (!grid.contains(face)) throw std::invalid_argument("make_masks: face exceeds the grid");
  if (!face.contains(mouth)) {
    throw std::invalid_argument("make_masks: mouth must lie inside the face");
  }
  MaskSet out;
  out.face_rect = face;
  out.mouth_rect = mouth;
  out.face = mask_from_rect(face, layout.height, layout.width, MaskKind::face);
  out.audio = mask_from_rect(mouth, layout.height, layout.width, MaskKind::audio);
  std::vector<std::uint8_t> motion = out.face.grid;
  for (std::size_t i = 0; i < motion.size(); ++i) {
    motion[i] = static_cast<std::uint8_t>(motion[i] & ~out.audio.grid[i]);
  }
  std::int64_t set = 0;
  for (std::uint8_t v : motion) set += v;
  if (set == 0) throw std::invalid_argument("make_masks: motion region is empty");
  out.motion = ControlMask(std::move(motion), layout.height, layout.width, MaskKind::motion);
  return out;
}

// Default synthetic geometry: a centered face rectangle covering about three
// quarters of the grid, with the mouth strip along its lower-middle edge.
inline std::pair<Rect, Rect> default_face_rects(const TokenLayout& layout) {
  validate_layout(layout);
  const std::int64_t h = layout.height;
  const std::int64_t w = layout.width;
  Rect face{h / 8, w / 8, 0, 0};
  face.bottom = std::min(h, face.top + std::max<std::int64_t>(2, 3 * h / 4));
  face.right = std::min(w, face.left + std::max<std::int64_t>(1, 3 * w / 4));
  const std::int64_t fh = face.bottom - face.top;
  const std::int64_t fw = face.right - face.left;
  Rect mouth;
  mouth.top = face.bottom - std::max<std::int64_t>(1, fh / 3);
  mouth.bottom = face.bottom;
  mouth.left = face.left + fw / 6;
  mouth.right = face.right - fw / 6;
  return {mouth, face};
}

// Mask file pair: TNSR holding the 0/1 grid plus a JSON sidecar naming the
// kind and the generating rectangles.
inline void write_mask(const std::filesystem::path& tnsr_path, const ControlMask& m,
                       const Rect& rect) {
  Tensor grid({m.height, m.width});
  for (std::int64_t i = 0; i < grid.size(); ++i) grid[i] = m.grid[static_cast<std::size_t>(i)];
  write_tnsr(tnsr_path, grid);
  nlohmann::json side;
  side["kind"] = mask_kind_name(m.kind);
  side["rects"] = {{"top", rect.top}, {"left", rect.left},
                   {"bottom", rect.bottom}, {"right", rect.right}};
  std::filesystem::path sidecar = tnsr_path;
  sidecar.replace_extension(".json");
  write_file_atomic(sidecar, side.dump(2) + "\n");
}

}  // namespace mssm
