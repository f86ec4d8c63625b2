#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mssm/tape.hpp"
#include "mssm/tensor.hpp"

// Differentiable operations. Token sequences are rank-2 (tokens, channels);
// batches are handled by building one subgraph per sample on a shared tape.
namespace mssm {

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw std::invalid_argument("op: operands live on different tapes");
  }
  return *a.tape();
}

inline void require_rank2(const Var& v, const char* where) {
  if (v.value().rank() != 2) {
    throw std::invalid_argument(std::string(where) + ": expected a rank-2 tensor");
  }
}

// Rows of a tensor treated as (rows, channels) with channels = last extent.
inline std::pair<std::int64_t, std::int64_t> row_shape(const Tensor& t, const char* where) {
  if (t.rank() < 1) throw std::invalid_argument(std::string(where) + ": needs at least rank 1");
  const std::int64_t c = t.dims().back();
  return {t.size() / c, c};
}

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_derivative(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;  // N(0,1) pdf
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)) + x * phi;
}

inline double softplus_value(double x) {
  // max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails
  return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  Tape& tp = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!av.same_dims(bv)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tp.record(std::move(out), {a.id(), b.id()}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    t.add_grad(t.parents(self)[0], g);
    t.add_grad(t.parents(self)[1], g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& tp = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!av.same_dims(bv)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tp.record(std::move(out), {a.id(), b.id()}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const auto& ps = t.parents(self);
    t.add_grad(ps[0], g);
    if (t.needs_grad(ps[1])) {
      Tensor ng = g;
      for (std::int64_t i = 0; i < ng.size(); ++i) ng[i] = -ng[i];
      t.add_grad(ps[1], ng);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& tp = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!av.same_dims(bv)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tp.record(std::move(out), {a.id(), b.id()}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const auto& ps = t.parents(self);
    const Tensor& av = t.value(ps[0]);
    const Tensor& bv = t.value(ps[1]);
    if (t.needs_grad(ps[0])) {
      Tensor ga = g;
      for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      t.add_grad(ps[0], ga);
    }
    if (t.needs_grad(ps[1])) {
      Tensor gb = g;
      for (std::int64_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      t.add_grad(ps[1], gb);
    }
  });
}

inline Var scale(const Var& a, double k) {
  Tape& tp = *a.tape();
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= k;
  return tp.record(std::move(out), {a.id()}, [k](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor ga = g;
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] *= k;
    t.add_grad(t.parents(self)[0], ga);
  });
}

// x (..., C) + b (C), broadcast over rows.
inline Var add_bias(const Var& x, const Var& b) {
  Tape& tp = detail::same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 1 || bv.size() != xv.dims().back()) {
    throw std::invalid_argument("add_bias: bias must match the channel extent");
  }
  const auto [rows, c] = detail::row_shape(xv, "add_bias");
  Tensor out = xv;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * c;
    for (std::int64_t j = 0; j < c; ++j) o[j] += bv[j];
  }
  return tp.record(std::move(out), {x.id(), b.id()}, [rows, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const auto& ps = t.parents(self);
    t.add_grad(ps[0], g);
    if (t.needs_grad(ps[1])) {
      Tensor gb({c});
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * c;
        for (std::int64_t j = 0; j < c; ++j) gb[j] += gr[j];
      }
      t.add_grad(ps[1], gb);
    }
  });
}

// x (..., I) @ w (I, O) -> (..., O).
inline Var linear(const Var& x, const Var& w) {
  Tape& tp = detail::same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2) throw std::invalid_argument("linear: weight must be rank 2");
  const std::int64_t in = wv.dim(0);
  const std::int64_t out_c = wv.dim(1);
  if (xv.rank() < 1 || xv.dims().back() != in) {
    throw std::invalid_argument("linear: input channels do not match weight");
  }
  const std::int64_t rows = xv.size() / in;
  std::vector<std::int64_t> odims = xv.dims();
  odims.back() = out_c;
  Tensor out(std::move(odims));
  {
    const double* xp = xv.data();
    const double* wp = wv.data();
    double* op = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = xp + r * in;
      double* orow = op + r * out_c;
      for (std::int64_t i = 0; i < in; ++i) {
        const double xi = xr[i];
        const double* wrow = wp + i * out_c;
        for (std::int64_t j = 0; j < out_c; ++j) orow[j] += xi * wrow[j];
      }
    }
  }
  return tp.record(std::move(out), {x.id(), w.id()},
                   [rows, in, out_c](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad_of(self);
                     const auto& ps = t.parents(self);
                     const Tensor& xv = t.value(ps[0]);
                     const Tensor& wv = t.value(ps[1]);
                     if (t.needs_grad(ps[0])) {
                       double* gx = t.grad_buffer(ps[0]);
                       for (std::int64_t r = 0; r < rows; ++r) {
                         const double* gr = g.data() + r * out_c;
                         double* gxr = gx + r * in;
                         for (std::int64_t i = 0; i < in; ++i) {
                           const double* wrow = wv.data() + i * out_c;
                           double s = 0.0;
                           for (std::int64_t j = 0; j < out_c; ++j) s += gr[j] * wrow[j];
                           gxr[i] += s;
                         }
                       }
                     }
                     if (t.needs_grad(ps[1])) {
                       double* gw = t.grad_buffer(ps[1]);
                       for (std::int64_t r = 0; r < rows; ++r) {
                         const double* xr = xv.data() + r * in;
                         const double* gr = g.data() + r * out_c;
                         for (std::int64_t i = 0; i < in; ++i) {
                           const double xi = xr[i];
                           double* gwrow = gw + i * out_c;
                           for (std::int64_t j = 0; j < out_c; ++j) gwrow[j] += xi * gr[j];
                         }
                       }
                     }
                   });
}

// Per-row normalization over channels: gain * (x - mean) / sqrt(var + eps) + bias.
// One row's output depends only on that row.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  Tape& tp = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be non-negative");
  const Tensor& xv = x.value();
  require_finite(xv, "layer_norm");
  const auto [rows, c] = detail::row_shape(xv, "layer_norm");
  if (c < 1) throw std::invalid_argument("layer_norm: needs at least one channel");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  if (gv.size() != c || bv.size() != c) {
    throw std::invalid_argument("layer_norm: gain/bias must match the channel extent");
  }
  Tensor out(xv.dims());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double* orow = out.data() + r * c;
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(c);
    const double denom = std::sqrt(var + eps);
    if (denom == 0.0) throw std::invalid_argument("layer_norm: zero variance with eps = 0");
    const double inv = 1.0 / denom;
    for (std::int64_t j = 0; j < c; ++j) orow[j] = gv[j] * (xr[j] - mean) * inv + bv[j];
  }
  return tp.record(
      std::move(out), {x.id(), gain.id(), bias.id()},
      [rows, c, eps](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const auto& ps = t.parents(self);
        const Tensor& xv = t.value(ps[0]);
        const Tensor& gv = t.value(ps[1]);
        const bool want_x = t.needs_grad(ps[0]);
        const bool want_gain = t.needs_grad(ps[1]);
        const bool want_bias = t.needs_grad(ps[2]);
        Tensor gx = want_x ? Tensor(xv.dims()) : Tensor();
        Tensor ggain({c});
        Tensor gbias({c});
        std::vector<double> xhat(static_cast<std::size_t>(c));
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* xr = xv.data() + r * c;
          const double* gr = g.data() + r * c;
          double mean = 0.0;
          for (std::int64_t j = 0; j < c; ++j) mean += xr[j];
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
          var /= static_cast<double>(c);
          const double inv = 1.0 / std::sqrt(var + eps);
          for (std::int64_t j = 0; j < c; ++j) xhat[static_cast<std::size_t>(j)] = (xr[j] - mean) * inv;
          if (want_gain || want_bias) {
            for (std::int64_t j = 0; j < c; ++j) {
              ggain[j] += gr[j] * xhat[static_cast<std::size_t>(j)];
              gbias[j] += gr[j];
            }
          }
          if (want_x) {
            double mean_gh = 0.0;
            double mean_ghx = 0.0;
            for (std::int64_t j = 0; j < c; ++j) {
              const double gh = gv[j] * gr[j];
              mean_gh += gh;
              mean_ghx += gh * xhat[static_cast<std::size_t>(j)];
            }
            mean_gh /= static_cast<double>(c);
            mean_ghx /= static_cast<double>(c);
            double* gxr = gx.data() + r * c;
            for (std::int64_t j = 0; j < c; ++j) {
              const double gh = gv[j] * gr[j];
              gxr[j] = inv * (gh - mean_gh - xhat[static_cast<std::size_t>(j)] * mean_ghx);
            }
          }
        }
        if (want_x) t.add_grad(ps[0], gx);
        if (want_gain) t.add_grad(ps[1], ggain);
        if (want_bias) t.add_grad(ps[2], gbias);
      });
}

inline Var gelu(const Var& x) {
  Tape& tp = *x.tape();
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_value(out[i]);
  return tp.record(std::move(out), {x.id()}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const std::size_t p = t.parents(self)[0];
    const Tensor& xv = t.value(p);
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= detail::gelu_derivative(xv[i]);
    t.add_grad(p, gx);
  });
}

inline Var softplus(const Var& x) {
  Tape& tp = *x.tape();
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = detail::softplus_value(out[i]);
  return tp.record(std::move(out), {x.id()}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const std::size_t p = t.parents(self)[0];
    const Tensor& xv = t.value(p);
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= detail::sigmoid(xv[i]);
    t.add_grad(p, gx);
  });
}

// y = -exp(x); strictly negative, used for state-matrix diagonals.
inline Var neg_exp(const Var& x) {
  Tape& tp = *x.tape();
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = -std::exp(out[i]);
  return tp.record(std::move(out), {x.id()}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& yv = t.value(self);
    Tensor gx = g;
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] *= yv[i];
    t.add_grad(t.parents(self)[0], gx);
  });
}

inline Var sum(const Var& x) {
  Tape& tp = *x.tape();
  const Tensor& xv = x.value();
  double s = 0.0;
  for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  return tp.record(Tensor::scalar(s), {x.id()}, [](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    const std::size_t p = t.parents(self)[0];
    if (!t.needs_grad(p)) return;
    double* gx = t.grad_buffer(p);
    const std::int64_t n = t.value(p).size();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  });
}

// Flips the token order of a (T, C) sequence.
inline Var reverse_tokens(const Var& x) {
  Tape& tp = *x.tape();
  detail::require_rank2(x, "reverse_tokens");
  const Tensor& xv = x.value();
  const std::int64_t n = xv.dim(0);
  const std::int64_t c = xv.dim(1);
  Tensor out(xv.dims());
  for (std::int64_t r = 0; r < n; ++r) {
    std::memcpy(out.data() + (n - 1 - r) * c, xv.data() + r * c,
                static_cast<std::size_t>(c) * sizeof(double));
  }
  return tp.record(std::move(out), {x.id()}, [n, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const std::size_t p = t.parents(self)[0];
    if (!t.needs_grad(p)) return;
    Tensor gx(g.dims());
    for (std::int64_t r = 0; r < n; ++r) {
      std::memcpy(gx.data() + (n - 1 - r) * c, g.data() + r * c,
                  static_cast<std::size_t>(c) * sizeof(double));
    }
    t.add_grad(p, gx);
  });
}

// Stacks n copies of a (T, C) sequence along the token axis.
inline Var repeat_tokens(const Var& x, std::int64_t n) {
  Tape& tp = *x.tape();
  detail::require_rank2(x, "repeat_tokens");
  if (n < 1) throw std::invalid_argument("repeat_tokens: count must be positive");
  const Tensor& xv = x.value();
  const std::int64_t t0 = xv.dim(0);
  const std::int64_t c = xv.dim(1);
  Tensor out({t0 * n, c});
  for (std::int64_t k = 0; k < n; ++k) {
    std::memcpy(out.data() + k * t0 * c, xv.data(),
                static_cast<std::size_t>(t0 * c) * sizeof(double));
  }
  return tp.record(std::move(out), {x.id()}, [n, t0, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const std::size_t p = t.parents(self)[0];
    if (!t.needs_grad(p)) return;
    Tensor gx({t0, c});
    for (std::int64_t k = 0; k < n; ++k) {
      const double* gk = g.data() + k * t0 * c;
      for (std::int64_t i = 0; i < t0 * c; ++i) gx[i] += gk[i];
    }
    t.add_grad(p, gx);
  });
}

// Concatenates (T_i, C) sequences along the token axis, preserving order.
inline Var concat_tokens(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_tokens: no inputs");
  Tape& tp = *parts[0].tape();
  std::int64_t total = 0;
  const std::int64_t c = parts[0].value().dim(1);
  std::vector<std::size_t> ids;
  std::vector<std::int64_t> counts;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    detail::require_rank2(p, "concat_tokens");
    if (p.value().dim(1) != c) throw std::invalid_argument("concat_tokens: channel mismatch");
    total += p.value().dim(0);
    ids.push_back(p.id());
    counts.push_back(p.value().dim(0));
  }
  Tensor out({total, c});
  std::int64_t row = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    std::memcpy(out.data() + row * c, pv.data(),
                static_cast<std::size_t>(pv.size()) * sizeof(double));
    row += pv.dim(0);
  }
  return tp.record(std::move(out), std::move(ids), [counts, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const auto& ps = t.parents(self);
    std::int64_t row = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (t.needs_grad(ps[k])) {
        double* gp = t.grad_buffer(ps[k]);
        const double* gs = g.data() + row * c;
        for (std::int64_t i = 0; i < counts[k] * c; ++i) gp[i] += gs[i];
      }
      row += counts[k];
    }
  });
}

// Selects rows of a (T, C) sequence in the order given by idx.
inline Var gather_tokens(const Var& x, std::vector<std::int64_t> idx) {
  Tape& tp = *x.tape();
  detail::require_rank2(x, "gather_tokens");
  if (idx.empty()) throw std::invalid_argument("gather_tokens: empty index set");
  const Tensor& xv = x.value();
  const std::int64_t n = xv.dim(0);
  const std::int64_t c = xv.dim(1);
  for (std::int64_t i : idx) {
    if (i < 0 || i >= n) throw std::invalid_argument("gather_tokens: index out of range");
  }
  Tensor out({static_cast<std::int64_t>(idx.size()), c});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::memcpy(out.data() + static_cast<std::int64_t>(k) * c, xv.data() + idx[k] * c,
                static_cast<std::size_t>(c) * sizeof(double));
  }
  return tp.record(std::move(out), {x.id()}, [idx = std::move(idx), c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const std::size_t p = t.parents(self)[0];
    if (!t.needs_grad(p)) return;
    double* gx = t.grad_buffer(p);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double* gr = g.data() + static_cast<std::int64_t>(k) * c;
      double* dst = gx + idx[k] * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] += gr[j];
    }
  });
}

// Copy of z with row idx[k] replaced by y row k; every other row keeps z's
// exact bytes. Indices must be unique.
inline Var scatter_tokens(const Var& z, const Var& y, std::vector<std::int64_t> idx) {
  Tape& tp = detail::same_tape(z, y);
  detail::require_rank2(z, "scatter_tokens");
  detail::require_rank2(y, "scatter_tokens");
  const Tensor& zv = z.value();
  const Tensor& yv = y.value();
  const std::int64_t n = zv.dim(0);
  const std::int64_t c = zv.dim(1);
  if (yv.dim(1) != c) throw std::invalid_argument("scatter_tokens: channel mismatch");
  if (yv.dim(0) != static_cast<std::int64_t>(idx.size())) {
    throw std::invalid_argument("scatter_tokens: row count does not match index count");
  }
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(n), 0);
  for (std::int64_t i : idx) {
    if (i < 0 || i >= n) throw std::invalid_argument("scatter_tokens: index out of range");
    if (seen[static_cast<std::size_t>(i)]++) {
      throw std::invalid_argument("scatter_tokens: duplicate index");
    }
  }
  Tensor out = zv;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::memcpy(out.data() + idx[k] * c, yv.data() + static_cast<std::int64_t>(k) * c,
                static_cast<std::size_t>(c) * sizeof(double));
  }
  return tp.record(std::move(out), {z.id(), y.id()},
                   [idx = std::move(idx), c](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad_of(self);
                     const auto& ps = t.parents(self);
                     if (t.needs_grad(ps[0])) {
                       Tensor gz = g;
                       for (std::int64_t i : idx) {
                         double* row = gz.data() + i * c;
                         for (std::int64_t j = 0; j < c; ++j) row[j] = 0.0;
                       }
                       t.add_grad(ps[0], gz);
                     }
                     if (t.needs_grad(ps[1])) {
                       Tensor gy({static_cast<std::int64_t>(idx.size()), c});
                       for (std::size_t k = 0; k < idx.size(); ++k) {
                         std::memcpy(gy.data() + static_cast<std::int64_t>(k) * c,
                                     g.data() + idx[k] * c,
                                     static_cast<std::size_t>(c) * sizeof(double));
                       }
                       t.add_grad(ps[1], gy);
                     }
                   });
}

// linear + bias in one call; plain composition.
inline Var linear_bias(const Var& x, const Var& w, const Var& b) {
  return add_bias(linear(x, w), b);
}

// Mean of squared entries; the training objective's reducer.
inline Var mean_sq(const Var& x) {
  Var s = sum(mul(x, x));
  return scale(s, 1.0 / static_cast<double>(x.value().size()));
}

}  // namespace mssm
