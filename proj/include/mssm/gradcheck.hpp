#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "mssm/tensor.hpp"

namespace mssm {

// Central-difference gradient of a scalar-valued function, the oracle every
// analytic gradient in this project is checked against.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Tensor g(x.dims().empty() ? std::vector<std::int64_t>{} : x.dims());
  Tensor probe = x;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::invalid_argument("finite_diff_grad: function returned a non-finite value");
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Largest elementwise deviation, normalized by the largest gradient magnitude
// of either side.
inline double grad_rel_error(const Tensor& analytic, const Tensor& numeric) {
  if (!analytic.same_dims(numeric)) {
    throw std::invalid_argument("grad_rel_error: shape mismatch");
  }
  double scale = 1e-8;
  double diff = 0.0;
  for (std::int64_t i = 0; i < analytic.size(); ++i) {
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
  }
  return diff / scale;
}

}  // namespace mssm
