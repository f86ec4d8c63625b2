#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mssm {

// Dense row-major array of float64. The innermost dimension varies fastest.
// Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() : dims_{}, data_(1, 0.0) {}

  explicit Tensor(std::vector<std::int64_t> dims)
      : dims_(std::move(dims)), data_(static_cast<std::size_t>(checked_size(dims_)), 0.0) {}

  Tensor(std::vector<std::int64_t> dims, std::vector<double> values)
      : dims_(std::move(dims)), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_size(dims_)) {
      throw std::invalid_argument("tensor: value count does not match dims");
    }
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor full(std::vector<std::int64_t> dims, double v) {
    Tensor t(std::move(dims));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.dims_); }

  const std::vector<std::int64_t>& dims() const { return dims_; }
  std::int64_t dim(std::size_t i) const { return dims_.at(i); }
  int rank() const { return static_cast<int>(dims_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const double& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(std::initializer_list<std::int64_t> idx) { return data_[flat_index(idx)]; }
  double at(std::initializer_list<std::int64_t> idx) const { return data_[flat_index(idx)]; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }

  bool bit_equal(const Tensor& o) const {
    return dims_ == o.dims_ &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0;
  }

  // Reshape copies the flat values; the byte pattern is preserved exactly.
  Tensor reshaped(std::vector<std::int64_t> new_dims) const {
    Tensor out(std::move(new_dims), data_);
    return out;
  }

  // When this tensor will not be used again, moves the storage instead.
  Tensor reshaped_move(std::vector<std::int64_t> new_dims) && {
    return Tensor(std::move(new_dims), std::move(data_));
  }

  // The tape reads this when the tensor is registered as a leaf.
  bool requires_grad = false;

 private:
  std::size_t flat_index(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != dims_.size()) throw std::invalid_argument("tensor: index rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (std::int64_t i : idx) {
      if (i < 0 || i >= dims_[k]) throw std::out_of_range("tensor: index out of range");
      flat = flat * dims_[k] + i;
      ++k;
    }
    return static_cast<std::size_t>(flat);
  }

  static std::int64_t checked_size(const std::vector<std::int64_t>& dims) {
    std::int64_t n = 1;
    for (std::int64_t d : dims) {
      if (d <= 0) throw std::invalid_argument("tensor: extents must be positive");
      if (n > (std::int64_t{1} << 40) / d) throw std::invalid_argument("tensor: size overflow");
      n *= d;
    }
    return n;
  }

  std::vector<std::int64_t> dims_;
  std::vector<double> data_;
};

inline double scalar_value(const Tensor& t) {
  if (t.size() != 1) throw std::invalid_argument("expected a scalar tensor");
  return t[0];
}

inline void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw std::invalid_argument(std::string(where) + ": non-finite input");
  }
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (std::int64_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_dims(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mssm
