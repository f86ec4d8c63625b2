#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mssm/tensor.hpp"

namespace mssm {

// Seeded random source. Draws go through mt19937_64 plus explicit transforms,
// so a stream depends only on the seed, never on the standard library's
// distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes exactly two draws per call.
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform in [0, n). Modulo bias is negligible for the small n used here.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  Tensor normal_tensor(std::vector<std::int64_t> dims, double stddev = 1.0) {
    Tensor t(std::move(dims));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = stddev * normal();
    return t;
  }

  Tensor uniform_tensor(std::vector<std::int64_t> dims, double lo, double hi) {
    Tensor t(std::move(dims));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
  }

  // Derives an independent child stream; advances this stream by one draw.
  Rng split(std::uint64_t stream) {
    return Rng(next_u64() ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mssm
