#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssm/pcm.hpp"
#include "mssm/rng.hpp"
#include "mssm/ssm.hpp"

// Wall-clock scaling of the two aggregation routes over one flattened token
// sequence: the chunked selective scan (linear) versus attention where the
// sequence attends over itself (quadratic in tokens). Single-threaded,
// medians over repeats, warm-up excluded.
namespace mssm {

struct BenchPoint {
  std::string method;  // "scan_chunked" | "cross_attention"
  std::int64_t tokens = 0;
  double median_ns = 0.0;
  std::int64_t peak_bytes = 0;  // best-effort workspace estimate
  std::int64_t repeats = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::int64_t scan_workspace_bytes(std::int64_t l, std::int64_t c, std::int64_t n,
                                         std::int64_t chunk) {
  const std::int64_t nchunks = (l + chunk - 1) / chunk;
  return 8 * (2 * l * n + l * c + 3 * nchunks * c * n + c * n + l * c);
}

inline std::int64_t attention_workspace_bytes(std::int64_t l, std::int64_t c) {
  return 8 * (4 * l * c + l);
}

}  // namespace detail

inline constexpr std::int64_t kBenchChunk = 128;

// Times both methods on identical random operands per length. Output shapes
// are checked to agree before any timing starts.
inline std::vector<BenchPoint> bench_scaling(const std::vector<std::int64_t>& lengths,
                                             std::int64_t channels, std::int64_t repeats,
                                             std::uint64_t seed = 42) {
  if (lengths.size() < 4) throw std::invalid_argument("bench: need at least 4 lengths");
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    if (lengths[i] <= lengths[i - 1]) {
      throw std::invalid_argument("bench: lengths must be strictly increasing");
    }
  }
  if (repeats < 5) throw std::invalid_argument("bench: need at least 5 repeats");

  Rng rng(seed);
  const std::int64_t d_state = 8;
  SsmParams scan_params = init_ssm_params(channels, d_state, rng);
  CrossAttnParams attn_params = init_cross_attn(channels, rng);

  double sink = 0.0;
  std::vector<BenchPoint> out;
  for (std::int64_t len : lengths) {
    const Tensor x = rng.normal_tensor({len, channels});

    const Tensor y_scan = scan_chunked(x, scan_params, kBenchChunk);
    const Tensor y_attn = cross_attention_baseline(x, x, attn_params);
    if (!y_scan.same_dims(x) || !y_attn.same_dims(x)) {
      throw std::logic_error("bench: method output shape mismatch");
    }

    const auto time_ns = [&](auto&& fn) {
      fn();  // warm-up, excluded
      std::vector<double> times;
      times.reserve(static_cast<std::size_t>(repeats));
      for (std::int64_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(
            std::chrono::duration<double, std::nano>(t1 - t0).count());
      }
      return detail::median(times);
    };

    BenchPoint scan_pt;
    scan_pt.method = "scan_chunked";
    scan_pt.tokens = len;
    scan_pt.repeats = repeats;
    scan_pt.peak_bytes = detail::scan_workspace_bytes(len, channels, d_state, kBenchChunk);
    scan_pt.median_ns = time_ns([&] {
      const Tensor y = scan_chunked(x, scan_params, kBenchChunk);
      sink += y[0];
    });
    out.push_back(scan_pt);

    BenchPoint attn_pt;
    attn_pt.method = "cross_attention";
    attn_pt.tokens = len;
    attn_pt.repeats = repeats;
    attn_pt.peak_bytes = detail::attention_workspace_bytes(len, channels);
    attn_pt.median_ns = time_ns([&] {
      const Tensor y = cross_attention_baseline(x, x, attn_params);
      sink += y[0];
    });
    out.push_back(attn_pt);
  }
  if (sink == 0.12345) throw std::logic_error("bench: unreachable");  // keeps sink live
  return out;
}

struct SlopeFit {
  double slope = 0.0;
  double stderr_slope = 0.0;
};

// Ordinary least squares on (log tokens, log time).
inline SlopeFit fit_loglog_slope(const std::vector<BenchPoint>& points) {
  if (points.size() < 4) throw std::invalid_argument("fit: need at least 4 points");
  std::vector<double> xs, ys;
  for (const BenchPoint& p : points) {
    if (!(p.median_ns > 0.0)) throw std::invalid_argument("fit: non-positive time");
    if (p.tokens < 1) throw std::invalid_argument("fit: non-positive token count");
    xs.push_back(std::log(static_cast<double>(p.tokens)));
    ys.push_back(std::log(p.median_ns));
  }
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("fit: degenerate abscissae");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  const double intercept = my - fit.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (intercept + fit.slope * xs[i]);
    sse += r * r;
  }
  fit.stderr_slope = std::sqrt(sse / (n - 2.0) / sxx);
  return fit;
}

inline std::vector<BenchPoint> points_for_method(const std::vector<BenchPoint>& all,
                                                 const std::string& method) {
  std::vector<BenchPoint> out;
  for (const BenchPoint& p : all) {
    if (p.method == method) out.push_back(p);
  }
  return out;
}

inline std::string bench_csv(const std::vector<BenchPoint>& points) {
  std::ostringstream os;
  os << "method,tokens,median_ns,peak_bytes,repeats\n";
  for (const BenchPoint& p : points) {
    os << p.method << ',' << p.tokens << ',' << static_cast<std::int64_t>(p.median_ns) << ','
       << p.peak_bytes << ',' << p.repeats << '\n';
  }
  return os.str();
}

}  // namespace mssm
