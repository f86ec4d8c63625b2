#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssm/tensor.hpp"

namespace mssm {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// TNSR container, identical bytes on every platform:
//   0-3        ASCII "TNSR"
//   u32 LE     version (1)
//   u32 LE     ndim
//   u32 LE xN  extents
//   f64 LE     values, row-major (innermost dimension fastest)
namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::vector<std::uint8_t> tnsr_encode(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(12 + 4 * t.dims().size() + 8 * static_cast<std::size_t>(t.size()));
  for (char ch : {'T', 'N', 'S', 'R'}) out.push_back(static_cast<std::uint8_t>(ch));
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(t.dims().size()));
  for (std::int64_t d : t.dims()) {
    if (d > 0xffffffffLL) throw std::invalid_argument("tnsr: extent exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (std::int64_t i = 0; i < t.size(); ++i) detail::put_f64(out, t[i]);
  return out;
}

inline Tensor tnsr_decode(const std::uint8_t* bytes, std::size_t len) {
  if (len < 12 || std::memcmp(bytes, "TNSR", 4) != 0) {
    throw IoError("tnsr: bad magic");
  }
  if (detail::get_u32(bytes + 4) != 1) throw IoError("tnsr: unsupported version");
  const std::uint32_t ndim = detail::get_u32(bytes + 8);
  if (len < 12 + 4ull * ndim) throw IoError("tnsr: truncated header");
  std::vector<std::int64_t> dims(ndim);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    dims[i] = detail::get_u32(bytes + 12 + 4 * i);
    if (dims[i] <= 0) throw IoError("tnsr: non-positive extent");
    count *= static_cast<std::size_t>(dims[i]);
  }
  const std::size_t payload = 12 + 4ull * ndim;
  if (len != payload + 8 * count) throw IoError("tnsr: payload size mismatch");
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = detail::get_f64(bytes + payload + 8 * i);
  return Tensor(std::move(dims), std::move(values));
}

// All artifact files go through temp-plus-rename so readers never observe a
// partial write.
inline void write_file_atomic(const std::filesystem::path& path, const void* bytes,
                              std::size_t len) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + tmp.string());
    f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(len));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + " (" + ec.message() + ")");
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

inline void write_tnsr(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = tnsr_encode(t);
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline Tensor read_tnsr(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return tnsr_decode(bytes.data(), bytes.size());
}

}  // namespace mssm
