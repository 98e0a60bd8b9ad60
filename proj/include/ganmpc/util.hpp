#pragma once

#include <charconv>
#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace ganmpc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// splitmix64: the seed-mixing primitive behind every RNG stream in the
// project. Portable and byte-stable across platforms, unlike the
// standard-library distributions.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Derives an independent stream from (seed, stream, counter).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t counter = 0) {
  return splitmix64(splitmix64(seed ^ (0xA0761D6478BD642FULL * (stream + 1))) +
                    counter);
}

// Counter-based generator; uniform doubles are built from the top 53 bits so
// results do not depend on libstdc++ internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x2545F4914F6CDD1DULL)) {}

  std::uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) {
    // multiply-shift; bias is negligible for n << 2^64
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

 private:
  std::uint64_t state_;
};

// FNV-1a 64-bit; used for config and file content hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = digits[v & 0xF];
    v >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf);
}

// Shortest decimal string that round-trips the double exactly.
inline std::string double_to_string(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double string_to_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{}) throw std::invalid_argument("bad numeric literal: " + s);
  return v;
}

inline bool all_finite(const MatrixXd& m) { return m.allFinite(); }
inline bool all_finite(const VectorXd& v) { return v.allFinite(); }

}  // namespace ganmpc
