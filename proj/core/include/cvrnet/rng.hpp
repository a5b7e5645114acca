#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace cvrnet {

/// Deterministic PRNG with a fully specified algorithm (SplitMix64 core),
/// so that seeded runs reproduce bit-identically on any platform.
/// std::mt19937 + std::normal_distribution are avoided on purpose: the
/// distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1), 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) via rejection sampling.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t threshold = (0ull - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  /// Fisher-Yates shuffle using below(); deterministic for a given state.
  template <typename V>
  void shuffle(V& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Fans a master seed out into fixed-purpose streams ("init", "folds",
/// "shuffle", "augment", ...) so each pipeline stage can be reproduced
/// independently of the others.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the purpose tag
  for (const char c : purpose) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return detail::mix64(master ^ detail::mix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                                 std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t s = derive_seed(master, purpose);
  s = detail::mix64(s ^ detail::mix64(a + 0x9e3779b97f4a7c15ull));
  s = detail::mix64(s ^ detail::mix64(b + 0x517cc1b727220a95ull));
  return s;
}

}  // namespace cvrnet
