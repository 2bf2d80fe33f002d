#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fbspde {

// All randomness in the library flows through SplitMix64, a fixed, documented
// integer mixer, so streams are reproducible across compilers and platforms
// (std::normal_distribution is implementation-defined).

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Derives an independent child seed: hash(seed, index).
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index * 0xD1B54A32D192ED03ull + 1));
}

/// Uniform in (0, 1] from 53 high bits.
inline double to_unit_open_closed(std::uint64_t bits) {
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

/// Counter-based standard normal: the value depends only on (key, counter).
/// Box-Muller, cosine branch, with two hashed uniforms per draw.
inline double counter_normal(std::uint64_t key, std::uint64_t counter) {
  const std::uint64_t base = splitmix64(key ^ splitmix64(counter));
  const double u1 = to_unit_open_closed(splitmix64(base));
  const double u2 = to_unit_open_closed(splitmix64(base + 0x632BE59BD9B4E019ull));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sequential SplitMix64 stream.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) {
    const double u = static_cast<double>(next() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }

 private:
  std::uint64_t state_;
};

}  // namespace fbspde
