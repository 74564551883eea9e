#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace kriformer {

// All randomness flows through one mt19937_64 per run so that a fixed seed
// reproduces every downstream draw. Distribution helpers are hand-rolled:
// the standard library leaves <random> distributions implementation-defined,
// which would tie outputs to a particular libstdc++ version.
using Rng = std::mt19937_64;

// Uniform in [0, 1) with 53 random mantissa bits.
inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_range(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(rng);
}

// Unbiased integer in [0, n). n must be positive.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t limit = max - max % n;
  std::uint64_t v = rng();
  while (v >= limit) v = rng();
  return v % n;
}

// Standard normal via Box-Muller. The sine mate is discarded so the
// generator state advances by exactly two draws per sample.
inline double normal_sample(Rng& rng) {
  const double u1 = 1.0 - uniform_unit(rng);  // (0, 1]
  const double u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

}  // namespace kriformer
