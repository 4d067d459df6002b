#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace owt {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent per-index streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Normal(0, stddev) truncated to +-2 stddev by rejection.
template <typename T>
std::vector<T> truncated_normal(std::size_t n, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> out(n);
  for (auto& v : out) {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * stddev);
  }
  return out;
}

}  // namespace owt
