#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cmf {

// Deterministic helpers on top of mt19937_64. Distributions are hand-rolled
// so streams do not depend on the standard library's implementation.

inline double rand_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
}

inline double rand_uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * rand_uniform(rng);
}

// Box-Muller; consumes two draws per call.
inline double rand_normal(std::mt19937_64& rng) {
  const double u1 = 1.0 - rand_uniform(rng);  // (0, 1]
  const double u2 = rand_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline std::uint64_t rand_index(std::mt19937_64& rng, std::uint64_t n) {
  return rng() % n;
}

// splitmix64: cheap stateless mixing for derived seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(a ^ mix_seed(b));
}

}  // namespace cmf
