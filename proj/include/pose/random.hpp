#pragma once

// Portable, seed-reproducible random draws. The standard distributions are
// implementation-defined, so everything here is built on raw mt19937_64 bits
// to keep generated weights and images bit-identical across toolchains.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace pose {

using Rng = std::mt19937_64;

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive: hash_combine(a, b) != hash_combine(b, a) in general.
inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) {
  return mix64(mix64(seed) ^ value);
}

// FNV-1a over the bytes, then mixed.
inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

template <typename... Rest>
std::uint64_t hash_seed(std::uint64_t first, Rest... rest) {
  std::uint64_t h = mix64(first);
  ((h = hash_combine(h, static_cast<std::uint64_t>(rest))), ...);
  return h;
}

// Uniform in [0, 1) with 53 bits of mantissa.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Box-Muller; consumes two draws per call.
inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Uniform integer in [0, n) by rejection, n > 0.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

template <typename Container>
void shuffle(Container& c, Rng& rng) {
  for (std::size_t i = c.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform_index(rng, i));
    using std::swap;
    swap(c[i - 1], c[j]);
  }
}

}  // namespace pose
