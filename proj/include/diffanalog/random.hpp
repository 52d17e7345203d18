#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace diffanalog {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based seed derivation: the seed for a (component, step, sample, ...)
/// path depends only on the root and the path, never on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(root);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(root, path));
}

/// Stream tags used with derive_seed.
namespace stream {
inline constexpr std::uint64_t kMismatch = 1;
inline constexpr std::uint64_t kGumbel = 2;
inline constexpr std::uint64_t kNoise = 3;
inline constexpr std::uint64_t kBatch = 4;
inline constexpr std::uint64_t kData = 5;
inline constexpr std::uint64_t kChallenge = 6;
inline constexpr std::uint64_t kInit = 7;
inline constexpr std::uint64_t kWiener = 8;
}  // namespace stream

/// Uniform draw on the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  while (x <= 0.0) x = u(rng);
  return x;
}

}  // namespace diffanalog
