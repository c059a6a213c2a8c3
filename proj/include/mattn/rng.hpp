#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mattn {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a parent seed and a path of
/// integer labels. Two different paths give statistically unrelated streams,
/// which is what lets sweep cells run in any order or in parallel.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(parent);
  for (std::uint64_t label : path) s = splitmix64(s ^ splitmix64(label + 0x632BE59BD9B4E019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

}  // namespace mattn
