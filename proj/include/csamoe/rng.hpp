#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace csamoe {

using Rng = std::mt19937_64;

/// Randomness consumers. Every purpose gets its own stream so that, for
/// example, toggling augmentation never shifts the dropout draws.
enum class Stream : std::uint64_t {
  init = 1,
  split = 2,
  shuffle = 3,
  augment = 4,
  dropout = 5,
  synth = 6,
  eval = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Stream key = splitmix(splitmix(splitmix(seed) ^ purpose) ^ epoch) ^ item.
/// `item` distinguishes per-sample streams within one epoch (e.g. the
/// augmentation of one sample), making results independent of scheduling.
inline Rng make_stream(std::uint64_t seed, Stream purpose, std::uint64_t epoch = 0,
                       std::uint64_t item = 0) {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ static_cast<std::uint64_t>(purpose));
  k = splitmix64(k ^ epoch);
  k = splitmix64(k ^ item);
  return Rng(k);
}

/// Seed bank handed to every stage of a run; holds nothing but the base seed.
struct Seeds {
  std::uint64_t base = 42;
  Rng stream(Stream purpose, std::uint64_t epoch = 0, std::uint64_t item = 0) const {
    return make_stream(base, purpose, epoch, item);
  }
};

inline Seeds seed_all(std::uint64_t seed) { return Seeds{seed}; }

/// Uniform double in [0, 1) using the top 53 bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace csamoe
