#pragma once

#include <cstdint>
#include <random>

namespace mnar {

using Rng = std::mt19937_64;

/// Mixes (seed, stream) into an independent generator state so that replicate
/// k of a run is reproducible regardless of scheduling order.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline Rng stream_rng(std::uint64_t seed, std::uint64_t stream) {
  const std::uint64_t s = splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) + 0x2545F4914F6CDD1DULL * (stream + 1));
}

}  // namespace mnar
