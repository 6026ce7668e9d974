#pragma once

#include <cstdint>
#include <random>

namespace ssts {

// SplitMix64 finalizer; used only to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for stream `stream` of purpose `tag` under a user seed. Rows, trials and
// nodes each get their own engine so results do not depend on thread count.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t stream) {
  return mix64(mix64(seed ^ mix64(tag)) + stream);
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed, std::uint64_t tag, std::uint64_t stream = 0) {
  return Engine(stream_seed(seed, tag, stream));
}

// Stream tags.
enum : std::uint64_t {
  kTagGraph = 1,
  kTagWeights = 2,
  kTagNoise = 3,
  kTagNetInit = 4,
  kTagNetShuffle = 5,
  kTagNetNoise = 6,
  kTagKendall = 7,
  kTagData = 8,
};

}  // namespace ssts
