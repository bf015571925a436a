// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "refmc/core.hpp"

namespace refmc {

namespace detail {

// SplitMix64 finalizer; full-avalanche 64-bit mixer.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return detail::mix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// Counter-based generator: the stream is a pure function of (seed, counter),
// so identical seeds give bitwise-identical sample streams and streams can be
// derived per pixel/sample without shared state.
struct Rng {
  uint64_t seed = 0;
  uint64_t counter = 0;

  Rng() = default;
  explicit Rng(uint64_t s) : seed(s) {}

  // Decorrelated stream for a (pixel, sample) pair under a global seed.
  static Rng for_stream(uint64_t global_seed, uint64_t stream, uint64_t substream = 0) {
    return Rng(hash_combine(hash_combine(global_seed, stream), substream));
  }

  uint64_t next_u64() { return detail::mix64(seed ^ detail::mix64(counter++)); }

  uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

  // Uniform in [0, 1).
  float next_f32() { return static_cast<float>(next_u64() >> 40) * 0x1p-24f; }

  Vec2 next_2d() {
    float a = next_f32();
    float b = next_f32();
    return {a, b};
  }
};

}  // namespace refmc
