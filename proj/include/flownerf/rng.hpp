// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace flownerf {

/// Stateless counter-based RNG. Every draw is a pure function of
/// (seed, stream, a, b, c), so results do not depend on evaluation order or
/// on how work is split across threads.
struct CounterRng {
  std::uint64_t seed = 0;

  // Stream ids keep independent uses of the generator decorrelated.
  enum Stream : std::uint64_t {
    kInit = 1,       // parameter initialization
    kStratified = 2, // per-ray stratified sample jitter
    kResample = 3,   // hierarchical importance resampling
    kBatch = 4,      // training batch (frame, pixel) selection
    kTest = 5,       // test-only draws
  };

  static std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t u64(std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0,
                    std::uint64_t c = 0) const {
    std::uint64_t h = mix(seed + 0x9e3779b97f4a7c15ull);
    h = mix(h ^ (stream * 0xff51afd7ed558ccdull));
    h = mix(h ^ (a * 0xc4ceb9fe1a85ec53ull));
    h = mix(h ^ (b * 0x2545f4914f6cdd1dull));
    h = mix(h ^ (c * 0x9e3779b97f4a7c15ull));
    return h;
  }

  /// Uniform in [0, 1).
  float uniform(std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0,
                std::uint64_t c = 0) const {
    return static_cast<float>(u64(stream, a, b, c) >> 40) * 0x1.0p-24f;
  }

  /// Standard normal via Box-Muller; consumes counters (.., c) and (.., c+half).
  float normal(std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0,
               std::uint64_t c = 0) const {
    const double u1 =
        (static_cast<double>(u64(stream, a, b, c) >> 11) + 0.5) * 0x1.0p-53;
    const double u2 =
        static_cast<double>(u64(stream, a, b, c + 0x8000000000000000ull) >> 11) * 0x1.0p-53;
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                              std::cos(2.0 * 3.14159265358979323846 * u2));
  }
};

}  // namespace flownerf
