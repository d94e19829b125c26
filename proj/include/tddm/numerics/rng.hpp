#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace tddm::numerics {

// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: draw k of a stream is a pure function of
/// (key, k), so any draw can be reproduced without replaying the sequence.
///
/// Streams are derived by hashing a label into the key, which lets every
/// stochastic site (init, noise, timesteps, shuffling) own an independent,
/// reproducible stream under one root seed.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed = 0) noexcept : key_(mix64(seed)) {}

  /// Independent child stream identified by `id`.
  constexpr CounterRng derive(std::uint64_t id) const noexcept {
    CounterRng child;
    child.key_ = mix64(key_ ^ mix64(id + 0x632be59bd9b4e019ULL));
    return child;
  }

  constexpr std::uint64_t key() const noexcept { return key_; }
  constexpr std::uint64_t counter() const noexcept { return counter_; }

  constexpr std::uint64_t at(std::uint64_t counter) const noexcept {
    return mix64(key_ ^ mix64(counter));
  }

  std::uint64_t next_u64() noexcept { return at(counter_++); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller; consumes two counters per draw.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal truncated to [-2 std, 2 std] by resampling.
  double truncated_normal(double stddev) noexcept {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * stddev;
    }
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace tddm::numerics
