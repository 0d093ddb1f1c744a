#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace nmd {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Counter-based generator: every draw is a pure function of (seed, stream, counter),
/// so any element can be produced independently and in any order.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix64(mix64(seed) ^ (stream * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull))) {}

  constexpr std::uint64_t bits(std::uint64_t counter) const { return mix64(key_ ^ mix64(counter)); }

  /// Uniform on the open interval (0, 1).
  constexpr double uniform(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on counters (2c, 2c+1).
  double normal(std::uint64_t counter) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  constexpr CounterRng substream(std::uint64_t id) const {
    CounterRng r(0);
    r.key_ = mix64(key_ ^ mix64(id + 0x632BE59BD9B4E019ull));
    return r;
  }

 private:
  std::uint64_t key_;
};

/// Sequential cursor over a CounterRng.
class RngStream {
 public:
  explicit RngStream(CounterRng rng) : rng_(rng) {}
  RngStream(std::uint64_t seed, std::uint64_t stream) : rng_(seed, stream) {}

  std::uint64_t next_u64() { return rng_.bits(counter_++); }
  double uniform() { return rng_.uniform(counter_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return rng_.normal(counter_++); }
  /// Uniform integer in [0, n).
  int below(int n) { return static_cast<int>(uniform() * n); }

 private:
  CounterRng rng_;
  std::uint64_t counter_ = 0;
};

}  // namespace nmd
