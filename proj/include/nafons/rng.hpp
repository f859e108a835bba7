#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace nafons {

// Seeded random stream with a fixed draw protocol. All stochastic parts of
// the solver consume doubles from this wrapper only, never from std::
// distributions, so that a (seed, stream) pair yields the same sequence on
// every platform. Streams are derived from a base seed with splitmix64 so
// restarts and Monte-Carlo trials can run independently.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(mix64(seed)) {}

  // Independent sub-stream: stream(seed, a) and stream(seed, b) are
  // decorrelated for a != b.
  static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
    return Rng(mix64(seed) ^ mix64(stream_id * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller without caching: exactly two uniform
  // draws per call, which keeps stream accounting simple.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();  // guard log(0); astronomically rare
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  bool bernoulli(double p_true) { return uniform01() < p_true; }

 private:
  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 eng_;
};

}  // namespace nafons
