#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace vhpose {

// Deterministic random helpers. std::mt19937 has a standard-mandated
// sequence, and we derive all floating draws from raw 32-bit words so the
// same seed yields the same stream on every platform and compiler.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1) with 24-bit resolution.
  double uniform01() { return static_cast<double>(gen_() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Inclusive integer range.
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>((static_cast<uint64_t>(gen_()) * span) >> 32);
  }

  // Box-Muller, two words per draw, no cached spare.
  double normal(double mean, double stddev) {
    double u1 = (static_cast<double>(gen_() >> 8) + 0.5) * (1.0 / 16777216.0);
    double u2 = static_cast<double>(gen_() >> 8) * (1.0 / 16777216.0);
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::mt19937 gen_;
};

// Stream derivation for per-item generators (dataset samples, augmentation):
// the derived seed depends only on (base, index), never on processing order.
inline uint64_t derive_seed(uint64_t base, uint64_t index) {
  uint64_t z = base ^ (index + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace vhpose
