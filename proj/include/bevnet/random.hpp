#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace bevnet {

// Deterministic RNG used everywhere in the project.
//
// The engine is std::mt19937_64 (bit-exact across platforms), but the
// distributions are hand-rolled: std::uniform_real_distribution and friends
// are implementation-defined, which would break golden fixtures when the
// standard library changes.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 bits of randomness.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  // Box-Muller with a cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 step, used to derive independent substream seeds from a base
// seed plus a tag (sequence index, view index, ...).
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename... Tags>
inline uint64_t derive_seed(uint64_t base, Tags... tags) {
  uint64_t s = base;
  ((s = mix_seed(s, static_cast<uint64_t>(tags))), ...);
  return s;
}

}  // namespace bevnet
