#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace privpart {

// Deterministic RNG. All distribution transforms are written out here instead
// of using <random> distributions, whose outputs differ between standard
// library implementations; identical seeds must give identical streams in
// saved artifacts no matter where they were produced.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) via 128-bit multiply-shift.
  uint64_t uniform_index(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  // Standard normal, Box-Muller. One value per call; the twin is discarded so
  // the stream position does not depend on call parity.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Laplace(0, scale) by inverse CDF.
  double laplace(double scale) {
    const double u = uniform() - 0.5;
    const double s = (u < 0.0) ? -1.0 : 1.0;
    return -scale * s * std::log(1.0 - 2.0 * std::fabs(u));
  }

  // Fisher-Yates.
  template <typename V>
  void shuffle(V& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent child stream; each defender/attacker gets its own
  // RNG so parallel or reordered training cannot change results.
  Rng fork(uint64_t salt) const {
    uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ull * (salt + 1));
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return Rng(x);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace privpart
