#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace metawrap {

// Deterministic random source. All stochastic choices in the library flow
// through this class so that a fixed seed reproduces runs bit-for-bit across
// platforms (mt19937_64 and the arithmetic below are fully specified; no
// std::distribution objects, whose outputs vary between standard libraries).
class Rng {
public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n); n must be positive.
  int64_t index(int64_t n) { return static_cast<int64_t>(uniform() * static_cast<double>(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  uint64_t raw() { return eng_(); }

  // Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(index(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 eng_;
};

}  // namespace metawrap
