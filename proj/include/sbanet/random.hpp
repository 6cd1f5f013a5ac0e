#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace sbanet {

// Mixes a base seed with stream identifiers (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// mt19937_64 with platform-independent mappings to doubles and bounded integers.
// (std::uniform_*_distribution output is implementation-defined.)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n), by rejection.
  std::uint64_t below(std::uint64_t n);
  std::int64_t between(std::int64_t lo, std::int64_t hi_inclusive);

  std::vector<double> uniform_vector(std::size_t n, double lo, double hi);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sbanet
