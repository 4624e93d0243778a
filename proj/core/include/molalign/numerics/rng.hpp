#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace molalign::numerics {

// Seeded random source. The engine is std::mt19937_64, whose raw output sequence
// is fixed by the C++ standard; the conversions below are written out here (not
// taken from <random> distributions, which are implementation-defined) so draws
// are identical across toolchains:
//   uniform()     = (next() >> 11) * 2^-53                  in [0, 1)
//   normal()      = Box-Muller, cos branch, one pair per call
//   uniform_int n = next() % n                              (bias < n / 2^64)
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/boxmuller-v1";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  std::uint64_t uniform_int(std::uint64_t n) { return n == 0 ? 0 : next() % n; }
  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates, highest index first.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Independent stream derived from this seed and a label.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace molalign::numerics
