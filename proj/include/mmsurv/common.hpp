#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mmsurv {

/// Thrown when a metric has no defined value on the given data
/// (e.g. no comparable pairs, or all samples censored).
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent on-disk data (manifests, volumes, checkpoints).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or argument violations in numerical code.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// splitmix64: cheap, well-mixed derivation of sub-seeds from a master seed.
// Used everywhere a component needs its own deterministic stream.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
  return splitmix64(master ^ splitmix64(stream + 1));
}

/// Deterministic RNG wrapper. All stochastic choices in the library run
/// through this so results are reproducible for a fixed seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }
  double normal(double mean, double sd) {
    std::normal_distribution<double> d(mean, sd);
    return d(engine_);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(engine_);
  }
  // Fisher-Yates, independent of std::shuffle's unspecified consumption order.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mmsurv
