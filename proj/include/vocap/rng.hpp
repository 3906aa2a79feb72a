#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "vocap/common.hpp"
#include "vocap/tensor.hpp"

namespace vocap {

/// Deterministic RNG. Distributions are implemented here rather than with
/// std::*_distribution so that streams are stable across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(uniform() * (static_cast<double>(hi) - lo + 1.0));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Independent child stream; stable under call order of the parent.
  Rng fork(uint64_t stream) const {
    return Rng(hash_combine(base_seed_hash(), stream + 0x1234u));
  }
  Rng fork(std::string_view name) const { return fork(fnv1a64(name)); }

  template <typename S>
  void fill_normal(Tensor<S>& t, double stddev) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(normal() * stddev);
  }

  template <typename S>
  void fill_uniform(Tensor<S>& t, double lo, double hi) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
  }

 private:
  uint64_t base_seed_hash() const {
    // Snapshot-independent per-instance identity: hash the engine state copy.
    std::mt19937_64 copy = engine_;
    return copy();
  }

  mutable std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vocap
