#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "mv3d/core/tensor.hpp"

namespace mv3d {

/// Seeded generator with platform-independent uniform/normal draws. The standard
/// distributions are implementation-defined, so the conversions are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    MV3D_REQUIRE(n > 0, "Rng::index on empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  BasicTensor<T> normal_tensor(Shape shape, double stddev = 1.0) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(stddev * normal());
    return t;
  }

  template <class T>
  BasicTensor<T> uniform_tensor(Shape shape, double lo, double hi) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  // Independent child stream, stable under the parent's later use.
  Rng fork(std::uint64_t salt) {
    std::uint64_t z = next_u64() ^ (salt * 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mv3d
