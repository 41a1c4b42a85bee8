// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace lmleak {

// Deterministic random source. mt19937_64 is fully specified by the standard;
// the float/int derivations below avoid std::uniform_*_distribution, whose
// output is implementation-defined and would break cross-toolchain
// reproducibility of zoo builds and schedules.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi) from 24 random bits; result is an exact float.
  float next_float(float lo, float hi) {
    float unit = static_cast<float>(engine_() >> 40) * 0x1.0p-24f;
    return lo + unit * (hi - lo);
  }

  // Uniform integer in [0, n). Rejection-free modulo is fine here: n is tiny
  // compared to 2^64, so the bias is far below anything observable.
  std::uint64_t next_below(std::uint64_t n) { return engine_() % n; }

  bool next_bool(double p) { return next_unit() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lmleak
