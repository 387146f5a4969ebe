// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "lbw/common.hpp"

namespace lbw {

// Deterministic RNG. std::mt19937_64 is fully specified by the standard, but
// the std:: distributions are not, so uniform/normal draws are implemented
// here to make streams reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Unbiased integer in [0, bound) via rejection sampling.
  uint64_t uniform_below(uint64_t bound) {
    require(bound > 0, ErrorKind::contract, "uniform_below: bound must be > 0");
    uint64_t threshold = (~bound + 1) % bound;  // 2^64 mod bound
    for (;;) {
      uint64_t r = engine_();
      if (r >= threshold) return r % bound;
    }
  }

  int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
    require(lo <= hi_inclusive, ErrorKind::contract, "uniform_int: empty range");
    return lo + static_cast<int64_t>(
                    uniform_below(static_cast<uint64_t>(hi_inclusive - lo) + 1));
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Box-Muller; one value per call, spare cached.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    // Avoid log(0).
    while (u1 <= 0.0) u1 = uniform01();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return mean + stddev * radius * std::cos(angle);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(uniform_below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  template <typename T>
  const T& choice(const std::vector<T>& v) {
    require(!v.empty(), ErrorKind::contract, "choice: empty vector");
    return v[uniform_below(v.size())];
  }

  // Derives an independent stream; used to give each pipeline stage its own
  // named seed without coupling draw counts.
  Rng fork(uint64_t salt) {
    uint64_t s = engine_() ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
    return Rng(s);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lbw
