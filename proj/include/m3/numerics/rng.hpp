// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace m3 {

/// Seeded generator with distribution helpers implemented here rather than via
/// <random> distributions, so that streams are identical across standard
/// library implementations.
///
/// Independent streams are derived from one run seed by name
/// (`Rng::stream(seed, "init")`) and optionally by an index such as the step
/// number; see `derive_seed`.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return Rng(derive_seed(seed, name, index));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  double normal();

  /// Normal(0, stddev) resampled until it lies within two standard deviations.
  double truncated_normal(double stddev);

  std::string serialize() const;
  void deserialize(const std::string& state);

  /// splitmix64 mix of the run seed, an FNV-1a hash of `name` and `index`.
  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                   std::uint64_t index = 0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace m3
