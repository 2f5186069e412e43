// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "m3/numerics/rng.hpp"

namespace m3 {

/// Per-language sampling proportions before and after exponential smoothing.
struct LanguageMixture {
  std::vector<std::string> languages;
  std::vector<double> raw;
  std::vector<double> smoothed;
  double smoothing = 1.0;
};

/// P'(L) = P(L)^S / Σ_K P(K)^S. Languages with P(L) = 0 keep P'(L) = 0, so
/// S = 0 gives the uniform distribution over supported languages.
/// Throws DataError for negative, all-zero or non-normalized P (tolerance
/// 1e-9), ConfigError for S outside [0, 1].
LanguageMixture smooth_mixture(const std::vector<std::pair<std::string, double>>& proportions,
                               double smoothing);

/// Raw proportions from per-language counts.
std::vector<std::pair<std::string, double>> proportions_from_counts(
    const std::vector<std::pair<std::string, std::size_t>>& counts);

/// Index into mixture.languages drawn with probability `smoothed`.
std::size_t sample_language(const LanguageMixture& mixture, Rng& rng);

}  // namespace m3
