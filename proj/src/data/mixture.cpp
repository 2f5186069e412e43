// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/data/mixture.hpp"

#include <cmath>

#include "m3/numerics/errors.hpp"

namespace m3 {

LanguageMixture smooth_mixture(const std::vector<std::pair<std::string, double>>& proportions,
                               double smoothing) {
  if (!(smoothing >= 0.0 && smoothing <= 1.0)) throw ConfigError("smoothing factor must lie in [0, 1]");
  if (proportions.empty()) throw DataError("language mixture is empty");
  LanguageMixture m;
  m.smoothing = smoothing;
  double total = 0.0;
  for (const auto& [lang, p] : proportions) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw DataError("language '" + lang + "' has an invalid proportion");
    m.languages.push_back(lang);
    m.raw.push_back(p);
    total += p;
  }
  if (total == 0.0) throw DataError("language proportions are all zero");
  if (std::abs(total - 1.0) > 1e-9) {
    throw DataError("language proportions sum to " + std::to_string(total) + ", expected 1");
  }
  double z = 0.0;
  m.smoothed.resize(m.raw.size());
  for (std::size_t i = 0; i < m.raw.size(); ++i) {
    m.smoothed[i] = m.raw[i] > 0.0 ? std::pow(m.raw[i], smoothing) : 0.0;
    z += m.smoothed[i];
  }
  for (auto& p : m.smoothed) p /= z;
  return m;
}

std::vector<std::pair<std::string, double>> proportions_from_counts(
    const std::vector<std::pair<std::string, std::size_t>>& counts) {
  double total = 0.0;
  for (const auto& [lang, n] : counts) total += static_cast<double>(n);
  if (total == 0.0) throw DataError("language counts are all zero");
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [lang, n] : counts) out.emplace_back(lang, static_cast<double>(n) / total);
  return out;
}

std::size_t sample_language(const LanguageMixture& mixture, Rng& rng) {
  const double u = rng.uniform();
  double cdf = 0.0;
  std::size_t last_supported = 0;
  for (std::size_t i = 0; i < mixture.smoothed.size(); ++i) {
    if (mixture.smoothed[i] <= 0.0) continue;
    last_supported = i;
    cdf += mixture.smoothed[i];
    if (u < cdf) return i;
  }
  return last_supported;  // u lands above a cdf that rounded below 1
}

}  // namespace m3
