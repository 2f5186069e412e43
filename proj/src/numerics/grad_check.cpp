// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "m3/numerics/rng.hpp"

namespace m3 {

namespace {

double finite_loss(const std::function<Var<double>()>& loss) {
  const double v = loss().value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var<double>()>& loss,
                           std::vector<Var<double>> params, const GradCheckOptions& options) {
  if (options.step < 1e-6 || options.step > 1e-4) {
    throw ConfigError("grad_check: step must lie in [1e-6, 1e-4]");
  }
  for (auto& p : params) p.zero_grad();
  Var<double> out = loss();
  if (!std::isfinite(out.value().item())) throw NumericError("grad_check: loss is not finite");
  out.backward();

  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    analytic.push_back(params[p].grad());
    for (std::size_t i = 0; i < params[p].value().numel(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > options.max_coords) {
    Rng rng(options.seed);
    // Partial Fisher-Yates: first max_coords entries become the sample.
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(options.max_coords);
  }

  GradCheckResult result;
  result.coords_checked = coords.size();
  const double h = options.step;
  for (auto [p, i] : coords) {
    double& x = params[p].mutable_value()[i];
    const double saved = x;
    x = saved + h;
    const double up = finite_loss(loss);
    x = saved - h;
    const double down = finite_loss(loss);
    x = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[p][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = p;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace m3
