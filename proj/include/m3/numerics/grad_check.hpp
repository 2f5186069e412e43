// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "m3/numerics/autograd.hpp"

namespace m3 {

struct GradCheckOptions {
  double step = 1e-5;  // central-difference step, must lie in [1e-6, 1e-4]
  /// Check every coordinate when the total is at most this; otherwise sample
  /// this many coordinates uniformly (without replacement).
  std::size_t max_coords = 400;
  /// Gradients smaller than this in magnitude are compared against this scale
  /// instead of their own magnitude, so rounding noise on near-zero
  /// coordinates does not count as relative error.
  double abs_floor = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of `loss` against central finite
/// differences. `loss` must rebuild its graph from the current values of
/// `params` on every call. Throws NumericError on a non-finite loss.
GradCheckResult grad_check(const std::function<Var<double>()>& loss,
                           std::vector<Var<double>> params, const GradCheckOptions& options = {});

}  // namespace m3
