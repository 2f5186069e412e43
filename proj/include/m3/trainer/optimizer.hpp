// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3/encoder/model.hpp"

namespace m3 {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  void validate() const;
  bool operator==(const AdamWConfig&) const = default;
};

/// Linear warm-up from 0 to peak_lr, then cosine decay to min_lr.
struct Schedule {
  double peak_lr = 1e-4;
  std::uint64_t warmup_steps = 1;
  std::uint64_t total_steps = 1;
  double min_lr = 0.0;
  void validate() const;
  bool operator==(const Schedule&) const = default;
};

/// Steps past total_steps clamp to min_lr.
double cosine_lr(const Schedule& schedule, std::uint64_t step);

/// First and second moments, one pair per parameter in ParameterSet order.
template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;

  static OptimizerState zeros(const ParameterSet<T>& params, AdamWConfig config);
  /// Throws DimensionError when names or shapes differ from `params`.
  void check_compatible(const ParameterSet<T>& params) const;
};

/// One decoupled-decay AdamW update from the gradients accumulated on the
/// parameters (a parameter without gradient is treated as g = 0).
/// Nothing is modified when a gradient is non-finite: NumericError names the
/// offending parameter.
template <typename T>
void adamw_step(ParameterSet<T>& params, OptimizerState<T>& state, double lr);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm);

void to_json(nlohmann::json& j, const AdamWConfig& c);
void from_json(const nlohmann::json& j, AdamWConfig& c);
void to_json(nlohmann::json& j, const Schedule& s);
void from_json(const nlohmann::json& j, Schedule& s);

extern template struct OptimizerState<float>;
extern template struct OptimizerState<double>;

}  // namespace m3
