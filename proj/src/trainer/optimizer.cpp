// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/trainer/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "m3/util/json_fields.hpp"

namespace m3 {

void AdamWConfig::validate() const {
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("adamw betas must lie in [0, 1)");
  }
  if (!(eps > 0)) throw ConfigError("adamw eps must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("adamw weight_decay must be non-negative");
}

void Schedule::validate() const {
  if (!(peak_lr > 0) || !std::isfinite(peak_lr)) throw ConfigError("schedule peak_lr must be positive");
  if (!(min_lr >= 0) || min_lr > peak_lr) throw ConfigError("schedule min_lr must lie in [0, peak_lr]");
  if (warmup_steps == 0) throw ConfigError("schedule warmup_steps must be positive");
  if (total_steps < warmup_steps) throw ConfigError("schedule total_steps must be >= warmup_steps");
}

double cosine_lr(const Schedule& s, std::uint64_t step) {
  if (step >= s.total_steps) return step == s.warmup_steps ? s.peak_lr : s.min_lr;
  if (step <= s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros(const ParameterSet<T>& params, AdamWConfig config) {
  config.validate();
  OptimizerState s;
  s.config = config;
  for (const auto& [name, var] : params) {
    s.names.push_back(name);
    s.m.emplace_back(var.shape());
    s.v.emplace_back(var.shape());
  }
  return s;
}

template <typename T>
void OptimizerState<T>::check_compatible(const ParameterSet<T>& params) const {
  if (params.size() != names.size() || m.size() != names.size() || v.size() != names.size()) {
    throw DimensionError("optimizer state holds " + std::to_string(names.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
  }
  std::size_t i = 0;
  for (const auto& [name, var] : params) {
    if (names[i] != name || m[i].shape() != var.shape() || v[i].shape() != var.shape()) {
      throw DimensionError("optimizer moment " + std::to_string(i) + " does not match parameter '" + name + "'");
    }
    ++i;
  }
}

template <typename T>
void adamw_step(ParameterSet<T>& params, OptimizerState<T>& state, double lr) {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  state.check_compatible(params);
  for (const auto& [name, var] : params) {
    const Tensor<T>& g = var.node()->grad;
    if (!g.all_finite()) {
      std::size_t bad = 0;
      while (bad < g.numel() && std::isfinite(static_cast<double>(g[bad]))) ++bad;
      throw NumericError("non-finite gradient in '" + name + "' at element " + std::to_string(bad) +
                         " (step " + std::to_string(state.t + 1) + ")");
    }
  }
  const auto& c = state.config;
  const std::uint64_t t = ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  std::size_t i = 0;
  for (auto& [name, var] : params) {
    Tensor<T>& p = var.mutable_value();
    const Tensor<T>& g = var.node()->grad;
    const bool has_grad = g.numel() == p.numel();
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = has_grad ? static_cast<double>(g[k]) : 0.0;
      const double mk = c.beta1 * static_cast<double>(m[k]) + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * static_cast<double>(v[k]) + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double m_hat = mk / bc1;
      const double v_hat = vk / bc2;
      const double pk = static_cast<double>(p[k]);
      p[k] = static_cast<T>(pk - lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * pk));
    }
    ++i;
  }
}

template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip max_norm must be positive");
  double sq = 0.0;
  for (const auto& [name, var] : params) {
    for (T g : var.node()->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const double f = max_norm / norm;
    for (auto& [name, var] : params) {
      for (T& g : var.node()->grad.values()) g = static_cast<T>(static_cast<double>(g) * f);
    }
  }
  return norm;
}

void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = nlohmann::json{{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, AdamWConfig& c) {
  json_fields::require_known(j, "adamw", {"beta1", "beta2", "eps", "weight_decay"});
  json_fields::read(j, "adamw", "beta1", c.beta1);
  json_fields::read(j, "adamw", "beta2", c.beta2);
  json_fields::read(j, "adamw", "eps", c.eps);
  json_fields::read(j, "adamw", "weight_decay", c.weight_decay);
}

void to_json(nlohmann::json& j, const Schedule& s) {
  j = nlohmann::json{{"peak_lr", s.peak_lr},
                     {"warmup_steps", s.warmup_steps},
                     {"total_steps", s.total_steps},
                     {"min_lr", s.min_lr}};
}

void from_json(const nlohmann::json& j, Schedule& s) {
  json_fields::require_known(j, "schedule", {"peak_lr", "warmup_steps", "total_steps", "min_lr"});
  json_fields::read(j, "schedule", "peak_lr", s.peak_lr);
  json_fields::read(j, "schedule", "warmup_steps", s.warmup_steps);
  json_fields::read(j, "schedule", "total_steps", s.total_steps);
  json_fields::read(j, "schedule", "min_lr", s.min_lr);
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step(ParameterSet<float>&, OptimizerState<float>&, double);
template void adamw_step(ParameterSet<double>&, OptimizerState<double>&, double);
template double clip_grad_norm(ParameterSet<float>&, double);
template double clip_grad_norm(ParameterSet<double>&, double);

}  // namespace m3
