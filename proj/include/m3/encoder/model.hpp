// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "m3/encoder/config.hpp"
#include "m3/numerics/autograd.hpp"
#include "m3/numerics/rng.hpp"

namespace m3 {

/// Named trainable tensors in a fixed insertion order. Copies share the
/// underlying nodes; use `clone` for an independent copy.
template <typename T>
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Var<T>>;

  void add(std::string name, Tensor<T> value);
  /// Adds an existing node (shared, not copied).
  void add_shared(std::string name, Var<T> var);

  bool contains(std::string_view name) const;
  const Var<T>& at(std::string_view name) const;
  Var<T>& at(std::string_view name);

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t element_count() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  ParameterSet clone() const;
  /// CRC-32 over names, shapes and raw values; cheap identity check.
  std::uint32_t fingerprint() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ForwardOptions {
  /// Layers whose states are returned; empty means config.granularity.layers.
  std::vector<int> taps;
  /// Enables hidden-state dropout (requires `rng` when the rate is positive).
  bool train = false;
  Rng* rng = nullptr;
  /// Skip layers above the deepest tap. `final_state` is then the state of
  /// that deepest layer.
  bool stop_at_last_tap = false;
};

template <typename T>
struct ForwardOutput {
  /// Layer index -> [(batch·seq)×M] states, normalized by the shared final
  /// norm (pre-norm layout), so a tap equals the output of the prefix model.
  std::map<int, Var<T>> tapped;
  Var<T> final_state;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

/// Bidirectional transformer encoder with a shared truncatable MLM head.
template <typename T>
class Encoder {
 public:
  Encoder(ModelConfig config, ParameterSet<T> params);

  /// Truncated normal(0, 0.02) weights, unit norm weights, zero biases.
  static Encoder init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const ParameterSet<T>& params() const noexcept { return params_; }
  ParameterSet<T>& params() noexcept { return params_; }

  /// `tokens` and `attn_mask` hold `batch` rows of `seq` entries each.
  ForwardOutput<T> forward(std::span<const std::int32_t> tokens,
                           std::span<const std::uint8_t> attn_mask, std::size_t batch,
                           std::size_t seq, const ForwardOptions& options = {}) const;

  /// h[:, :d] · W[:d, :] + b.
  Var<T> mlm_logits(const Var<T>& h, int dim) const;
  /// Row-stochastic softmax of `mlm_logits`.
  Var<T> mlm_head(const Var<T>& h, int dim) const;

  /// Masked mean of each sequence's states, truncated to `dim` and
  /// L2-normalized: [(B·s)×M] -> [B×dim].
  Var<T> pool(const Var<T>& state, std::span<const std::uint8_t> attn_mask, std::size_t seq,
              int dim) const;

  /// The first `layers` layers sharing this model's parameter nodes.
  Encoder prefix(int layers) const;

 private:
  Var<T> norm(const Var<T>& x, const std::string& prefix) const;
  Var<T> linear(const Var<T>& x, const std::string& prefix) const;
  Var<T> attention_block(const Var<T>& x, int layer, std::span<const std::uint8_t> mask,
                         std::size_t seq) const;
  Var<T> ffn_block(const Var<T>& x, int layer) const;

  ModelConfig config_;
  ParameterSet<T> params_;
};

/// Parameter tensors (name, shape) the given config instantiates, in order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace m3
