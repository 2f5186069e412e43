// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

namespace m3 {

/// One (layer, dim) cell of the granularity grid. Layers are 1-based.
struct Cell {
  int layer = 0;
  int dim = 0;

  auto operator<=>(const Cell&) const = default;
  /// "L<layer>-D<dim>", the key used in metric logs.
  std::string label() const;
  static Cell parse(const std::string& label);
};

/// Tapped layers L and truncation dims D. Both sorted, unique, non-empty.
struct GranularitySet {
  std::vector<int> layers;
  std::vector<int> dims;

  std::size_t grid_size() const noexcept { return layers.size() * dims.size(); }
  /// Cells in layer-major order.
  std::vector<Cell> cells() const;
  bool contains(Cell cell) const;
  bool has_layer(int layer) const;
  bool has_dim(int dim) const;

  /// Throws ConfigError if empty, unsorted, duplicated, or outside
  /// [1, n_layers] x [1, hidden].
  void validate(int n_layers, int hidden) const;

  bool operator==(const GranularitySet&) const = default;
};

enum class FfnKind { swiglu, gelu };
enum class NormKind { rmsnorm, layernorm };
enum class NormPlacement { pre, post };

struct ModelConfig {
  int n_layers = 6;
  int hidden = 64;
  int n_heads = 4;
  double ffn_mult = 8.0 / 3.0;
  int vocab = 2000;
  int max_seq = 128;
  FfnKind activation = FfnKind::swiglu;
  NormKind norm = NormKind::rmsnorm;
  NormPlacement norm_placement = NormPlacement::pre;
  bool use_bias = false;
  double hidden_dropout = 0.0;
  double norm_eps = 1e-6;
  GranularitySet granularity{{2, 4, 6}, {8, 16, 32, 64}};

  /// round(ffn_mult * hidden)
  int ffn_hidden() const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const Cell& c);
void from_json(const nlohmann::json& j, Cell& c);
void to_json(nlohmann::json& j, const GranularitySet& g);
void from_json(const nlohmann::json& j, GranularitySet& g);
void to_json(nlohmann::json& j, const ModelConfig& c);
/// Strict: unknown keys and bad enum names throw ConfigError naming the field.
void from_json(const nlohmann::json& j, ModelConfig& c);

std::string to_string(FfnKind k);
std::string to_string(NormKind k);
std::string to_string(NormPlacement k);

}  // namespace m3
