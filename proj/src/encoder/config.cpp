// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/encoder/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "m3/numerics/errors.hpp"

namespace m3 {

namespace {

void require_strictly_increasing(const std::vector<int>& v, const char* what) {
  if (v.empty()) throw ConfigError(std::string("granularity.") + what + " must not be empty");
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] <= v[i - 1]) {
      throw ConfigError(std::string("granularity.") + what +
                        " must be strictly increasing without duplicates");
    }
  }
}

template <typename E>
E parse_enum(const nlohmann::json& j, const char* field,
             std::initializer_list<std::pair<const char*, E>> names) {
  if (!j.is_string()) throw ConfigError(std::string("model.") + field + " must be a string");
  const auto s = j.get<std::string>();
  for (const auto& [name, value] : names) {
    if (s == name) return value;
  }
  throw ConfigError(std::string("model.") + field + ": unknown value '" + s + "'");
}

}  // namespace

std::string Cell::label() const {
  return "L" + std::to_string(layer) + "-D" + std::to_string(dim);
}

Cell Cell::parse(const std::string& label) {
  Cell c;
  if (std::sscanf(label.c_str(), "L%d-D%d", &c.layer, &c.dim) != 2) {
    throw ConfigError("malformed cell label '" + label + "' (expected L<layer>-D<dim>)");
  }
  return c;
}

std::vector<Cell> GranularitySet::cells() const {
  std::vector<Cell> out;
  out.reserve(grid_size());
  for (int l : layers) {
    for (int d : dims) out.push_back({l, d});
  }
  return out;
}

bool GranularitySet::has_layer(int layer) const {
  return std::binary_search(layers.begin(), layers.end(), layer);
}

bool GranularitySet::has_dim(int dim) const {
  return std::binary_search(dims.begin(), dims.end(), dim);
}

bool GranularitySet::contains(Cell cell) const { return has_layer(cell.layer) && has_dim(cell.dim); }

void GranularitySet::validate(int n_layers, int hidden) const {
  require_strictly_increasing(layers, "layers");
  require_strictly_increasing(dims, "dims");
  if (layers.front() < 1 || layers.back() > n_layers) {
    throw ConfigError("granularity.layers must lie in [1, " + std::to_string(n_layers) + "]");
  }
  if (dims.front() < 1 || dims.back() > hidden) {
    throw ConfigError("granularity.dims must lie in [1, " + std::to_string(hidden) + "]");
  }
}

int ModelConfig::ffn_hidden() const {
  return static_cast<int>(std::lround(ffn_mult * hidden));
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("model.n_layers must be positive");
  if (hidden < 1) throw ConfigError("model.hidden must be positive");
  if (n_heads < 1) throw ConfigError("model.n_heads must be positive");
  if (hidden % n_heads != 0) throw ConfigError("model.hidden must be divisible by model.n_heads");
  if (!(ffn_mult > 0) || ffn_hidden() < 1) throw ConfigError("model.ffn_mult must be positive");
  if (vocab < 1) throw ConfigError("model.vocab must be positive");
  if (max_seq < 1) throw ConfigError("model.max_seq must be positive");
  if (!(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) {
    throw ConfigError("model.hidden_dropout must lie in [0, 1)");
  }
  if (!(norm_eps > 0)) throw ConfigError("model.norm_eps must be positive");
  granularity.validate(n_layers, hidden);
}

std::string to_string(FfnKind k) { return k == FfnKind::swiglu ? "swiglu" : "gelu"; }
std::string to_string(NormKind k) { return k == NormKind::rmsnorm ? "rmsnorm" : "layernorm"; }
std::string to_string(NormPlacement k) { return k == NormPlacement::pre ? "pre" : "post"; }

void to_json(nlohmann::json& j, const Cell& c) { j = c.label(); }

void from_json(const nlohmann::json& j, Cell& c) {
  if (j.is_string()) {
    c = Cell::parse(j.get<std::string>());
  } else if (j.is_array() && j.size() == 2) {
    c = Cell{j[0].get<int>(), j[1].get<int>()};
  } else {
    throw ConfigError("cell must be \"L<l>-D<d>\" or [layer, dim]");
  }
}

void to_json(nlohmann::json& j, const GranularitySet& g) {
  j = nlohmann::json{{"layers", g.layers}, {"dims", g.dims}};
}

void from_json(const nlohmann::json& j, GranularitySet& g) {
  if (!j.is_object()) throw ConfigError("granularity must be an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "layers" && key != "dims") throw ConfigError("granularity: unknown key '" + key + "'");
  }
  if (!j.contains("layers") || !j.contains("dims")) {
    throw ConfigError("granularity requires both 'layers' and 'dims'");
  }
  g.layers = j.at("layers").get<std::vector<int>>();
  g.dims = j.at("dims").get<std::vector<int>>();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"hidden", c.hidden},
                     {"n_heads", c.n_heads},
                     {"ffn_mult", c.ffn_mult},
                     {"vocab", c.vocab},
                     {"max_seq", c.max_seq},
                     {"activation", to_string(c.activation)},
                     {"norm", to_string(c.norm)},
                     {"norm_placement", to_string(c.norm_placement)},
                     {"use_bias", c.use_bias},
                     {"hidden_dropout", c.hidden_dropout},
                     {"norm_eps", c.norm_eps},
                     {"granularity", c.granularity}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model must be an object");
  static const std::set<std::string> known{
      "n_layers", "hidden", "n_heads",  "ffn_mult",       "vocab",    "max_seq",    "activation",
      "norm",     "norm_placement", "use_bias", "hidden_dropout", "norm_eps", "granularity"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("model: unknown key '" + key + "'");
  }
  try {
    if (j.contains("n_layers")) c.n_layers = j["n_layers"].get<int>();
    if (j.contains("hidden")) c.hidden = j["hidden"].get<int>();
    if (j.contains("n_heads")) c.n_heads = j["n_heads"].get<int>();
    if (j.contains("ffn_mult")) c.ffn_mult = j["ffn_mult"].get<double>();
    if (j.contains("vocab")) c.vocab = j["vocab"].get<int>();
    if (j.contains("max_seq")) c.max_seq = j["max_seq"].get<int>();
    if (j.contains("use_bias")) c.use_bias = j["use_bias"].get<bool>();
    if (j.contains("hidden_dropout")) c.hidden_dropout = j["hidden_dropout"].get<double>();
    if (j.contains("norm_eps")) c.norm_eps = j["norm_eps"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (j.contains("activation")) {
    c.activation = parse_enum<FfnKind>(j["activation"], "activation",
                                       {{"swiglu", FfnKind::swiglu}, {"gelu", FfnKind::gelu}});
  }
  if (j.contains("norm")) {
    c.norm = parse_enum<NormKind>(j["norm"], "norm",
                                  {{"rmsnorm", NormKind::rmsnorm}, {"layernorm", NormKind::layernorm}});
  }
  if (j.contains("norm_placement")) {
    c.norm_placement = parse_enum<NormPlacement>(
        j["norm_placement"], "norm_placement", {{"pre", NormPlacement::pre}, {"post", NormPlacement::post}});
  }
  if (j.contains("granularity")) {
    try {
      c.granularity = j["granularity"].get<GranularitySet>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model.granularity: ") + e.what());
    }
  }
}

}  // namespace m3
