// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/encoder/model.hpp"

#include <zlib.h>

#include <algorithm>

#include "m3/numerics/ops.hpp"

namespace m3 {

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const auto M = static_cast<std::size_t>(c.hidden);
  const auto V = static_cast<std::size_t>(c.vocab);
  const auto F = static_cast<std::size_t>(c.ffn_hidden());
  const bool layernorm = c.norm == NormKind::layernorm;
  std::vector<std::pair<std::string, Shape>> out;
  auto add_norm = [&](const std::string& name) {
    out.emplace_back(name + ".weight", Shape{M});
    if (layernorm) out.emplace_back(name + ".bias", Shape{M});
  };
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t outw) {
    out.emplace_back(name + ".weight", Shape{in, outw});
    if (c.use_bias) out.emplace_back(name + ".bias", Shape{outw});
  };

  out.emplace_back("embed.tokens", Shape{V, M});
  out.emplace_back("embed.positions", Shape{static_cast<std::size_t>(c.max_seq), M});
  if (c.norm_placement == NormPlacement::post) add_norm("embed.norm");
  for (int l = 1; l <= c.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    add_norm(p + "attn_norm");
    add_linear(p + "attn.q", M, M);
    add_linear(p + "attn.k", M, M);
    add_linear(p + "attn.v", M, M);
    add_linear(p + "attn.o", M, M);
    add_norm(p + "ffn_norm");
    if (c.activation == FfnKind::swiglu) add_linear(p + "ffn.gate", M, F);
    add_linear(p + "ffn.up", M, F);
    add_linear(p + "ffn.down", F, M);
  }
  if (c.norm_placement == NormPlacement::pre) add_norm("final_norm");
  out.emplace_back("mlm_head.weight", Shape{M, V});
  out.emplace_back("mlm_head.bias", Shape{V});
  return out;
}

// ---------------------------------------------------------------- ParameterSet

template <typename T>
void ParameterSet<T>::add(std::string name, Tensor<T> value) {
  add_shared(std::move(name), Var<T>::parameter(std::move(value)));
}

template <typename T>
void ParameterSet<T>::add_shared(std::string name, Var<T> var) {
  if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(var));
}

template <typename T>
bool ParameterSet<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) > 0;
}

template <typename T>
const Var<T>& ParameterSet<T>::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
  return entries_[it->second].second;
}

template <typename T>
Var<T>& ParameterSet<T>::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
  return entries_[it->second].second;
}

template <typename T>
std::size_t ParameterSet<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : entries_) n += v.value().numel();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& [_, v] : entries_) v.zero_grad();
}

template <typename T>
ParameterSet<T> ParameterSet<T>::clone() const {
  ParameterSet out;
  for (const auto& [name, v] : entries_) out.add(name, v.value());
  return out;
}

template <typename T>
std::uint32_t ParameterSet<T>::fingerprint() const {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, v] : entries_) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    for (std::size_t e : v.shape()) {
      const auto e64 = static_cast<std::uint64_t>(e);
      crc = crc32(crc, reinterpret_cast<const Bytef*>(&e64), sizeof(e64));
    }
    crc = crc32(crc, reinterpret_cast<const Bytef*>(v.value().data()),
                static_cast<uInt>(v.value().numel() * sizeof(T)));
  }
  return static_cast<std::uint32_t>(crc);
}

// --------------------------------------------------------------------- Encoder

template <typename T>
Encoder<T>::Encoder(ModelConfig config, ParameterSet<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  for (const auto& [name, shape] : parameter_layout(config_)) {
    if (!params_.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    if (params_.at(name).shape() != shape) {
      throw DimensionError("parameter '" + name + "' has shape " +
                           shape_str(params_.at(name).shape()) + ", expected " + shape_str(shape));
    }
  }
}

template <typename T>
Encoder<T> Encoder<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = Rng::stream(seed, "init");
  ParameterSet<T> params;
  for (auto& [name, shape] : parameter_layout(config)) {
    Tensor<T> t(shape);
    if (ends_with(name, ".bias")) {
      // zeros
    } else if (ends_with(name, "norm.weight")) {
      t.fill(T(1));
    } else {
      for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(0.02));
    }
    params.add(name, std::move(t));
  }
  return Encoder(config, std::move(params));
}

template <typename T>
Var<T> Encoder<T>::norm(const Var<T>& x, const std::string& prefix) const {
  const auto& w = params_.at(prefix + ".weight");
  if (config_.norm == NormKind::rmsnorm) return ops::rms_norm(x, w, config_.norm_eps);
  return ops::layer_norm(x, w, params_.at(prefix + ".bias"), config_.norm_eps);
}

template <typename T>
Var<T> Encoder<T>::linear(const Var<T>& x, const std::string& prefix) const {
  Var<T> y = ops::matmul(x, params_.at(prefix + ".weight"));
  if (config_.use_bias) y = ops::add_row(y, params_.at(prefix + ".bias"));
  return y;
}

template <typename T>
Var<T> Encoder<T>::attention_block(const Var<T>& x, int layer, std::span<const std::uint8_t> mask,
                                   std::size_t seq) const {
  const std::string p = layer_prefix(layer) + "attn.";
  Var<T> q = linear(x, p + "q");
  Var<T> k = linear(x, p + "k");
  Var<T> v = linear(x, p + "v");
  Var<T> a = ops::attention(q, k, v, mask, static_cast<std::size_t>(config_.n_heads), seq);
  return linear(a, p + "o");
}

template <typename T>
Var<T> Encoder<T>::ffn_block(const Var<T>& x, int layer) const {
  const std::string p = layer_prefix(layer) + "ffn.";
  Var<T> hidden;
  if (config_.activation == FfnKind::swiglu) {
    hidden = ops::mul(ops::activation(linear(x, p + "gate"), ops::Activation::silu), linear(x, p + "up"));
  } else {
    hidden = ops::activation(linear(x, p + "up"), ops::Activation::gelu);
  }
  return linear(hidden, p + "down");
}

template <typename T>
ForwardOutput<T> Encoder<T>::forward(std::span<const std::int32_t> tokens,
                                     std::span<const std::uint8_t> attn_mask, std::size_t batch,
                                     std::size_t seq, const ForwardOptions& options) const {
  if (seq == 0 || seq > static_cast<std::size_t>(config_.max_seq)) {
    throw LengthError("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                      std::to_string(config_.max_seq));
  }
  if (tokens.size() != batch * seq || attn_mask.size() != batch * seq) {
    throw DimensionError("forward: expected " + std::to_string(batch * seq) +
                         " tokens and mask entries, got " + std::to_string(tokens.size()) + " / " +
                         std::to_string(attn_mask.size()));
  }
  std::vector<int> taps = options.taps.empty() ? config_.granularity.layers : options.taps;
  std::sort(taps.begin(), taps.end());
  taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
  if (taps.empty() || taps.front() < 1 || taps.back() > config_.n_layers) {
    throw ConfigError("forward: tap layers must lie in [1, " + std::to_string(config_.n_layers) + "]");
  }
  const bool dropout_on = options.train && config_.hidden_dropout > 0.0;
  if (dropout_on && options.rng == nullptr) throw ConfigError("forward: dropout requires an rng");

  std::vector<std::size_t> token_rows(tokens.size());
  std::vector<std::size_t> position_rows(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config_.vocab) {
      throw VocabularyError("token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                            std::to_string(config_.vocab));
    }
    token_rows[i] = static_cast<std::size_t>(tokens[i]);
    position_rows[i] = i % seq;
  }

  Var<T> x = ops::add(ops::gather_rows(params_.at("embed.tokens"), token_rows),
                      ops::gather_rows(params_.at("embed.positions"), position_rows));
  const bool pre = config_.norm_placement == NormPlacement::pre;
  if (!pre) x = norm(x, "embed.norm");

  ForwardOutput<T> out;
  out.batch = batch;
  out.seq = seq;
  const int last = options.stop_at_last_tap ? taps.back() : config_.n_layers;
  for (int l = 1; l <= last; ++l) {
    const std::string p = layer_prefix(l);
    if (pre) {
      x = ops::add(x, attention_block(norm(x, p + "attn_norm"), l, attn_mask, seq));
      x = ops::add(x, ffn_block(norm(x, p + "ffn_norm"), l));
    } else {
      x = norm(ops::add(x, attention_block(x, l, attn_mask, seq)), p + "attn_norm");
      x = norm(ops::add(x, ffn_block(x, l)), p + "ffn_norm");
    }
    const bool tapped = std::binary_search(taps.begin(), taps.end(), l);
    if (tapped || l == last) {
      Var<T> state = pre ? norm(x, "final_norm") : x;
      if (tapped) out.tapped.emplace(l, state);
      if (l == last) out.final_state = state;
    }
    if (dropout_on && l < config_.n_layers) x = ops::dropout(x, config_.hidden_dropout, *options.rng);
  }
  return out;
}

template <typename T>
Var<T> Encoder<T>::mlm_logits(const Var<T>& h, int dim) const {
  if (dim < 1 || dim > config_.hidden) {
    throw DimensionError("mlm head dimension " + std::to_string(dim) + " outside [1, " +
                         std::to_string(config_.hidden) + "]");
  }
  if (h.shape().size() != 2 || h.shape()[1] < static_cast<std::size_t>(dim)) {
    throw DimensionError("mlm head input " + shape_str(h.shape()) + " narrower than " +
                         std::to_string(dim));
  }
  const auto d = static_cast<std::size_t>(dim);
  Var<T> hd = ops::slice_cols(h, 0, d);
  Var<T> w = ops::slice_rows(params_.at("mlm_head.weight"), 0, d);
  return ops::add_row(ops::matmul(hd, w), params_.at("mlm_head.bias"));
}

template <typename T>
Var<T> Encoder<T>::mlm_head(const Var<T>& h, int dim) const {
  return ops::softmax_rows(mlm_logits(h, dim));
}

template <typename T>
Var<T> Encoder<T>::pool(const Var<T>& state, std::span<const std::uint8_t> attn_mask,
                        std::size_t seq, int dim) const {
  if (dim < 1 || dim > config_.hidden) {
    throw DimensionError("pool dimension " + std::to_string(dim) + " outside [1, " +
                         std::to_string(config_.hidden) + "]");
  }
  Var<T> pooled = ops::masked_mean_rows(state, attn_mask, seq);
  return ops::l2_normalize_rows(ops::slice_cols(pooled, 0, static_cast<std::size_t>(dim)));
}

template <typename T>
Encoder<T> Encoder<T>::prefix(int layers) const {
  if (layers < 1 || layers > config_.n_layers) {
    throw ConfigError("prefix: layer count " + std::to_string(layers) + " outside [1, " +
                      std::to_string(config_.n_layers) + "]");
  }
  ModelConfig c = config_;
  c.n_layers = layers;
  std::vector<int> kept;
  for (int l : config_.granularity.layers) {
    if (l <= layers) kept.push_back(l);
  }
  if (kept.empty() || kept.back() != layers) kept.push_back(layers);
  c.granularity.layers = kept;
  ParameterSet<T> shared;
  for (const auto& [name, shape] : parameter_layout(c)) shared.add_shared(name, params_.at(name));
  return Encoder(c, std::move(shared));
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace m3
