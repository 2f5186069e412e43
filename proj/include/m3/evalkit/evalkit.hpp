// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3/data/synthetic.hpp"
#include "m3/data/text.hpp"
#include "m3/encoder/model.hpp"

namespace m3 {

struct IndexProvenance {
  std::uint32_t fingerprint = 0;  // ParameterSet::fingerprint of the encoder
  int layer = 0;
  int dim = 0;
  bool operator==(const IndexProvenance&) const = default;
};

/// Immutable exact-search index of L2-normalized document embeddings.
struct EmbeddingIndex {
  std::vector<std::uint64_t> ids;
  std::size_t dim = 0;
  std::vector<float> rows;  // ids.size() × dim
  IndexProvenance provenance;

  std::size_t size() const noexcept { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }
  std::size_t storage_bytes() const noexcept { return rows.size() * sizeof(float); }
  /// Throws DataError for duplicate ids, a size mismatch or a row whose norm
  /// is not 1 within 1e-6.
  void validate() const;
};

/// Pooled, truncated and normalized embeddings of `texts` at layer `layer`
/// (n × dim, row-major). Only layers up to `layer` are evaluated.
template <typename T>
std::vector<float> encode_texts(const Encoder<T>& model, const Vocab& vocab, const std::vector<std::string>& texts,
                                int layer, int dim, std::size_t seq, std::size_t batch = 64);

/// Throws DataError for an empty corpus or mismatched / duplicate ids,
/// DimensionError for a layer or dim outside the model.
template <typename T>
EmbeddingIndex encode_corpus(const Encoder<T>& model, const Vocab& vocab, const std::vector<std::string>& texts,
                             const std::vector<std::uint64_t>& ids, int layer, int dim, std::size_t seq,
                             std::size_t batch = 64);

struct Hit {
  std::uint64_t id = 0;
  double score = 0.0;
  bool operator==(const Hit&) const = default;
};

struct SearchResult {
  /// Per query, best first; ties go to the smaller id.
  std::vector<std::vector<Hit>> rankings;
  std::vector<std::string> warnings;
};

/// Exhaustive inner-product search. `queries` holds n × index.dim values.
/// K above the index size is clamped with a warning.
SearchResult exact_topk(const EmbeddingIndex& index, std::span<const float> queries, std::size_t k);

/// Fraction of queries whose positive is among their first k hits.
/// Throws DataError when a query has no ground truth entry.
double recall_at_k(const std::vector<std::vector<Hit>>& rankings, std::span<const std::uint64_t> positives,
                   std::size_t k);

/// Documents with ids, queries with exactly one positive each.
struct EvalSet {
  std::vector<std::string> docs;
  std::vector<std::uint64_t> doc_ids;
  std::vector<std::string> queries;
  std::vector<std::uint64_t> positives;

  static EvalSet from_retrieval_set(const RetrievalSet& set);
  /// docs: "<id>\t<text>" per line; queries: "<positive id>\t<text>".
  static EvalSet load(const std::filesystem::path& docs, const std::filesystem::path& queries);
  void save(const std::filesystem::path& docs, const std::filesystem::path& queries) const;
  void validate() const;
};

struct EvalReport {
  std::map<std::size_t, double> recall;  // K -> recall@K
  std::size_t n_queries = 0;
  std::size_t n_docs = 0;
  int layer = 0;
  int dim = 0;
  double encode_ms = 0.0;
  double search_ms = 0.0;
  std::size_t index_bytes = 0;
  std::vector<std::string> warnings;
};

template <typename T>
EvalReport evaluate(const Encoder<T>& model, const Vocab& vocab, const EvalSet& set, int layer, int dim,
                    const std::vector<std::size_t>& ks, std::size_t seq, std::size_t batch = 64);

enum class SweepAxis { dim, layer };
SweepAxis parse_sweep_axis(std::string_view name);
std::string to_string(SweepAxis axis);

struct TradeoffPoint {
  int value = 0;
  std::map<std::size_t, double> recall;
  /// Bytes per document (4·d) on the dim axis, layers executed on the layer axis.
  double cost = 0.0;
};

struct TradeoffCurve {
  SweepAxis axis = SweepAxis::dim;
  /// The coordinate held fixed: layer on the dim axis, dim on the layer axis.
  int fixed = 0;
  std::vector<TradeoffPoint> points;
};

/// One evaluation per value. `values` must be strictly increasing and lie
/// within the model; `fixed` defaults to the full depth or width.
template <typename T>
TradeoffCurve tradeoff_sweep(const Encoder<T>& model, const Vocab& vocab, const EvalSet& set, SweepAxis axis,
                             const std::vector<int>& values, const std::vector<std::size_t>& ks, std::size_t seq,
                             std::optional<int> fixed = std::nullopt, std::size_t batch = 64);

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const TradeoffCurve& curve);
/// Header "axis_value,K,recall,cost_proxy"; an EvalReport is one point on the
/// dim axis.
void write_csv(std::ostream& out, const EvalReport& report);
void write_csv(std::ostream& out, const TradeoffCurve& curve);

inline constexpr std::uint32_t kIndexVersion = 1;
/// "M3IX", u32 version, u64 manifest length, JSON manifest, then n u64 ids
/// and n × d f32 rows, all little-endian.
void save_index(const EmbeddingIndex& index, const std::filesystem::path& path);
EmbeddingIndex load_index(const std::filesystem::path& path);

}  // namespace m3
