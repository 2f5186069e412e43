// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/evalkit/evalkit.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <unordered_set>

#include "m3/data/sampler.hpp"

namespace m3 {

static_assert(std::endian::native == std::endian::little, "index I/O assumes a little-endian host");

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

void check_cell(const ModelConfig& c, int layer, int dim) {
  if (layer < 1 || layer > c.n_layers) {
    throw DimensionError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(c.n_layers) + "]");
  }
  if (dim < 1 || dim > c.hidden) {
    throw DimensionError("dim " + std::to_string(dim) + " outside [1, " + std::to_string(c.hidden) + "]");
  }
}

}  // namespace

void EmbeddingIndex::validate() const {
  if (rows.size() != ids.size() * dim) throw DataError("index holds " + std::to_string(rows.size()) +
                                                       " values for " + std::to_string(ids.size()) + " ids");
  std::unordered_set<std::uint64_t> seen;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!seen.insert(ids[i]).second) throw DataError("duplicate doc id " + std::to_string(ids[i]));
    double sq = 0;
    for (float x : row(i)) sq += static_cast<double>(x) * x;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
      throw DataError("index row " + std::to_string(i) + " has norm " + std::to_string(std::sqrt(sq)));
    }
  }
}

template <typename T>
std::vector<float> encode_texts(const Encoder<T>& model, const Vocab& vocab, const std::vector<std::string>& texts,
                                int layer, int dim, std::size_t seq, std::size_t batch) {
  check_cell(model.config(), layer, dim);
  if (batch == 0) throw ConfigError("encode batch size must be positive");
  if (seq > static_cast<std::size_t>(model.config().max_seq)) {
    throw LengthError("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                      std::to_string(model.config().max_seq));
  }
  const EncodedCorpus corpus = EncodedCorpus::encode(vocab, texts, seq);
  std::vector<float> out;
  out.reserve(texts.size() * static_cast<std::size_t>(dim));
  ForwardOptions fo;
  fo.taps = {layer};
  fo.stop_at_last_tap = true;
  for (std::size_t start = 0; start < texts.size(); start += batch) {
    const std::size_t n = std::min(batch, texts.size() - start);
    const std::span<const std::int32_t> tok(corpus.ids.data() + start * seq, n * seq);
    const std::span<const std::uint8_t> mask(corpus.attn_mask.data() + start * seq, n * seq);
    const auto fwd = model.forward(tok, mask, n, seq, fo);
    const auto pooled = model.pool(fwd.tapped.at(layer), mask, seq, dim);
    for (T x : pooled.value().values()) out.push_back(static_cast<float>(x));
  }
  return out;
}

template <typename T>
EmbeddingIndex encode_corpus(const Encoder<T>& model, const Vocab& vocab, const std::vector<std::string>& texts,
                             const std::vector<std::uint64_t>& ids, int layer, int dim, std::size_t seq,
                             std::size_t batch) {
  if (texts.empty()) throw DataError("cannot index an empty corpus");
  if (ids.size() != texts.size()) {
    throw DataError(std::to_string(ids.size()) + " ids for " + std::to_string(texts.size()) + " documents");
  }
  EmbeddingIndex index;
  index.ids = ids;
  index.dim = static_cast<std::size_t>(dim);
  index.rows = encode_texts(model, vocab, texts, layer, dim, seq, batch);
  index.provenance = {model.params().fingerprint(), layer, dim};
  index.validate();
  return index;
}

SearchResult exact_topk(const EmbeddingIndex& index, std::span<const float> queries, std::size_t k) {
  if (k == 0) throw ConfigError("K must be at least 1");
  if (index.dim == 0 || queries.size() % index.dim != 0) {
    throw DimensionError("query buffer of " + std::to_string(queries.size()) + " values does not match index dim " +
                         std::to_string(index.dim));
  }
  SearchResult result;
  const std::size_t n = index.size();
  if (k > n) {
    result.warnings.push_back("K=" + std::to_string(k) + " exceeds the " + std::to_string(n) +
                              " indexed documents; clamped");
    k = n;
  }
  const std::size_t nq = queries.size() / index.dim;
  std::vector<double> scores(n);
  std::vector<std::size_t> order(n);
  result.rankings.resize(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    const float* qv = queries.data() + q * index.dim;
    for (std::size_t i = 0; i < n; ++i) {
      const float* dv = index.rows.data() + i * index.dim;
      double s = 0.0;
      for (std::size_t c = 0; c < index.dim; ++c) s += static_cast<double>(qv[c]) * static_cast<double>(dv[c]);
      scores[i] = s;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return index.ids[a] < index.ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
    auto& hits = result.rankings[q];
    hits.reserve(k);
    for (std::size_t r = 0; r < k; ++r) hits.push_back({index.ids[order[r]], scores[order[r]]});
  }
  return result;
}

double recall_at_k(const std::vector<std::vector<Hit>>& rankings, std::span<const std::uint64_t> positives,
                   std::size_t k) {
  if (k == 0) throw ConfigError("K must be at least 1");
  if (positives.size() != rankings.size()) {
    throw DataError("query " + std::to_string(std::min(positives.size(), rankings.size())) +
                    " has no ground truth (" + std::to_string(rankings.size()) + " rankings, " +
                    std::to_string(positives.size()) + " positives)");
  }
  if (rankings.empty()) throw DataError("recall over zero queries");
  std::size_t found = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& hits = rankings[q];
    const std::size_t limit = std::min(k, hits.size());
    for (std::size_t r = 0; r < limit; ++r) {
      if (hits[r].id == positives[q]) {
        ++found;
        break;
      }
    }
  }
  return static_cast<double>(found) / static_cast<double>(rankings.size());
}

EvalSet EvalSet::from_retrieval_set(const RetrievalSet& set) {
  return EvalSet{set.docs, set.doc_ids, set.queries, set.positives};
}

namespace {

std::vector<std::pair<std::uint64_t, std::string>> read_id_tsv(const std::filesystem::path& path) {
  std::vector<std::pair<std::uint64_t, std::string>> out;
  const auto lines = read_utf8_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (tab == std::string::npos) throw DataError(where + ": expected '<id>\\t<text>'");
    std::uint64_t id = 0;
    const std::string key = line.substr(0, tab);
    std::size_t used = 0;
    try {
      id = std::stoull(key, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != key.size() || key.empty()) throw DataError(where + ": id '" + key + "' is not an unsigned integer");
    out.emplace_back(id, line.substr(tab + 1));
  }
  return out;
}

}  // namespace

EvalSet EvalSet::load(const std::filesystem::path& docs, const std::filesystem::path& queries) {
  EvalSet set;
  for (auto& [id, text] : read_id_tsv(docs)) {
    set.doc_ids.push_back(id);
    set.docs.push_back(std::move(text));
  }
  for (auto& [id, text] : read_id_tsv(queries)) {
    set.positives.push_back(id);
    set.queries.push_back(std::move(text));
  }
  set.validate();
  return set;
}

void EvalSet::save(const std::filesystem::path& docs_path, const std::filesystem::path& queries_path) const {
  validate();
  std::ofstream d(docs_path, std::ios::binary);
  std::ofstream q(queries_path, std::ios::binary);
  if (!d || !q) throw DataError("cannot write evaluation set files");
  for (std::size_t i = 0; i < docs.size(); ++i) d << doc_ids[i] << '\t' << docs[i] << '\n';
  for (std::size_t i = 0; i < queries.size(); ++i) q << positives[i] << '\t' << queries[i] << '\n';
}

void EvalSet::validate() const {
  if (docs.empty()) throw DataError("evaluation set has no documents");
  if (queries.empty()) throw DataError("evaluation set has no queries");
  if (docs.size() != doc_ids.size() || queries.size() != positives.size()) {
    throw DataError("evaluation set ids do not match its texts");
  }
  std::unordered_set<std::uint64_t> ids(doc_ids.begin(), doc_ids.end());
  if (ids.size() != doc_ids.size()) throw DataError("evaluation set has duplicate doc ids");
  for (std::size_t q = 0; q < positives.size(); ++q) {
    if (!ids.count(positives[q])) {
      throw DataError("query " + std::to_string(q) + " names positive " + std::to_string(positives[q]) +
                      ", which is not in the document pool");
    }
  }
}

template <typename T>
EvalReport evaluate(const Encoder<T>& model, const Vocab& vocab, const EvalSet& set, int layer, int dim,
                    const std::vector<std::size_t>& ks, std::size_t seq, std::size_t batch) {
  if (ks.empty()) throw ConfigError("at least one K is required");
  set.validate();
  EvalReport report;
  report.layer = layer;
  report.dim = dim;
  report.n_queries = set.queries.size();
  report.n_docs = set.docs.size();
  auto t0 = std::chrono::steady_clock::now();
  const EmbeddingIndex index = encode_corpus(model, vocab, set.docs, set.doc_ids, layer, dim, seq, batch);
  const std::vector<float> q = encode_texts(model, vocab, set.queries, layer, dim, seq, batch);
  report.encode_ms = elapsed_ms(t0);
  report.index_bytes = index.storage_bytes();
  t0 = std::chrono::steady_clock::now();
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  SearchResult found = exact_topk(index, q, kmax);
  report.search_ms = elapsed_ms(t0);
  report.warnings = std::move(found.warnings);
  for (std::size_t k : ks) report.recall[k] = recall_at_k(found.rankings, set.positives, k);
  return report;
}

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "dim") return SweepAxis::dim;
  if (name == "layer") return SweepAxis::layer;
  throw ConfigError("unknown sweep axis '" + std::string(name) + "' (dim, layer)");
}

std::string to_string(SweepAxis axis) { return axis == SweepAxis::dim ? "dim" : "layer"; }

template <typename T>
TradeoffCurve tradeoff_sweep(const Encoder<T>& model, const Vocab& vocab, const EvalSet& set, SweepAxis axis,
                             const std::vector<int>& values, const std::vector<std::size_t>& ks, std::size_t seq,
                             std::optional<int> fixed, std::size_t batch) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] <= values[i - 1]) throw ConfigError("sweep values must be strictly increasing");
  }
  const ModelConfig& c = model.config();
  TradeoffCurve curve;
  curve.axis = axis;
  curve.fixed = fixed.value_or(axis == SweepAxis::dim ? c.n_layers : c.hidden);
  for (int v : values) {
    const int layer = axis == SweepAxis::dim ? curve.fixed : v;
    const int dim = axis == SweepAxis::dim ? v : curve.fixed;
    check_cell(c, layer, dim);
  }
  for (int v : values) {
    const int layer = axis == SweepAxis::dim ? curve.fixed : v;
    const int dim = axis == SweepAxis::dim ? v : curve.fixed;
    const EvalReport r = evaluate(model, vocab, set, layer, dim, ks, seq, batch);
    curve.points.push_back({v, r.recall, axis == SweepAxis::dim ? 4.0 * dim : static_cast<double>(layer)});
  }
  return curve;
}

namespace {

nlohmann::json recall_json(const std::map<std::size_t, double>& recall) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, r] : recall) j[std::to_string(k)] = r;
  return j;
}

void csv_rows(std::ostream& out, int value, const std::map<std::size_t, double>& recall, double cost) {
  char buf[64];
  for (const auto& [k, r] : recall) {
    std::snprintf(buf, sizeof(buf), "%.17g", r);
    out << value << ',' << k << ',' << buf << ',' << cost << '\n';
  }
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  return nlohmann::json{{"recall", recall_json(r.recall)}, {"n_queries", r.n_queries}, {"n_docs", r.n_docs},
                        {"layer", r.layer},               {"dim", r.dim},             {"encode_ms", r.encode_ms},
                        {"search_ms", r.search_ms},       {"index_bytes", r.index_bytes},
                        {"warnings", r.warnings}};
}

nlohmann::json to_json(const TradeoffCurve& curve) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : curve.points) {
    pts.push_back({{"value", p.value}, {"recall", recall_json(p.recall)}, {"cost_proxy", p.cost}});
  }
  return nlohmann::json{{"axis", to_string(curve.axis)}, {"fixed", curve.fixed}, {"points", pts}};
}

void write_csv(std::ostream& out, const EvalReport& r) {
  out << "axis_value,K,recall,cost_proxy\n";
  csv_rows(out, r.dim, r.recall, 4.0 * r.dim);
}

void write_csv(std::ostream& out, const TradeoffCurve& curve) {
  out << "axis_value,K,recall,cost_proxy\n";
  for (const auto& p : curve.points) csv_rows(out, p.value, p.recall, p.cost);
}

namespace {
constexpr char kIndexMagic[4] = {'M', '3', 'I', 'X'};
}

void save_index(const EmbeddingIndex& index, const std::filesystem::path& path) {
  index.validate();
  const nlohmann::json manifest{{"d", index.dim},
                                {"n_docs", index.size()},
                                {"provenance",
                                 {{"fingerprint", index.provenance.fingerprint},
                                  {"layer", index.provenance.layer},
                                  {"dim", index.provenance.dim}}}};
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write index " + path.string());
  const std::uint32_t version = kIndexVersion;
  const std::uint64_t len = text.size();
  out.write(kIndexMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(len));
  out.write(reinterpret_cast<const char*>(index.ids.data()),
            static_cast<std::streamsize>(index.ids.size() * sizeof(std::uint64_t)));
  out.write(reinterpret_cast<const char*>(index.rows.data()),
            static_cast<std::streamsize>(index.rows.size() * sizeof(float)));
  if (!out) throw DataError("failed writing index " + path.string());
}

EmbeddingIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open index " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  const std::string where = "index " + path.string();
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (size < 16 || !in.read(magic, 4) || std::memcmp(magic, kIndexMagic, 4) != 0) {
    throw IntegrityError(where + ": missing M3IX header");
  }
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kIndexVersion) throw VersionError(where + ": format version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (len > size - 16) throw IntegrityError(where + ": manifest length exceeds file size");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  EmbeddingIndex index;
  try {
    const auto mf = nlohmann::json::parse(text);
    index.dim = mf.at("d").get<std::size_t>();
    const auto n = mf.at("n_docs").get<std::size_t>();
    const auto& p = mf.at("provenance");
    index.provenance = {p.at("fingerprint").get<std::uint32_t>(), p.at("layer").get<int>(), p.at("dim").get<int>()};
    if (size - 16 - len != n * (sizeof(std::uint64_t) + index.dim * sizeof(float))) {
      throw IntegrityError(where + ": payload size does not match " + std::to_string(n) + " rows of dim " +
                           std::to_string(index.dim));
    }
    index.ids.resize(n);
    index.rows.resize(n * index.dim);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(where + ": malformed manifest: " + e.what());
  }
  in.read(reinterpret_cast<char*>(index.ids.data()), static_cast<std::streamsize>(index.ids.size() * 8));
  in.read(reinterpret_cast<char*>(index.rows.data()), static_cast<std::streamsize>(index.rows.size() * 4));
  if (!in) throw IntegrityError(where + ": short read");
  index.validate();
  return index;
}

template std::vector<float> encode_texts(const Encoder<float>&, const Vocab&, const std::vector<std::string>&, int,
                                         int, std::size_t, std::size_t);
template std::vector<float> encode_texts(const Encoder<double>&, const Vocab&, const std::vector<std::string>&, int,
                                         int, std::size_t, std::size_t);
template EmbeddingIndex encode_corpus(const Encoder<float>&, const Vocab&, const std::vector<std::string>&,
                                      const std::vector<std::uint64_t>&, int, int, std::size_t, std::size_t);
template EmbeddingIndex encode_corpus(const Encoder<double>&, const Vocab&, const std::vector<std::string>&,
                                      const std::vector<std::uint64_t>&, int, int, std::size_t, std::size_t);
template EvalReport evaluate(const Encoder<float>&, const Vocab&, const EvalSet&, int, int,
                             const std::vector<std::size_t>&, std::size_t, std::size_t);
template EvalReport evaluate(const Encoder<double>&, const Vocab&, const EvalSet&, int, int,
                             const std::vector<std::size_t>&, std::size_t, std::size_t);
template TradeoffCurve tradeoff_sweep(const Encoder<float>&, const Vocab&, const EvalSet&, SweepAxis,
                                      const std::vector<int>&, const std::vector<std::size_t>&, std::size_t,
                                      std::optional<int>, std::size_t);
template TradeoffCurve tradeoff_sweep(const Encoder<double>&, const Vocab&, const EvalSet&, SweepAxis,
                                      const std::vector<int>&, const std::vector<std::size_t>&, std::size_t,
                                      std::optional<int>, std::size_t);

}  // namespace m3
