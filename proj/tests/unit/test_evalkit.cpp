// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "m3/evalkit/evalkit.hpp"
#include "test_util.hpp"

using namespace m3;
namespace fs = std::filesystem;

namespace {

EmbeddingIndex random_index(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingIndex idx;
  idx.dim = dim;
  for (std::size_t i = 0; i < n; ++i) {
    idx.ids.push_back(1000 + 7 * i);
    std::vector<double> v(dim);
    double sq = 0;
    for (auto& x : v) {
      x = rng.normal();
      sq += x * x;
    }
    for (double x : v) idx.rows.push_back(static_cast<float>(x / std::sqrt(sq)));
  }
  return idx;
}

std::vector<float> random_queries(std::size_t n, std::size_t dim, std::uint64_t seed) {
  return random_index(n, dim, seed).rows;
}

// O(n·m) reference: score every document with a scalar loop, then order by
// (score desc, id asc).
std::vector<std::vector<std::uint64_t>> oracle_rankings(const EmbeddingIndex& idx, const std::vector<float>& q,
                                                        std::size_t k) {
  std::vector<std::vector<std::uint64_t>> out;
  for (std::size_t a = 0; a < q.size() / idx.dim; ++a) {
    std::vector<std::pair<double, std::uint64_t>> scored;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double s = 0;
      for (std::size_t c = 0; c < idx.dim; ++c) s += static_cast<double>(q[a * idx.dim + c]) * idx.rows[i * idx.dim + c];
      scored.emplace_back(-s, idx.ids[i]);
    }
    std::sort(scored.begin(), scored.end());
    std::vector<std::uint64_t> ids;
    for (std::size_t r = 0; r < k; ++r) ids.push_back(scored[r].second);
    out.push_back(ids);
  }
  return out;
}

struct ToyEval {
  ModelConfig cfg;
  Vocab vocab;
  EvalSet set;
};

ToyEval toy_eval() {
  ModelConfig cfg = test::toy_config(4, 32, 101, 16);
  SyntheticLanguageConfig lang;
  lang.n_topics = 4;
  lang.subtopics_per_topic = 2;
  lang.min_words = 4;
  lang.max_words = 12;
  RetrievalSetConfig rc;
  rc.language = lang;
  rc.n_docs = 60;
  rc.n_queries = 12;
  rc.n_train_pairs = 10;
  const auto rs = generate_retrieval_set(rc, 21);
  return {cfg, Vocab::build(rs.docs, 101), EvalSet::from_retrieval_set(rs)};
}

}  // namespace

TEST_CASE("exact_topk against a brute-force oracle") {
  const auto idx = random_index(50, 16, 1);
  const auto q = random_queries(10, 16, 2);
  for (std::size_t k : {1u, 5u, 50u}) {
    const auto res = exact_topk(idx, q, k);
    CHECK(res.warnings.empty());
    const auto want = oracle_rankings(idx, q, k);
    for (std::size_t a = 0; a < 10; ++a) {
      REQUIRE(res.rankings[a].size() == k);
      for (std::size_t r = 0; r < k; ++r) CHECK(res.rankings[a][r].id == want[a][r]);
      for (std::size_t r = 1; r < k; ++r) CHECK(res.rankings[a][r - 1].score >= res.rankings[a][r].score);
    }
  }
}

TEST_CASE("exact_topk closed cases") {
  auto idx = random_index(20, 8, 3);
  const std::vector<float> q(idx.rows.begin() + 5 * 8, idx.rows.begin() + 6 * 8);
  const auto res = exact_topk(idx, q, 3);
  CHECK(res.rankings[0][0].id == idx.ids[5]);
  CHECK(std::abs(res.rankings[0][0].score - 1.0) <= 1e-6);

  EmbeddingIndex ortho;
  ortho.dim = 2;
  ortho.ids = {1, 2};
  ortho.rows = {1, 0, 0, 1};
  const std::vector<float> e1{1, 0};
  const auto r2 = exact_topk(ortho, e1, 2);
  CHECK(r2.rankings[0][1].id == 2);
  CHECK(std::abs(r2.rankings[0][1].score) <= 1e-9);

  const auto clamped = exact_topk(ortho, e1, 5);
  CHECK(clamped.rankings[0].size() == 2);
  REQUIRE(clamped.warnings.size() == 1);
  CHECK(clamped.warnings[0].find("clamped") != std::string::npos);
  CHECK_THROWS_AS(exact_topk(ortho, e1, 0), ConfigError);
  const std::vector<float> bad{1, 0, 0};
  CHECK_THROWS_AS(exact_topk(ortho, bad, 1), DimensionError);
}

TEST_CASE("ties break by id and rankings ignore insertion order") {
  EmbeddingIndex idx;
  idx.dim = 2;
  idx.ids = {9, 3, 5, 1};
  idx.rows = {0.6f, 0.8f, 0.6f, 0.8f, 1.0f, 0.0f, 0.6f, 0.8f};
  const std::vector<float> q{0.6f, 0.8f};
  const auto res = exact_topk(idx, q, 4);
  std::vector<std::uint64_t> ids;
  for (const auto& h : res.rankings[0]) ids.push_back(h.id);
  CHECK(ids == std::vector<std::uint64_t>{1, 3, 9, 5});

  const auto big = random_index(40, 8, 4);
  const auto qs = random_queries(6, 8, 5);
  std::vector<std::size_t> perm(40);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(6);
  for (std::size_t i = 39; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  EmbeddingIndex shuffled;
  shuffled.dim = 8;
  for (std::size_t p : perm) {
    shuffled.ids.push_back(big.ids[p]);
    shuffled.rows.insert(shuffled.rows.end(), big.row(p).begin(), big.row(p).end());
  }
  const auto a = exact_topk(big, qs, 40);
  const auto b = exact_topk(shuffled, qs, 40);
  CHECK(a.rankings == b.rankings);
}

TEST_CASE("recall_at_k") {
  // 3 queries over 10 docs, hand-built rankings.
  std::vector<std::vector<Hit>> rankings(3);
  const std::vector<std::vector<std::uint64_t>> order{{4, 2, 7, 1, 0, 3, 5, 6, 8, 9},
                                                       {0, 1, 2, 3, 4, 5, 6, 7, 8, 9},
                                                       {9, 8, 7, 6, 5, 4, 3, 2, 1, 0}};
  for (std::size_t q = 0; q < 3; ++q) {
    for (auto id : order[q]) rankings[q].push_back({id, 0.0});
  }
  const std::vector<std::uint64_t> pos{7, 0, 2};
  // Manual count: ranks of the positives are 3, 1 and 8.
  CHECK(recall_at_k(rankings, pos, 1) == doctest::Approx(1.0 / 3));
  CHECK(recall_at_k(rankings, pos, 2) == doctest::Approx(1.0 / 3));
  CHECK(recall_at_k(rankings, pos, 3) == doctest::Approx(2.0 / 3));
  CHECK(recall_at_k(rankings, pos, 8) == 1.0);
  const std::vector<std::uint64_t> firsts{4, 0, 9};
  CHECK(recall_at_k(rankings, firsts, 1) == 1.0);
  const std::vector<std::uint64_t> absent{99, 98, 97};
  CHECK(recall_at_k(rankings, absent, 10) == 0.0);
  const std::vector<std::uint64_t> short_truth{7, 0};
  CHECK_THROWS_AS(recall_at_k(rankings, short_truth, 1), DataError);

  // Monotone in K for random rankings.
  const auto idx = random_index(30, 6, 7);
  const auto qs = random_queries(25, 6, 8);
  const auto res = exact_topk(idx, qs, 30);
  Rng rng(9);
  std::vector<std::uint64_t> truth;
  for (int q = 0; q < 25; ++q) truth.push_back(idx.ids[rng.below(30)]);
  double prev = 0;
  for (std::size_t k = 1; k <= 30; ++k) {
    const double r = recall_at_k(res.rankings, truth, k);
    CHECK(r >= prev);
    CHECK(r <= 1.0);
    prev = r;
  }
  CHECK(prev == 1.0);
}

TEST_CASE("encode_corpus") {
  const auto t = toy_eval();
  const auto model = Encoder<double>::init(t.cfg, 2);
  const auto idx = encode_corpus(model, t.vocab, t.set.docs, t.set.doc_ids, 2, 8, 16, 7);
  CHECK(idx.size() == t.set.docs.size());
  CHECK(idx.provenance == IndexProvenance{model.params().fingerprint(), 2, 8});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    double sq = 0;
    for (float x : idx.row(i)) sq += static_cast<double>(x) * x;
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-6);
  }

  SUBCASE("lite model equals the tapped layer") {
    for (int layer : {2, 4}) {
      const auto lite = model.prefix(layer);
      const auto a = encode_corpus(lite, t.vocab, t.set.docs, t.set.doc_ids, layer, 16, 16);
      const auto b = encode_corpus(model, t.vocab, t.set.docs, t.set.doc_ids, layer, 16, 16);
      CHECK(a.rows == b.rows);
    }
  }
  SUBCASE("batch size does not change embeddings") {
    const auto a = encode_texts(model, t.vocab, t.set.docs, 4, 32, 16, 1);
    const auto b = encode_texts(model, t.vocab, t.set.docs, 4, 32, 16, 64);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-7);
  }
  SUBCASE("truncate then normalize, against a scalar oracle") {
    const EncodedCorpus enc = EncodedCorpus::encode(t.vocab, t.set.docs, 16);
    const auto fwd = model.forward(enc.ids, enc.attn_mask, enc.size(), 16);
    const auto& h = fwd.final_state.value();
    for (int d : {8, 16, 32}) {
      const auto got = encode_texts(model, t.vocab, t.set.docs, 4, d, 16);
      for (std::size_t s = 0; s < enc.size(); ++s) {
        std::vector<double> pooled(32, 0.0);
        double n = 0;
        for (std::size_t i = 0; i < 16; ++i) {
          if (!enc.attn_mask[s * 16 + i]) continue;
          n += 1;
          for (std::size_t c = 0; c < 32; ++c) pooled[c] += h(s * 16 + i, c);
        }
        double sq = 0;
        for (int c = 0; c < d; ++c) sq += (pooled[c] / n) * (pooled[c] / n);
        for (int c = 0; c < d; ++c) {
          const double want = (pooled[c] / n) / std::sqrt(sq);
          CHECK(std::abs(got[s * d + c] - want) <= 1e-7);
        }
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(encode_corpus(model, t.vocab, {}, {}, 4, 8, 16), DataError);
    CHECK_THROWS_AS(encode_corpus(model, t.vocab, t.set.docs, t.set.doc_ids, 4, 33, 16), DimensionError);
    CHECK_THROWS_AS(encode_corpus(model, t.vocab, t.set.docs, t.set.doc_ids, 5, 8, 16), DimensionError);
    auto dup = t.set.doc_ids;
    dup[1] = dup[0];
    CHECK_THROWS_AS(encode_corpus(model, t.vocab, t.set.docs, dup, 4, 8, 16), DataError);
  }
}

TEST_CASE("evaluate and sweep") {
  const auto t = toy_eval();
  const auto model = Encoder<float>::init(t.cfg, 3);
  const std::vector<std::size_t> ks{1, 10, 100};
  const auto a = evaluate(model, t.vocab, t.set, 4, 16, ks, 16);
  const auto b = evaluate(model, t.vocab, t.set, 4, 16, ks, 16);
  CHECK(a.recall == b.recall);
  CHECK(a.recall.at(1) <= a.recall.at(10));
  CHECK(a.recall.at(100) == 1.0);  // 60 docs, K clamped
  CHECK(a.warnings.size() == 1);
  CHECK(a.index_bytes == 60 * 16 * 4);

  const auto one = tradeoff_sweep(model, t.vocab, t.set, SweepAxis::dim, {16}, ks, 16);
  REQUIRE(one.points.size() == 1);
  CHECK(one.points[0].recall == a.recall);
  CHECK(one.points[0].cost == 64.0);

  const auto dims = tradeoff_sweep(model, t.vocab, t.set, SweepAxis::dim, {8, 16, 32}, ks, 16);
  CHECK(dims.points.size() == 3);
  for (std::size_t i = 1; i < dims.points.size(); ++i) CHECK(dims.points[i].value > dims.points[i - 1].value);
  const auto layers = tradeoff_sweep(model, t.vocab, t.set, SweepAxis::layer, {1, 2, 4}, ks, 16);
  CHECK(layers.fixed == 32);
  CHECK(layers.points[2].cost == 4.0);
  CHECK(layers.points[2].recall == evaluate(model, t.vocab, t.set, 4, 32, ks, 16).recall);

  std::ostringstream csv;
  write_csv(csv, dims);
  std::istringstream lines(csv.str());
  std::string line;
  std::getline(lines, line);
  CHECK(line == "axis_value,K,recall,cost_proxy");
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 9);
  CHECK(to_json(dims).at("points").size() == 3);

  CHECK_THROWS_AS(tradeoff_sweep(model, t.vocab, t.set, SweepAxis::dim, {16, 8}, ks, 16), ConfigError);
  CHECK_THROWS_AS(tradeoff_sweep(model, t.vocab, t.set, SweepAxis::dim, {8, 64}, ks, 16), DimensionError);
  CHECK_THROWS_AS(parse_sweep_axis("width"), ConfigError);
}

TEST_CASE("index and eval-set files") {
  const fs::path dir = fs::temp_directory_path() / "m3_test_evalkit";
  fs::create_directories(dir);
  const auto idx = random_index(12, 4, 10);
  save_index(idx, dir / "a.m3ix");
  const auto back = load_index(dir / "a.m3ix");
  CHECK(back.ids == idx.ids);
  CHECK(back.rows == idx.rows);
  CHECK(back.dim == 4);
  {
    std::ifstream in(dir / "a.m3ix", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(dir / "short.m3ix", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  }
  CHECK_THROWS_AS(load_index(dir / "short.m3ix"), IntegrityError);

  const auto t = toy_eval();
  t.set.save(dir / "docs.tsv", dir / "queries.tsv");
  const auto loaded = EvalSet::load(dir / "docs.tsv", dir / "queries.tsv");
  CHECK(loaded.docs == t.set.docs);
  CHECK(loaded.positives == t.set.positives);
  std::ofstream(dir / "orphan.tsv") << "123456\tquery with unknown positive\n";
  CHECK_THROWS_AS(EvalSet::load(dir / "docs.tsv", dir / "orphan.tsv"), DataError);
}
