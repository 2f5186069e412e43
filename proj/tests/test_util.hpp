// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "m3/data/batch.hpp"
#include "m3/data/sampler.hpp"
#include "m3/data/synthetic.hpp"
#include "m3/data/text.hpp"
#include "m3/encoder/model.hpp"
#include "m3/numerics/rng.hpp"
#include "m3/numerics/tensor.hpp"

namespace m3::test {

/// offset + scale * N(0, 1), reproducible from `seed`.
template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, double offset = 0.0) {
  Tensor<T> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.values()) v = static_cast<T>(offset + scale * rng.normal());
  return t;
}

/// Small model config used across unit tests.
inline ModelConfig toy_config(int n_layers = 4, int hidden = 32, int vocab = 101, int max_seq = 16) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.hidden = hidden;
  c.n_heads = 4;
  c.vocab = vocab;
  c.max_seq = max_seq;
  c.granularity = {{2, n_layers}, {8, hidden / 2, hidden}};
  return c;
}

/// Random ids in [5, vocab); the tail of every other sequence is padding.
/// Every sequence gets at least one masked position.
inline MlmBatch toy_mlm_batch(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  MlmBatch b;
  b.batch = batch;
  b.seq = seq;
  b.tokens.assign(batch * seq, 0);
  b.attn_mask.assign(batch * seq, 0);
  b.labels.assign(batch * seq, kIgnoreLabel);
  b.mask_positions.assign(batch * seq, 0);
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t len = (s % 2 == 1) ? seq - seq / 4 : seq;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t p = s * seq + i;
      b.tokens[p] = static_cast<std::int32_t>(5 + rng.below(static_cast<std::uint64_t>(vocab - 5)));
      b.attn_mask[p] = 1;
    }
    bool any = false;
    for (std::size_t i = 0; i < len; ++i) {
      if (rng.bernoulli(0.2) || (!any && i + 1 == len)) {
        const std::size_t p = s * seq + i;
        b.labels[p] = b.tokens[p];
        b.tokens[p] = 4;
        b.mask_positions[p] = 1;
        any = true;
      }
    }
  }
  return b;
}

inline PairBatch toy_pair_batch(std::size_t batch, std::size_t seq, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  PairBatch b;
  b.batch = batch;
  b.seq = seq;
  auto fill = [&](std::vector<std::int32_t>& tok, std::vector<std::uint8_t>& mask) {
    tok.assign(batch * seq, 0);
    mask.assign(batch * seq, 0);
    for (std::size_t s = 0; s < batch; ++s) {
      const std::size_t len = 2 + rng.below(seq - 1);
      for (std::size_t i = 0; i < len; ++i) {
        tok[s * seq + i] = static_cast<std::int32_t>(5 + rng.below(static_cast<std::uint64_t>(vocab - 5)));
        mask[s * seq + i] = 1;
      }
    }
  };
  fill(b.query_tokens, b.query_mask);
  fill(b.doc_tokens, b.doc_mask);
  for (std::size_t i = 0; i < batch; ++i) b.pair_ids.push_back(i);
  return b;
}

template <typename T>
std::vector<Var<T>> all_params(const Encoder<T>& model) {
  std::vector<Var<T>> out;
  for (const auto& [name, v] : model.params()) out.push_back(v);
  return out;
}

inline bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

/// Synthetic corpus, vocabulary of exactly `vocab` ids and samplers over it.
struct ToyData {
  Vocab vocab;
  MlmSampler mlm;
  PairSampler pairs;
};

inline ToyData toy_data(int vocab, std::size_t seq, std::uint64_t seed = 11) {
  SyntheticLanguageConfig lang;
  lang.n_topics = 4;
  lang.subtopics_per_topic = 2;
  lang.min_words = 4;
  lang.max_words = 12;
  RetrievalSetConfig rc;
  rc.language = lang;
  rc.n_docs = 40;
  rc.n_queries = 8;
  rc.n_train_pairs = 64;
  const auto set = generate_retrieval_set(rc, seed);
  auto corpus = generate_corpus(lang, 200, seed + 1);
  Vocab v = Vocab::build(corpus, static_cast<std::size_t>(vocab));
  std::vector<std::string> queries, docs;
  for (const auto& p : set.train_pairs) {
    queries.push_back(p.query);
    docs.push_back(p.doc);
  }
  MlmSampler mlm(EncodedCorpus::encode(v, corpus, seq), 0.15, MaskPolicy::bert_80_10_10, vocab);
  PairSampler pairs(EncodedCorpus::encode(v, queries, seq), EncodedCorpus::encode(v, docs, seq));
  return ToyData{std::move(v), std::move(mlm), std::move(pairs)};
}

}  // namespace m3::test
