// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/data/sampler.hpp"

#include <algorithm>
#include <unordered_set>

#include "m3/numerics/errors.hpp"

namespace m3 {

EncodedCorpus EncodedCorpus::encode(const Vocab& vocab, const std::vector<std::string>& texts, std::size_t seq) {
  EncodedCorpus c;
  c.seq = seq;
  c.ids.reserve(texts.size() * seq);
  c.attn_mask.reserve(texts.size() * seq);
  for (const auto& t : texts) {
    auto e = vocab.encode(t, seq);
    c.ids.insert(c.ids.end(), e.ids.begin(), e.ids.end());
    c.attn_mask.insert(c.attn_mask.end(), e.attn_mask.begin(), e.attn_mask.end());
  }
  return c;
}

MlmSampler::MlmSampler(EncodedCorpus corpus, double mask_rate, MaskPolicy policy, std::int32_t vocab_size)
    : rate_(mask_rate), policy_(policy), vocab_size_(vocab_size) {
  if (corpus.size() == 0) throw DataError("mlm corpus is empty");
  // Rows made only of special tokens (e.g. entirely out-of-vocabulary) have nothing to predict.
  corpus_.seq = corpus.seq;
  for (std::size_t r = 0; r < corpus.size(); ++r) {
    const auto first = corpus.ids.begin() + static_cast<std::ptrdiff_t>(r * corpus.seq);
    const auto last = first + static_cast<std::ptrdiff_t>(corpus.seq);
    if (std::none_of(first, last, [](std::int32_t id) { return !Vocab::is_special(id); })) {
      ++dropped_;
      continue;
    }
    corpus_.ids.insert(corpus_.ids.end(), first, last);
    const auto am = corpus.attn_mask.begin() + static_cast<std::ptrdiff_t>(r * corpus.seq);
    corpus_.attn_mask.insert(corpus_.attn_mask.end(), am, am + static_cast<std::ptrdiff_t>(corpus.seq));
    if (!corpus.group.empty()) corpus_.group.push_back(corpus.group.at(r));
  }
  if (corpus_.size() == 0) throw DataError("mlm corpus has no sequence with a maskable token");
  if (!(rate_ >= 0.0 && rate_ <= 1.0)) throw ConfigError("mask rate must lie in [0, 1]");
}

MlmSampler::MlmSampler(EncodedCorpus corpus, double mask_rate, MaskPolicy policy, std::int32_t vocab_size,
                       LanguageMixture mixture)
    : MlmSampler(std::move(corpus), mask_rate, policy, vocab_size) {
  if (corpus_.group.size() != corpus_.size()) throw DataError("multilingual corpus rows lack language groups");
  rows_by_group_.resize(mixture.languages.size());
  for (std::size_t r = 0; r < corpus_.size(); ++r) {
    const auto g = corpus_.group[r];
    if (g >= rows_by_group_.size()) throw DataError("corpus row " + std::to_string(r) + " has an unknown language");
    rows_by_group_[g].push_back(r);
  }
  for (std::size_t g = 0; g < rows_by_group_.size(); ++g) {
    if (mixture.smoothed[g] > 0.0 && rows_by_group_[g].empty()) {
      throw DataError("language '" + mixture.languages[g] + "' has sampling mass but no documents");
    }
  }
  mixture_ = std::move(mixture);
}

MlmBatch MlmSampler::batch(std::uint64_t seed, std::uint64_t step, std::size_t batch_size) const {
  Rng pick = Rng::stream(seed, "data.mlm", step);
  Rng mask = Rng::stream(seed, "mask", step);
  MlmBatch b;
  b.batch = batch_size;
  b.seq = corpus_.seq;
  b.tokens.reserve(batch_size * b.seq);
  for (std::size_t i = 0; i < batch_size; ++i) {
    std::size_t row;
    if (mixture_) {
      const auto& rows = rows_by_group_[sample_language(*mixture_, pick)];
      row = rows[pick.below(rows.size())];
    } else {
      row = pick.below(corpus_.size());
    }
    const auto* ids = corpus_.ids.data() + row * b.seq;
    const auto* am = corpus_.attn_mask.data() + row * b.seq;
    auto m = mask_tokens_at_least_one({ids, b.seq}, rate_, policy_, vocab_size_, mask);
    b.tokens.insert(b.tokens.end(), m.tokens.begin(), m.tokens.end());
    b.labels.insert(b.labels.end(), m.labels.begin(), m.labels.end());
    b.mask_positions.insert(b.mask_positions.end(), m.selected.begin(), m.selected.end());
    b.attn_mask.insert(b.attn_mask.end(), am, am + b.seq);
  }
  return b;
}

PairSampler::PairSampler(EncodedCorpus queries, EncodedCorpus docs) : queries_(std::move(queries)), docs_(std::move(docs)) {
  if (queries_.size() == 0) throw DataError("pair corpus is empty");
  if (queries_.size() != docs_.size() || queries_.seq != docs_.seq) {
    throw DataError("query and document corpora are not aligned");
  }
}

PairBatch PairSampler::batch(std::uint64_t seed, std::uint64_t step, std::size_t batch_size) const {
  if (batch_size > queries_.size()) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds the " + std::to_string(queries_.size()) +
                      " available pairs");
  }
  Rng pick = Rng::stream(seed, "data.pairs", step);
  std::unordered_set<std::size_t> used;
  PairBatch b;
  b.batch = batch_size;
  b.seq = queries_.seq;
  const std::size_t s = b.seq;
  while (b.pair_ids.size() < batch_size) {
    const std::size_t row = pick.below(queries_.size());
    if (!used.insert(row).second) continue;
    b.pair_ids.push_back(row);
    b.query_tokens.insert(b.query_tokens.end(), queries_.ids.begin() + row * s, queries_.ids.begin() + (row + 1) * s);
    b.query_mask.insert(b.query_mask.end(), queries_.attn_mask.begin() + row * s,
                        queries_.attn_mask.begin() + (row + 1) * s);
    b.doc_tokens.insert(b.doc_tokens.end(), docs_.ids.begin() + row * s, docs_.ids.begin() + (row + 1) * s);
    b.doc_mask.insert(b.doc_mask.end(), docs_.attn_mask.begin() + row * s, docs_.attn_mask.begin() + (row + 1) * s);
  }
  return b;
}

}  // namespace m3
