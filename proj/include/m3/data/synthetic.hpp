// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m3/data/pairs.hpp"
#include "m3/numerics/rng.hpp"

namespace m3 {

/// A generated word-cooccurrence language. Words belong to a subtopic, to a
/// topic (shared by its subtopics) or to a general pool; every document is
/// about one subtopic and draws its words from the three pools with the
/// given probabilities, Zipf-distributed within each pool.
struct SyntheticLanguageConfig {
  int n_topics = 16;
  int subtopics_per_topic = 8;
  int words_per_subtopic = 12;
  int words_per_topic = 24;
  int n_general = 64;
  double p_subtopic = 0.5;
  double p_topic = 0.25;
  int min_words = 10;
  int max_words = 30;
  double zipf = 1.0;
  /// Prepended to every surface form; distinguishes languages.
  std::string prefix;

  void validate() const;
};

class SyntheticLanguage {
 public:
  explicit SyntheticLanguage(SyntheticLanguageConfig config);

  const SyntheticLanguageConfig& config() const noexcept { return config_; }
  int n_subtopics() const noexcept { return config_.n_topics * config_.subtopics_per_topic; }

  std::vector<std::string> sample_words(int subtopic, Rng& rng) const;
  std::string sample_document(int subtopic, Rng& rng) const;
  /// A word of the subtopic's own pool, Zipf-distributed.
  std::string sample_subtopic_word(int subtopic, Rng& rng) const;

 private:
  // pool: 0 subtopic, 1 topic, 2 general.
  std::size_t zipf_index(std::size_t pool, Rng& rng) const;

  SyntheticLanguageConfig config_;
  std::vector<double> zipf_cdf_subtopic_;
  std::vector<double> zipf_cdf_topic_;
  std::vector<double> zipf_cdf_general_;
};

/// Documents with uniformly random subtopics.
std::vector<std::string> generate_corpus(const SyntheticLanguageConfig& config, std::size_t n_docs,
                                         std::uint64_t seed);

struct LangDoc {
  std::string lang;
  std::string text;
};

/// `docs_per_language` documents per language, each language with its own
/// surface forms ("<lang>_" prefix) over the same underlying structure.
std::vector<LangDoc> generate_multilingual_corpus(
    const SyntheticLanguageConfig& config,
    const std::vector<std::pair<std::string, std::size_t>>& docs_per_language, std::uint64_t seed);

struct RetrievalSetConfig {
  SyntheticLanguageConfig language;
  std::size_t n_docs = 2000;
  std::size_t n_queries = 200;
  std::size_t n_train_pairs = 4000;
  int query_words = 5;
  /// Probability that a query word is copied from its document; otherwise
  /// it is a fresh word of the document's subtopic.
  double overlap = 0.7;
};

/// An evaluation pool with single-positive queries plus training pairs drawn
/// from a disjoint document set.
struct RetrievalSet {
  std::vector<std::string> docs;
  std::vector<std::uint64_t> doc_ids;
  std::vector<std::string> queries;
  std::vector<std::uint64_t> positives;  // doc id per query
  std::vector<PairRecord> train_pairs;
};

RetrievalSet generate_retrieval_set(const RetrievalSetConfig& config, std::uint64_t seed);

}  // namespace m3
