// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/data/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "m3/numerics/errors.hpp"

namespace m3 {

namespace {

std::vector<double> zipf_cdf(int n, double exponent) {
  std::vector<double> cdf(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    total += 1.0 / std::pow(static_cast<double>(i + 1), exponent);
    cdf[static_cast<std::size_t>(i)] = total;
  }
  for (auto& c : cdf) c /= total;
  return cdf;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

void SyntheticLanguageConfig::validate() const {
  if (n_topics < 1 || subtopics_per_topic < 1 || words_per_subtopic < 1 || words_per_topic < 1 || n_general < 1) {
    throw ConfigError("synthetic language: all pool sizes must be positive");
  }
  if (p_subtopic < 0 || p_topic < 0 || p_subtopic + p_topic > 1.0) {
    throw ConfigError("synthetic language: p_subtopic + p_topic must lie in [0, 1]");
  }
  if (min_words < 1 || max_words < min_words) throw ConfigError("synthetic language: bad document length range");
}

SyntheticLanguage::SyntheticLanguage(SyntheticLanguageConfig config) : config_(std::move(config)) {
  config_.validate();
  zipf_cdf_subtopic_ = zipf_cdf(config_.words_per_subtopic, config_.zipf);
  zipf_cdf_topic_ = zipf_cdf(config_.words_per_topic, config_.zipf);
  zipf_cdf_general_ = zipf_cdf(config_.n_general, config_.zipf);
}

std::size_t SyntheticLanguage::zipf_index(std::size_t pool, Rng& rng) const {
  const auto& cdf = pool == 0 ? zipf_cdf_subtopic_ : pool == 1 ? zipf_cdf_topic_ : zipf_cdf_general_;
  const double u = rng.uniform();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

std::string SyntheticLanguage::sample_subtopic_word(int subtopic, Rng& rng) const {
  return config_.prefix + "s" + std::to_string(subtopic) + "w" + std::to_string(zipf_index(0, rng));
}

std::vector<std::string> SyntheticLanguage::sample_words(int subtopic, Rng& rng) const {
  if (subtopic < 0 || subtopic >= n_subtopics()) throw ConfigError("synthetic language: subtopic out of range");
  const int topic = subtopic / config_.subtopics_per_topic;
  const auto span = static_cast<std::uint64_t>(config_.max_words - config_.min_words + 1);
  const auto length = static_cast<std::size_t>(config_.min_words) + rng.below(span);
  std::vector<std::string> words;
  words.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    const double u = rng.uniform();
    if (u < config_.p_subtopic) {
      words.push_back(sample_subtopic_word(subtopic, rng));
    } else if (u < config_.p_subtopic + config_.p_topic) {
      words.push_back(config_.prefix + "t" + std::to_string(topic) + "w" + std::to_string(zipf_index(1, rng)));
    } else {
      words.push_back(config_.prefix + "g" + std::to_string(zipf_index(2, rng)));
    }
  }
  return words;
}

std::string SyntheticLanguage::sample_document(int subtopic, Rng& rng) const {
  return join(sample_words(subtopic, rng));
}

std::vector<std::string> generate_corpus(const SyntheticLanguageConfig& config, std::size_t n_docs,
                                         std::uint64_t seed) {
  const SyntheticLanguage lang(config);
  Rng rng = Rng::stream(seed, "synthetic.corpus");
  std::vector<std::string> docs;
  docs.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    const int sub = static_cast<int>(rng.below(static_cast<std::uint64_t>(lang.n_subtopics())));
    docs.push_back(lang.sample_document(sub, rng));
  }
  return docs;
}

std::vector<LangDoc> generate_multilingual_corpus(
    const SyntheticLanguageConfig& config,
    const std::vector<std::pair<std::string, std::size_t>>& docs_per_language, std::uint64_t seed) {
  std::vector<LangDoc> out;
  for (std::size_t li = 0; li < docs_per_language.size(); ++li) {
    const auto& [name, count] = docs_per_language[li];
    SyntheticLanguageConfig c = config;
    c.prefix = config.prefix + name + "_";
    for (auto& text : generate_corpus(c, count, Rng::derive_seed(seed, "synthetic.language", li))) {
      out.push_back({name, std::move(text)});
    }
  }
  return out;
}

RetrievalSet generate_retrieval_set(const RetrievalSetConfig& config, std::uint64_t seed) {
  if (config.n_docs == 0) throw ConfigError("retrieval set: n_docs must be positive");
  if (config.n_queries > config.n_docs) throw ConfigError("retrieval set: more queries than documents");
  if (config.query_words < 1) throw ConfigError("retrieval set: query_words must be positive");
  if (!(config.overlap >= 0.0 && config.overlap <= 1.0)) throw ConfigError("retrieval set: overlap must lie in [0, 1]");
  const SyntheticLanguage lang(config.language);
  const auto n_sub = static_cast<std::uint64_t>(lang.n_subtopics());

  struct Doc {
    int subtopic;
    std::vector<std::string> words;
  };
  auto make_docs = [&](std::size_t n, Rng& rng) {
    std::vector<Doc> docs;
    docs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int sub = static_cast<int>(rng.below(n_sub));
      docs.push_back({sub, lang.sample_words(sub, rng)});
    }
    return docs;
  };
  auto make_query = [&](const Doc& doc, Rng& rng) {
    std::vector<std::string> words;
    for (int i = 0; i < config.query_words; ++i) {
      if (rng.bernoulli(config.overlap)) {
        words.push_back(doc.words[rng.below(doc.words.size())]);
      } else {
        words.push_back(lang.sample_subtopic_word(doc.subtopic, rng));
      }
    }
    return join(words);
  };

  RetrievalSet set;
  Rng pool_rng = Rng::stream(seed, "retrieval.pool");
  const auto pool = make_docs(config.n_docs, pool_rng);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    set.docs.push_back(join(pool[i].words));
    set.doc_ids.push_back(i);
  }
  // Queries target distinct documents chosen by a partial shuffle.
  Rng query_rng = Rng::stream(seed, "retrieval.queries");
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < config.n_queries; ++i) {
    std::swap(order[i], order[i + query_rng.below(order.size() - i)]);
    set.queries.push_back(make_query(pool[order[i]], query_rng));
    set.positives.push_back(set.doc_ids[order[i]]);
  }
  Rng train_rng = Rng::stream(seed, "retrieval.train");
  const auto train_docs = make_docs(config.n_train_pairs, train_rng);
  for (const auto& doc : train_docs) {
    set.train_pairs.push_back({make_query(doc, train_rng), join(doc.words), std::nullopt, 0});
  }
  return set;
}

}  // namespace m3
