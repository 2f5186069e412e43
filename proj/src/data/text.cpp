// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/data/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "m3/numerics/errors.hpp"

namespace m3 {

namespace {

const char* const kSpecialTokens[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace

std::optional<std::size_t> find_invalid_utf8(std::string_view text) {
  const auto* s = reinterpret_cast<const unsigned char*>(text.data());
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char c = s[i];
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t len = 0;
    unsigned char lo = 0x80, hi = 0xBF;
    if (c >= 0xC2 && c <= 0xDF) {
      len = 2;
    } else if (c >= 0xE0 && c <= 0xEF) {
      len = 3;
      if (c == 0xE0) lo = 0xA0;  // overlong
      if (c == 0xED) hi = 0x9F;  // surrogates
    } else if (c >= 0xF0 && c <= 0xF4) {
      len = 4;
      if (c == 0xF0) lo = 0x90;
      if (c == 0xF4) hi = 0x8F;
    } else {
      return i;
    }
    if (i + len > n) return i;
    if (s[i + 1] < lo || s[i + 1] > hi) return i;
    for (std::size_t k = 2; k < len; ++k) {
      if (s[i + k] < 0x80 || s[i + k] > 0xBF) return i;
    }
    i += len;
  }
  return std::nullopt;
}

std::vector<std::string> read_utf8_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (auto bad = find_invalid_utf8(line)) {
      throw DataError(path.string() + ":" + std::to_string(lines.size() + 1) + ": invalid UTF-8 at byte " +
                      std::to_string(*bad));
    }
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

Vocab Vocab::build(std::span<const std::string> corpus, std::size_t max_size) {
  if (max_size <= static_cast<std::size_t>(kNumSpecial)) {
    throw ConfigError("vocab max_size must exceed the " + std::to_string(kNumSpecial) + " special tokens");
  }
  std::map<std::string, std::size_t, std::less<>> counts;
  for (const auto& doc : corpus) {
    for (auto w : split_words(doc)) ++counts[std::string(w)];
  }
  if (counts.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // std::map iteration is already lexicographic, so a stable sort keeps that order among ties.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(std::begin(kSpecialTokens), std::end(kSpecialTokens));
  for (auto& [word, count] : ranked) {
    if (tokens.size() >= max_size) break;
    if (std::find(std::begin(kSpecialTokens), std::end(kSpecialTokens), word) != std::end(kSpecialTokens)) continue;
    tokens.push_back(std::move(word));
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<std::size_t>(kNumSpecial)) throw DataError("vocabulary is missing special tokens");
  for (int i = 0; i < kNumSpecial; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != kSpecialTokens[i]) {
      throw DataError("vocabulary id " + std::to_string(i) + " must be " + kSpecialTokens[i]);
    }
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw DataError("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

std::int32_t Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Encoded Vocab::encode(std::string_view text, std::size_t seq_len) const {
  if (seq_len < 2) throw ConfigError("sequence length must be at least 2 to hold [CLS] and [SEP]");
  Encoded e;
  e.ids.reserve(seq_len);
  e.ids.push_back(kCls);
  for (auto w : split_words(text)) {
    if (e.ids.size() + 1 >= seq_len) break;
    e.ids.push_back(id(w));
  }
  e.ids.push_back(kSep);
  e.attn_mask.assign(e.ids.size(), 1);
  e.ids.resize(seq_len, kPad);
  e.attn_mask.resize(seq_len, 0);
  return e;
}

std::string Vocab::detokenize(std::span<const std::int32_t> ids) const {
  std::string out;
  for (auto id : ids) {
    if (id == kPad || id == kCls || id == kSep) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

}  // namespace m3
