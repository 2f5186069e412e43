// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace m3 {

/// Offset of the first byte that is not part of a well-formed UTF-8
/// sequence, or nullopt if `text` is valid.
std::optional<std::size_t> find_invalid_utf8(std::string_view text);

/// Lines of a UTF-8 text file without their terminators ("\r\n" accepted).
/// Throws DataError naming the line and byte offset of any invalid byte.
std::vector<std::string> read_utf8_lines(const std::filesystem::path& path);

/// Splits on ASCII whitespace.
std::vector<std::string_view> split_words(std::string_view text);

struct Encoded {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> attn_mask;
};

/// Word-level vocabulary. Ids 0..4 are the special tokens; the rest are
/// ranked by corpus frequency (ties broken lexicographically).
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::int32_t kNumSpecial = 5;

  /// Throws DataError for an empty corpus, ConfigError when max_size leaves
  /// no room beyond the special tokens.
  static Vocab build(std::span<const std::string> corpus, std::size_t max_size);
  /// Rebuilds a vocabulary from its token list (ids are positions). The first
  /// entries must be the special tokens.
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  /// kUnk for unknown words.
  std::int32_t id(std::string_view word) const;
  const std::string& token(std::int32_t id) const;
  static bool is_special(std::int32_t id) noexcept { return id >= 0 && id < kNumSpecial; }

  /// [CLS] words… [SEP], truncated to `seq_len` (the [SEP] is kept) and padded.
  Encoded encode(std::string_view text, std::size_t seq_len) const;
  /// Space-joined non-special tokens; [UNK] and [MASK] are kept verbatim.
  std::string detokenize(std::span<const std::int32_t> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

}  // namespace m3
