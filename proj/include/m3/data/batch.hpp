// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace m3 {

/// Label value at positions that are not scored.
inline constexpr std::int32_t kIgnoreLabel = -100;

/// `batch` rows of `seq` positions each, row-major.
struct MlmBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> attn_mask;
  std::vector<std::int32_t> labels;  // original id where mask_positions is set, else kIgnoreLabel
  std::vector<std::uint8_t> mask_positions;

  std::size_t masked_count() const;
  /// Throws DimensionError when the arrays disagree with batch·seq, or
  /// DataError when labels and mask_positions disagree.
  void validate() const;
};

/// The i-th document is the positive for the i-th query.
struct PairBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> query_tokens;
  std::vector<std::uint8_t> query_mask;
  std::vector<std::int32_t> doc_tokens;
  std::vector<std::uint8_t> doc_mask;
  std::vector<std::uint64_t> pair_ids;

  void validate() const;
};

}  // namespace m3
