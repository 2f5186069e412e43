// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "m3/data/batch.hpp"
#include "m3/numerics/rng.hpp"

namespace m3 {

enum class MaskPolicy {
  mask_only,      // selected positions become [MASK]
  bert_80_10_10,  // 80% [MASK], 10% random non-special token, 10% unchanged
};

MaskPolicy parse_mask_policy(std::string_view name);
std::string_view to_string(MaskPolicy policy);

struct MaskedSequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> labels;  // original id where selected, else kIgnoreLabel
  std::vector<std::uint8_t> selected;
};

/// Selects every non-special position independently with probability `rate`
/// and replaces it per `policy`. Random replacements are drawn uniformly from
/// the non-special ids below `vocab_size`. Throws ConfigError unless rate is
/// in [0, 1].
MaskedSequence mask_tokens(std::span<const std::int32_t> seq, double rate, MaskPolicy policy,
                           std::int32_t vocab_size, Rng& rng);

/// Like `mask_tokens`, but when nothing was selected one eligible position is
/// chosen uniformly and masked, so every sequence contributes to the loss.
/// Throws DataError if the sequence has no eligible position.
MaskedSequence mask_tokens_at_least_one(std::span<const std::int32_t> seq, double rate, MaskPolicy policy,
                                        std::int32_t vocab_size, Rng& rng);

}  // namespace m3
