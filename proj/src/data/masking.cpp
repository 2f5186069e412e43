// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/data/masking.hpp"

#include <string>

#include "m3/data/text.hpp"
#include "m3/numerics/errors.hpp"

namespace m3 {

namespace {

void apply_policy(MaskedSequence& out, std::size_t i, MaskPolicy policy, std::int32_t vocab_size, Rng& rng) {
  out.labels[i] = out.tokens[i];
  out.selected[i] = 1;
  if (policy == MaskPolicy::mask_only) {
    out.tokens[i] = Vocab::kMask;
    return;
  }
  const double u = rng.uniform();
  if (u < 0.8) {
    out.tokens[i] = Vocab::kMask;
  } else if (u < 0.9) {
    const auto span = static_cast<std::uint64_t>(vocab_size - Vocab::kNumSpecial);
    out.tokens[i] = Vocab::kNumSpecial + static_cast<std::int32_t>(rng.below(span));
  }
}

}  // namespace

MaskPolicy parse_mask_policy(std::string_view name) {
  if (name == "mask_only") return MaskPolicy::mask_only;
  if (name == "bert_80_10_10") return MaskPolicy::bert_80_10_10;
  throw ConfigError("unknown mask policy '" + std::string(name) + "' (expected mask_only or bert_80_10_10)");
}

std::string_view to_string(MaskPolicy policy) {
  return policy == MaskPolicy::mask_only ? "mask_only" : "bert_80_10_10";
}

MaskedSequence mask_tokens(std::span<const std::int32_t> seq, double rate, MaskPolicy policy,
                           std::int32_t vocab_size, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("mask rate must lie in [0, 1]");
  if (vocab_size <= Vocab::kNumSpecial) throw ConfigError("vocabulary has no non-special tokens");
  MaskedSequence out;
  out.tokens.assign(seq.begin(), seq.end());
  out.labels.assign(seq.size(), kIgnoreLabel);
  out.selected.assign(seq.size(), 0);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (Vocab::is_special(seq[i])) continue;
    if (rng.uniform() < rate) apply_policy(out, i, policy, vocab_size, rng);
  }
  return out;
}

MaskedSequence mask_tokens_at_least_one(std::span<const std::int32_t> seq, double rate, MaskPolicy policy,
                                        std::int32_t vocab_size, Rng& rng) {
  MaskedSequence out = mask_tokens(seq, rate, policy, vocab_size, rng);
  for (auto s : out.selected) {
    if (s) return out;
  }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!Vocab::is_special(seq[i])) eligible.push_back(i);
  }
  if (eligible.empty()) throw DataError("sequence has no maskable token");
  apply_policy(out, eligible[rng.below(eligible.size())], policy, vocab_size, rng);
  return out;
}

}  // namespace m3
