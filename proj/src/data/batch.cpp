// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/data/batch.hpp"

#include <string>

#include "m3/numerics/errors.hpp"

namespace m3 {

namespace {

template <typename V>
void require_size(const V& v, std::size_t n, const char* field) {
  if (v.size() != n) {
    throw DimensionError(std::string(field) + ": expected " + std::to_string(n) + " entries, got " +
                         std::to_string(v.size()));
  }
}

}  // namespace

std::size_t MlmBatch::masked_count() const {
  std::size_t n = 0;
  for (auto m : mask_positions) n += m ? 1 : 0;
  return n;
}

void MlmBatch::validate() const {
  const std::size_t n = batch * seq;
  require_size(tokens, n, "mlm batch tokens");
  require_size(attn_mask, n, "mlm batch attn_mask");
  require_size(labels, n, "mlm batch labels");
  require_size(mask_positions, n, "mlm batch mask_positions");
  for (std::size_t i = 0; i < n; ++i) {
    if ((labels[i] != kIgnoreLabel) != (mask_positions[i] != 0)) {
      throw DataError("mlm batch: label/mask mismatch at position " + std::to_string(i));
    }
  }
}

void PairBatch::validate() const {
  const std::size_t n = batch * seq;
  require_size(query_tokens, n, "pair batch query_tokens");
  require_size(query_mask, n, "pair batch query_mask");
  require_size(doc_tokens, n, "pair batch doc_tokens");
  require_size(doc_mask, n, "pair batch doc_mask");
  require_size(pair_ids, batch, "pair batch pair_ids");
}

}  // namespace m3
