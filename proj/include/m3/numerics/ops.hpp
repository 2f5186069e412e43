// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "m3/numerics/autograd.hpp"
#include "m3/numerics/rng.hpp"

namespace m3::ops {

enum class Activation { gelu, silu };

/// Parses "gelu" / "silu"; anything else is a ConfigError.
Activation parse_activation(std::string_view name);

/// Floor applied to q before the log in `kl_divergence`.
inline constexpr double kKlFloor = 1e-12;

// Every op below validates shapes (DimensionError), checks that its output is
// finite (NumericError) and records a backward closure when any input
// requires grad. Matrix arguments are rank-2 unless stated otherwise;
// "row-wise" ops treat all leading extents as rows.

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// a · bᵀ for a [m×k], b [n×k].
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
/// x [...×n] plus a bias row [n] broadcast over rows.
template <typename T> Var<T> add_row(const Var<T>& x, const Var<T>& bias);
template <typename T> Var<T> scale(const Var<T>& x, double factor);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
/// Sum of single-element terms, accumulated left to right.
template <typename T> Var<T> add_scalars(const std::vector<Var<T>>& terms);

template <typename T> Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t len);
template <typename T> Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t len);
/// Rows of `table` selected by `index` (embedding lookup); backward scatter-adds.
template <typename T> Var<T> gather_rows(const Var<T>& table, std::span<const std::size_t> index);

template <typename T> Var<T> rms_norm(const Var<T>& x, const Var<T>& weight, double eps);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, double eps);

template <typename T> Var<T> activation(const Var<T>& x, Activation kind);

template <typename T> Var<T> softmax_rows(const Var<T>& x);
/// Computed as x - logsumexp(x) per row.
template <typename T> Var<T> log_softmax_rows(const Var<T>& x);

/// Mean negative log-likelihood over rows where `mask` is set.
/// Throws EmptyMaskError when no row is selected.
template <typename T>
Var<T> masked_cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask);

/// Σ_rows Σ_v p·log(p / max(q, kKlFloor)), with 0·log(0/q) = 0.
/// Both inputs must be row-stochastic within 1e-6.
template <typename T> Var<T> kl_divergence(const Var<T>& p, const Var<T>& q);
/// Σ_rows Σ_v exp(log_p)·(log_p − log_q) for log-probability inputs.
template <typename T> Var<T> kl_divergence_log(const Var<T>& log_p, const Var<T>& log_q);

/// Throws ContractError on a zero-norm row.
template <typename T> Var<T> l2_normalize_rows(const Var<T>& x);
/// Inner products of the L2-normalized rows of q [a×d] and docs [b×d].
template <typename T> Var<T> cosine_scores(const Var<T>& q, const Var<T>& docs);

/// Bidirectional multi-head scaled dot-product attention over `batch`
/// sequences of `seq_len` rows stacked in q, k, v [(batch·seq_len)×M].
/// Keys whose `key_mask` entry is false are excluded from every softmax.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 std::span<const std::uint8_t> key_mask, std::size_t n_heads,
                 std::size_t seq_len);

/// Mean over unmasked rows of each `seq_len`-row block: [(B·s)×M] -> [B×M].
/// Throws EmptyMaskError when a block has no unmasked row.
template <typename T>
Var<T> masked_mean_rows(const Var<T>& x, std::span<const std::uint8_t> mask, std::size_t seq_len);

/// Inverted dropout: kept units are scaled by 1/(1-rate).
template <typename T> Var<T> dropout(const Var<T>& x, double rate, Rng& rng);

/// Same value, no gradient flow.
template <typename T> Var<T> stop_gradient(const Var<T>& x);

}  // namespace m3::ops
