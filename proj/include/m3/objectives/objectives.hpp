// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <vector>

#include "m3/data/batch.hpp"
#include "m3/encoder/config.hpp"
#include "m3/encoder/model.hpp"
#include "m3/numerics/autograd.hpp"

namespace m3 {

/// Per-cell losses, their aggregate and the differentiable objective.
template <typename T>
struct LossReport {
  std::map<Cell, double> per_pair;
  /// Σ per_pair, plus lambda_d · aux when distillation is active.
  double total = 0.0;
  /// Distillation term summed over pairs, before lambda_d.
  std::optional<double> aux;
  Var<T> objective;
};

/// Passed through to the encoder forward (train mode, dropout rng).
struct ObjectiveOptions {
  bool train = false;
  Rng* rng = nullptr;
};

/// Unweighted sum over every (l, d) in `grid` of the masked cross-entropy of
/// the shared head applied to the first d coordinates of layer-l states.
/// Each cell's loss is the mean over all masked positions of the batch.
template <typename T>
LossReport<T> matryoshka_mlm_loss(const Encoder<T>& model, const MlmBatch& batch,
                                  const GranularitySet& grid, const ObjectiveOptions& options = {});
template <typename T>
LossReport<T> matryoshka_mlm_loss(const Encoder<T>& model, const MlmBatch& batch,
                                  const ObjectiveOptions& options = {});

/// Mean over rows i of logsumexp_j(scores_ij / tau) − scores_ii / tau.
/// No normalization check; `contrastive_sft_loss` is the checked entry point.
template <typename T> Var<T> info_nce_from_scores(const Var<T>& scores, double tau);

/// In-batch-negative contrastive loss on L2-normalized q, d [B×dim].
/// Throws ContractError when a row norm deviates from 1 by more than 1e-3.
template <typename T> Var<T> contrastive_sft_loss(const Var<T>& q, const Var<T>& d, double tau);

struct TileConfig {
  std::size_t tile = 32;
};

/// Same value and gradients as `contrastive_sft_loss`, computed over
/// tile×tile score blocks with running log-sum-exp accumulators; the B×B
/// score matrix is never stored.
template <typename T>
Var<T> tiled_contrastive_loss(const Var<T>& q, const Var<T>& d, double tau, TileConfig tile);

/// Contrastive loss summed over every (l, d) in `grid`: query and document
/// states at layer l are mean-pooled, truncated to d and re-normalized.
/// `tile` selects the tiled path; nullopt uses the naive score matrix.
template <typename T>
LossReport<T> matryoshka_contrastive_loss(const Encoder<T>& model, const PairBatch& batch,
                                          const GranularitySet& grid, double tau,
                                          std::optional<TileConfig> tile = std::nullopt,
                                          const ObjectiveOptions& options = {});

/// Σ_{d ∈ dims} contrastive loss of layer-`layer` embeddings truncated to d.
template <typename T>
LossReport<T> mrl_sft_loss(const Encoder<T>& model, const PairBatch& batch,
                           const std::vector<int>& dims, int layer, double tau,
                           std::optional<TileConfig> tile = std::nullopt,
                           const ObjectiveOptions& options = {});

enum class KlDirection {
  student_first,  // Σ P_S log(P_S / P_T)
  teacher_first,  // Σ P_T log(P_T / P_S)
};

struct DistillPair {
  Cell teacher;
  Cell student;
  bool operator==(const DistillPair&) const = default;
};

struct DistillPlan {
  std::vector<DistillPair> pairs;
  double lambda_d = 1.0;
  double tau_d = 1.0;
  KlDirection kl_direction = KlDirection::student_first;

  /// Throws ConfigError for self-pairs, cells outside `grid`, lambda_d < 0
  /// or tau_d <= 0; DimensionError for dims above `hidden`.
  void validate(const GranularitySet& grid, int hidden) const;
};

enum class DistillMode { all_from_top, single_pair };

DistillPlan build_distill_plan(DistillMode mode, Cell teacher, std::optional<Cell> student,
                               const GranularitySet& grid, double lambda_d = 1.0,
                               double tau_d = 1.0);

/// KL between temperature-softened distributions of two logit blocks, summed
/// over rows and divided by the row count. The teacher side carries no
/// gradient.
template <typename T>
Var<T> distillation_term(const Var<T>& student_logits, const Var<T>& teacher_logits, double tau,
                         KlDirection direction);

/// Matryoshka MLM loss over `grid` plus lambda_d · Σ_pairs distillation_term,
/// evaluated at the masked positions only.
///
/// Teacher cells are read from `model` itself unless `teacher` is given, in
/// which case they come from an eval-mode pass of that model (for example a
/// frozen snapshot of `model`, which makes the objective an ordinary function
/// of the student parameters for finite-difference checks).
template <typename T>
LossReport<T> distill_loss(const Encoder<T>& model, const MlmBatch& batch, const DistillPlan& plan,
                           const GranularitySet& grid, const ObjectiveOptions& options = {},
                           const Encoder<T>* teacher = nullptr);

}  // namespace m3
