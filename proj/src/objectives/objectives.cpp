// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/objectives/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "m3/numerics/errors.hpp"
#include "m3/numerics/ops.hpp"

namespace m3 {

namespace {

constexpr double kNormTolerance = 1e-3;

void require_tau(double tau, const char* where) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ConfigError(std::string(where) + ": temperature must be positive, got " + std::to_string(tau));
  }
}

template <typename T>
void require_pair_inputs(const Var<T>& q, const Var<T>& d, const char* where) {
  if (q.shape().size() != 2 || q.shape() != d.shape()) {
    throw DimensionError(std::string(where) + ": query and document embeddings must share one [B×dim] shape, got " +
                         shape_str(q.shape()) + " and " + shape_str(d.shape()));
  }
  if (q.shape()[0] == 0 || q.shape()[1] == 0) throw DimensionError(std::string(where) + ": empty batch");
  for (const Var<T>* v : {&q, &d}) {
    const Tensor<T>& x = v->value();
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double ss = 0.0;
      const T* row = x.row(r);
      for (std::size_t c = 0; c < x.cols(); ++c) ss += static_cast<double>(row[c]) * row[c];
      if (std::abs(std::sqrt(ss) - 1.0) > kNormTolerance) {
        throw ContractError(std::string(where) + ": row " + std::to_string(r) + " has norm " +
                            std::to_string(std::sqrt(ss)) + ", embeddings must be L2-normalized");
      }
    }
  }
}

struct MaskedRows {
  std::vector<std::size_t> index;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> ones;
};

MaskedRows collect_masked_rows(const MlmBatch& batch) {
  batch.validate();
  MaskedRows out;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    std::size_t in_sequence = 0;
    for (std::size_t s = 0; s < batch.seq; ++s) {
      const std::size_t i = b * batch.seq + s;
      if (!batch.mask_positions[i]) continue;
      out.index.push_back(i);
      out.targets.push_back(batch.labels[i]);
      ++in_sequence;
    }
    if (in_sequence == 0) {
      throw EmptyMaskError("mlm batch: sequence " + std::to_string(b) + " has no masked position");
    }
  }
  out.ones.assign(out.index.size(), 1);
  return out;
}

template <typename T>
struct CellLogits {
  std::map<Cell, Var<T>> logits;
  MaskedRows rows;
};

/// One forward pass; head logits of every grid cell at the masked rows.
template <typename T>
CellLogits<T> grid_logits(const Encoder<T>& model, const MlmBatch& batch, const GranularitySet& grid,
                          const ObjectiveOptions& options) {
  grid.validate(model.config().n_layers, model.config().hidden);
  CellLogits<T> out;
  out.rows = collect_masked_rows(batch);
  ForwardOptions fwd;
  fwd.taps = grid.layers;
  fwd.train = options.train;
  fwd.rng = options.rng;
  fwd.stop_at_last_tap = true;
  const auto states = model.forward(batch.tokens, batch.attn_mask, batch.batch, batch.seq, fwd);
  for (int l : grid.layers) {
    const Var<T> rows = ops::gather_rows(states.tapped.at(l), out.rows.index);
    for (int d : grid.dims) out.logits.emplace(Cell{l, d}, model.mlm_logits(rows, d));
  }
  return out;
}

template <typename T>
LossReport<T> mlm_report(const CellLogits<T>& cells) {
  LossReport<T> report;
  std::vector<Var<T>> terms;
  for (const auto& [cell, logits] : cells.logits) {
    Var<T> loss = ops::masked_cross_entropy(logits, cells.rows.targets, cells.rows.ones);
    report.per_pair[cell] = static_cast<double>(loss.value().item());
    report.total += report.per_pair[cell];
    terms.push_back(loss);
  }
  report.objective = ops::add_scalars(terms);
  return report;
}

}  // namespace

template <typename T>
LossReport<T> matryoshka_mlm_loss(const Encoder<T>& model, const MlmBatch& batch,
                                  const GranularitySet& grid, const ObjectiveOptions& options) {
  return mlm_report(grid_logits(model, batch, grid, options));
}

template <typename T>
LossReport<T> matryoshka_mlm_loss(const Encoder<T>& model, const MlmBatch& batch,
                                  const ObjectiveOptions& options) {
  return matryoshka_mlm_loss(model, batch, model.config().granularity, options);
}

template <typename T>
Var<T> info_nce_from_scores(const Var<T>& scores, double tau) {
  require_tau(tau, "info_nce");
  if (scores.shape().size() != 2 || scores.shape()[0] != scores.shape()[1] || scores.shape()[0] == 0) {
    throw DimensionError("info_nce: scores must be a non-empty square matrix, got " + shape_str(scores.shape()));
  }
  const std::size_t b = scores.shape()[0];
  std::vector<std::int32_t> targets(b);
  for (std::size_t i = 0; i < b; ++i) targets[i] = static_cast<std::int32_t>(i);
  const std::vector<std::uint8_t> ones(b, 1);
  return ops::masked_cross_entropy(ops::scale(scores, 1.0 / tau), targets, ones);
}

template <typename T>
Var<T> contrastive_sft_loss(const Var<T>& q, const Var<T>& d, double tau) {
  require_tau(tau, "contrastive_sft_loss");
  require_pair_inputs(q, d, "contrastive_sft_loss");
  return info_nce_from_scores(ops::matmul_nt(q, d), tau);
}

template <typename T>
Var<T> tiled_contrastive_loss(const Var<T>& q, const Var<T>& d, double tau, TileConfig tile) {
  if (tile.tile == 0) throw ConfigError("tile must be at least 1");
  require_tau(tau, "tiled_contrastive_loss");
  require_pair_inputs(q, d, "tiled_contrastive_loss");
  const std::size_t b = q.shape()[0];
  const std::size_t k = q.shape()[1];
  const std::size_t t = std::min(tile.tile, b);

  // Scaled score block s_ij = <q_i, d_j> / tau for i in [i0, i0+ni), j in [j0, j0+nj).
  auto fill_block = [k, tau](Tensor<double>& block, const Tensor<T>& qv, const Tensor<T>& dv,
                             std::size_t i0, std::size_t ni, std::size_t j0, std::size_t nj) {
    const std::size_t stride = block.cols();
    for (std::size_t i = 0; i < ni; ++i) {
      const T* qi = qv.row(i0 + i);
      for (std::size_t j = 0; j < nj; ++j) {
        const T* dj = dv.row(j0 + j);
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c) dot += static_cast<double>(qi[c]) * dj[c];
        block[i * stride + j] = dot / tau;
      }
    }
  };

  const Tensor<T>& qv = q.value();
  const Tensor<T>& dv = d.value();
  Tensor<double> block({t, t});
  std::vector<double> row_max(b, -std::numeric_limits<double>::infinity());
  std::vector<double> row_sum(b, 0.0);
  for (std::size_t i0 = 0; i0 < b; i0 += t) {
    const std::size_t ni = std::min(t, b - i0);
    for (std::size_t j0 = 0; j0 < b; j0 += t) {
      const std::size_t nj = std::min(t, b - j0);
      fill_block(block, qv, dv, i0, ni, j0, nj);
      for (std::size_t i = 0; i < ni; ++i) {
        const double* s = block.data() + i * t;
        const double m = *std::max_element(s, s + nj);
        double& run_max = row_max[i0 + i];
        double& run_sum = row_sum[i0 + i];
        if (m > run_max) {
          run_sum *= std::exp(run_max - m);
          run_max = m;
        }
        for (std::size_t j = 0; j < nj; ++j) run_sum += std::exp(s[j] - run_max);
      }
    }
  }
  auto lse = std::make_shared<std::vector<double>>(b);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    (*lse)[i] = row_max[i] + std::log(row_sum[i]);
    double pos = 0.0;
    for (std::size_t c = 0; c < k; ++c) pos += static_cast<double>(qv(i, c)) * dv(i, c);
    loss += (*lse)[i] - pos / tau;
  }
  loss /= static_cast<double>(b);

  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));
  require_finite(out, "tiled_contrastive_loss");
  auto backward = [lse, b, k, t, tau, fill_block](Node<T>& self) {
    const Tensor<T>& qv = self.parents[0]->value;
    const Tensor<T>& dv = self.parents[1]->value;
    Tensor<T>* gq = self.parents[0]->requires_grad ? &self.parents[0]->grad_buffer() : nullptr;
    Tensor<T>* gd = self.parents[1]->requires_grad ? &self.parents[1]->grad_buffer() : nullptr;
    const double g = static_cast<double>(self.grad[0]) / (static_cast<double>(b) * tau);
    Tensor<double> block({t, t});
    for (std::size_t i0 = 0; i0 < b; i0 += t) {
      const std::size_t ni = std::min(t, b - i0);
      for (std::size_t j0 = 0; j0 < b; j0 += t) {
        const std::size_t nj = std::min(t, b - j0);
        fill_block(block, qv, dv, i0, ni, j0, nj);
        for (std::size_t i = 0; i < ni; ++i) {
          const std::size_t gi = i0 + i;
          for (std::size_t j = 0; j < nj; ++j) {
            const std::size_t gj = j0 + j;
            double coef = std::exp(block[i * t + j] - (*lse)[gi]);
            if (gi == gj) coef -= 1.0;
            coef *= g;
            if (gq) {
              T* dst = gq->row(gi);
              const T* src = dv.row(gj);
              for (std::size_t c = 0; c < k; ++c) dst[c] += static_cast<T>(coef * src[c]);
            }
            if (gd) {
              T* dst = gd->row(gj);
              const T* src = qv.row(gi);
              for (std::size_t c = 0; c < k; ++c) dst[c] += static_cast<T>(coef * src[c]);
            }
          }
        }
      }
    }
  };
  return Var<T>::make(std::move(out), {q, d}, backward, "tiled_contrastive_loss");
}

template <typename T>
LossReport<T> matryoshka_contrastive_loss(const Encoder<T>& model, const PairBatch& batch,
                                          const GranularitySet& grid, double tau,
                                          std::optional<TileConfig> tile,
                                          const ObjectiveOptions& options) {
  require_tau(tau, "contrastive loss");
  if (tile && tile->tile == 0) throw ConfigError("tile must be at least 1");
  grid.validate(model.config().n_layers, model.config().hidden);
  batch.validate();
  if (batch.batch == 0) throw DataError("pair batch is empty");

  // Queries and documents go through one forward pass as 2B sequences.
  std::vector<std::int32_t> tokens(batch.query_tokens);
  tokens.insert(tokens.end(), batch.doc_tokens.begin(), batch.doc_tokens.end());
  std::vector<std::uint8_t> mask(batch.query_mask);
  mask.insert(mask.end(), batch.doc_mask.begin(), batch.doc_mask.end());
  ForwardOptions fwd;
  fwd.taps = grid.layers;
  fwd.train = options.train;
  fwd.rng = options.rng;
  fwd.stop_at_last_tap = true;
  const auto states = model.forward(tokens, mask, 2 * batch.batch, batch.seq, fwd);

  LossReport<T> report;
  std::vector<Var<T>> terms;
  for (int l : grid.layers) {
    const Var<T> pooled = ops::masked_mean_rows(states.tapped.at(l), mask, batch.seq);
    const Var<T> qp = ops::slice_rows(pooled, 0, batch.batch);
    const Var<T> dp = ops::slice_rows(pooled, batch.batch, batch.batch);
    for (int dim : grid.dims) {
      const auto width = static_cast<std::size_t>(dim);
      const Var<T> qn = ops::l2_normalize_rows(ops::slice_cols(qp, 0, width));
      const Var<T> dn = ops::l2_normalize_rows(ops::slice_cols(dp, 0, width));
      Var<T> loss = tile ? tiled_contrastive_loss(qn, dn, tau, *tile) : contrastive_sft_loss(qn, dn, tau);
      const Cell cell{l, dim};
      report.per_pair[cell] = static_cast<double>(loss.value().item());
      report.total += report.per_pair[cell];
      terms.push_back(loss);
    }
  }
  report.objective = ops::add_scalars(terms);
  return report;
}

template <typename T>
LossReport<T> mrl_sft_loss(const Encoder<T>& model, const PairBatch& batch, const std::vector<int>& dims,
                           int layer, double tau, std::optional<TileConfig> tile,
                           const ObjectiveOptions& options) {
  if (dims.empty()) throw ConfigError("mrl_sft_loss: dims must not be empty");
  for (int d : dims) {
    if (d < 1 || d > model.config().hidden) {
      throw DimensionError("mrl_sft_loss: dim " + std::to_string(d) + " outside [1, " +
                           std::to_string(model.config().hidden) + "]");
    }
  }
  std::vector<int> sorted(dims);
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  return matryoshka_contrastive_loss(model, batch, GranularitySet{{layer}, sorted}, tau, tile, options);
}

void DistillPlan::validate(const GranularitySet& grid, int hidden) const {
  if (!(lambda_d >= 0.0) || !std::isfinite(lambda_d)) throw ConfigError("distill.lambda_d must be non-negative");
  if (!(tau_d > 0.0) || !std::isfinite(tau_d)) throw ConfigError("distill.tau_d must be positive");
  for (const auto& p : pairs) {
    for (const Cell& c : {p.teacher, p.student}) {
      if (c.dim < 1 || c.dim > hidden) {
        throw DimensionError("distill pair " + c.label() + ": dim outside [1, " + std::to_string(hidden) + "]");
      }
      if (!grid.contains(c)) throw ConfigError("distill pair " + c.label() + " is not in the granularity grid");
    }
    if (p.teacher == p.student) throw ConfigError("distill pair " + p.teacher.label() + " distills into itself");
  }
}

DistillPlan build_distill_plan(DistillMode mode, Cell teacher, std::optional<Cell> student,
                               const GranularitySet& grid, double lambda_d, double tau_d) {
  if (!grid.contains(teacher)) throw ConfigError("distill teacher " + teacher.label() + " is not in the grid");
  DistillPlan plan;
  plan.lambda_d = lambda_d;
  plan.tau_d = tau_d;
  if (mode == DistillMode::all_from_top) {
    for (const Cell& c : grid.cells()) {
      if (c != teacher) plan.pairs.push_back({teacher, c});
    }
  } else {
    if (!student) throw ConfigError("distill: single_pair mode requires a student cell");
    if (!grid.contains(*student)) throw ConfigError("distill student " + student->label() + " is not in the grid");
    if (*student == teacher) throw ConfigError("distill: student equals teacher");
    plan.pairs.push_back({teacher, *student});
  }
  return plan;
}

template <typename T>
Var<T> distillation_term(const Var<T>& student_logits, const Var<T>& teacher_logits, double tau,
                         KlDirection direction) {
  require_tau(tau, "distillation");
  if (student_logits.shape() != teacher_logits.shape() || student_logits.shape().size() != 2 ||
      student_logits.shape()[0] == 0) {
    throw DimensionError("distillation: logits shapes differ or are empty: " + shape_str(student_logits.shape()) +
                         " vs " + shape_str(teacher_logits.shape()));
  }
  const Var<T> log_s = ops::log_softmax_rows(ops::scale(student_logits, 1.0 / tau));
  const Var<T> log_t = ops::log_softmax_rows(ops::stop_gradient(ops::scale(teacher_logits, 1.0 / tau)));
  const Var<T> kl = direction == KlDirection::student_first ? ops::kl_divergence_log(log_s, log_t)
                                                            : ops::kl_divergence_log(log_t, log_s);
  return ops::scale(kl, 1.0 / static_cast<double>(student_logits.shape()[0]));
}

template <typename T>
LossReport<T> distill_loss(const Encoder<T>& model, const MlmBatch& batch, const DistillPlan& plan,
                           const GranularitySet& grid, const ObjectiveOptions& options,
                           const Encoder<T>* teacher) {
  plan.validate(grid, model.config().hidden);
  const CellLogits<T> cells = grid_logits(model, batch, grid, options);
  CellLogits<T> external;
  if (teacher != nullptr && !plan.pairs.empty()) {
    GranularitySet teacher_cells;
    for (const auto& p : plan.pairs) {
      teacher_cells.layers.push_back(p.teacher.layer);
      teacher_cells.dims.push_back(p.teacher.dim);
    }
    for (auto* v : {&teacher_cells.layers, &teacher_cells.dims}) {
      std::sort(v->begin(), v->end());
      v->erase(std::unique(v->begin(), v->end()), v->end());
    }
    external = grid_logits(*teacher, batch, teacher_cells, ObjectiveOptions{});
  }
  const auto& teacher_logits = teacher != nullptr ? external.logits : cells.logits;
  LossReport<T> report = mlm_report(cells);
  std::vector<Var<T>> terms;
  double aux = 0.0;
  for (const auto& p : plan.pairs) {
    Var<T> term = distillation_term(cells.logits.at(p.student), teacher_logits.at(p.teacher), plan.tau_d,
                                    plan.kl_direction);
    aux += static_cast<double>(term.value().item());
    terms.push_back(term);
  }
  report.aux = aux;
  report.total += plan.lambda_d * aux;
  if (!terms.empty()) {
    report.objective = ops::add_scalars<T>({report.objective, ops::scale(ops::add_scalars(terms), plan.lambda_d)});
  }
  return report;
}

#define M3_INSTANTIATE_OBJECTIVES(T)                                                                        \
  template LossReport<T> matryoshka_mlm_loss(const Encoder<T>&, const MlmBatch&, const GranularitySet&,      \
                                             const ObjectiveOptions&);                                        \
  template LossReport<T> matryoshka_mlm_loss(const Encoder<T>&, const MlmBatch&, const ObjectiveOptions&);  \
  template Var<T> info_nce_from_scores(const Var<T>&, double);                                               \
  template Var<T> contrastive_sft_loss(const Var<T>&, const Var<T>&, double);                                \
  template Var<T> tiled_contrastive_loss(const Var<T>&, const Var<T>&, double, TileConfig);                  \
  template LossReport<T> matryoshka_contrastive_loss(const Encoder<T>&, const PairBatch&,                     \
                                                     const GranularitySet&, double, std::optional<TileConfig>, \
                                                     const ObjectiveOptions&);                                \
  template LossReport<T> mrl_sft_loss(const Encoder<T>&, const PairBatch&, const std::vector<int>&, int,      \
                                      double, std::optional<TileConfig>, const ObjectiveOptions&);            \
  template Var<T> distillation_term(const Var<T>&, const Var<T>&, double, KlDirection);                      \
  template LossReport<T> distill_loss(const Encoder<T>&, const MlmBatch&, const DistillPlan&,                 \
                                      const GranularitySet&, const ObjectiveOptions&, const Encoder<T>*);

M3_INSTANTIATE_OBJECTIVES(float)
M3_INSTANTIATE_OBJECTIVES(double)

}  // namespace m3
