// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "m3/numerics/errors.hpp"
#include "m3/numerics/grad_check.hpp"
#include "m3/numerics/ops.hpp"
#include "m3/objectives/objectives.hpp"
#include "test_util.hpp"

using namespace m3;
using m3::test::random_tensor;
using m3::test::toy_config;
using m3::test::toy_mlm_batch;
using m3::test::toy_pair_batch;
using E = Encoder<double>;
using V = Var<double>;
using TD = Tensor<double>;

namespace {

TD normalized(Shape shape, std::uint64_t seed) {
  return ops::l2_normalize_rows(V::constant(random_tensor(std::move(shape), seed))).value();
}

/// Reference loss with the full B×B score matrix and explicit log-sum-exp.
double naive_info_nce(const TD& q, const TD& d, double tau) {
  const std::size_t b = q.rows();
  double loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> s(b);
    for (std::size_t j = 0; j < b; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < q.cols(); ++k) dot += q(i, k) * d(j, k);
      s[j] = dot / tau;
    }
    double m = s[0];
    for (double v : s) m = std::max(m, v);
    double z = 0;
    for (double v : s) z += std::exp(v - m);
    loss += m + std::log(z) - s[i];
  }
  return loss / static_cast<double>(b);
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace

TEST_CASE("matryoshka mlm loss at maximum entropy") {
  ModelConfig c = toy_config();
  E model = E::init(c, 1);
  for (auto& [name, v] : model.params()) {
    if (name.find("norm.weight") == std::string::npos) v.mutable_value().fill(0.0);
  }
  const auto batch = toy_mlm_batch(2, 12, c.vocab, 2);
  const auto report = matryoshka_mlm_loss(model, batch);
  REQUIRE(report.per_pair.size() == c.granularity.grid_size());
  for (const auto& [cell, loss] : report.per_pair) CHECK(loss == doctest::Approx(std::log(101.0)).epsilon(1e-12));
  CHECK(report.total == doctest::Approx(6 * std::log(101.0)).epsilon(1e-12));
}

TEST_CASE("matryoshka mlm loss reduces to the plain head at (N, M)") {
  ModelConfig c = toy_config();
  const E model = E::init(c, 3);
  const auto batch = toy_mlm_batch(3, 12, c.vocab, 4);
  const auto report = matryoshka_mlm_loss(model, batch, GranularitySet{{4}, {32}});
  const auto out = model.forward(batch.tokens, batch.attn_mask, 3, 12);
  const V logits = model.mlm_logits(out.final_state, 32);
  const double plain = ops::masked_cross_entropy(logits, batch.labels, batch.mask_positions).value().item();
  CHECK(report.per_pair.size() == 1);
  CHECK(report.total == plain);
}

TEST_CASE("matryoshka mlm total equals independently recomputed cells") {
  ModelConfig c = toy_config();
  const E model = E::init(c, 5);
  const auto batch = toy_mlm_batch(3, 12, c.vocab, 6);
  const auto report = matryoshka_mlm_loss(model, batch);
  double sum = 0;
  for (const Cell& cell : c.granularity.cells()) {
    ForwardOptions f;
    f.taps = {cell.layer};
    const auto out = model.forward(batch.tokens, batch.attn_mask, 3, 12, f);
    const double single =
        ops::masked_cross_entropy(model.mlm_logits(out.tapped.at(cell.layer), cell.dim), batch.labels,
                                  batch.mask_positions)
            .value()
            .item();
    CHECK(rel(report.per_pair.at(cell), single) < 1e-9);
    sum += single;
  }
  CHECK(rel(report.total, sum) < 1e-9);
  CHECK(rel(report.objective.value().item(), report.total) < 1e-9);
}

TEST_CASE("matryoshka mlm loss input checks") {
  ModelConfig c = toy_config();
  const E model = E::init(c, 5);
  auto batch = toy_mlm_batch(2, 12, c.vocab, 6);
  CHECK_THROWS_AS(matryoshka_mlm_loss(model, batch, GranularitySet{{}, {8}}), ConfigError);
  for (std::size_t i = 12; i < 24; ++i) {
    if (batch.mask_positions[i]) {
      batch.mask_positions[i] = 0;
      batch.tokens[i] = batch.labels[i];
      batch.labels[i] = kIgnoreLabel;
    }
  }
  CHECK_THROWS_AS(matryoshka_mlm_loss(model, batch), EmptyMaskError);
}

TEST_CASE("contrastive sft loss") {
  SUBCASE("lone positive") {
    const TD q = normalized({1, 6}, 1);
    const TD d = normalized({1, 6}, 2);
    CHECK(contrastive_sft_loss(V::constant(q), V::constant(d), 0.05).value().item() == 0.0);
  }
  SUBCASE("all cosines equal gives ln B") {
    TD q({5, 3});
    TD d({5, 3});
    for (std::size_t i = 0; i < 5; ++i) {
      q(i, 0) = 1.0;
      d(i, 1) = 0.6;
      d(i, 0) = 0.8;
    }
    CHECK(contrastive_sft_loss(V::constant(q), V::constant(d), 0.05).value().item() ==
          doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
  SUBCASE("two pairs in closed form") {
    const TD q = TD::matrix(2, 2, {1, 0, 0, 1});
    const double loss = contrastive_sft_loss(V::constant(q), V::constant(q), 0.05).value().item();
    CHECK(loss == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
    CHECK(loss == doctest::Approx(2.061e-9).epsilon(1e-3));
  }
  SUBCASE("unnormalized input") {
    const TD q = TD::matrix(1, 2, {1.1, 0});
    CHECK_THROWS_AS(contrastive_sft_loss(V::constant(q), V::constant(q), 0.05), ContractError);
    const TD ok = TD::matrix(1, 2, {1.0, 0});
    CHECK_THROWS_AS(contrastive_sft_loss(V::constant(ok), V::constant(ok), 0.0), ConfigError);
  }
  SUBCASE("matches naive reference") {
    const TD q = normalized({9, 5}, 3);
    const TD d = normalized({9, 5}, 4);
    CHECK(rel(contrastive_sft_loss(V::constant(q), V::constant(d), 0.05).value().item(),
              naive_info_nce(q, d, 0.05)) < 1e-12);
  }
}

TEST_CASE("info nce depends on scores only through scores / tau") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TD s = random_tensor({6, 6}, 70 + seed);
    TD doubled = s;
    for (auto& v : doubled.values()) v *= 2.0;
    const double a = info_nce_from_scores(V::constant(s), 0.05).value().item();
    const double b = info_nce_from_scores(V::constant(doubled), 0.1).value().item();
    CHECK(rel(a, b) < 1e-12);
  }
}

TEST_CASE("tiled contrastive loss matches the naive loss") {
  const std::size_t B = 64;
  const TD qv = normalized({B, 16}, 10);
  const TD dv = normalized({B, 16}, 11);
  V qn = V::parameter(qv);
  V dn = V::parameter(dv);
  contrastive_sft_loss(qn, dn, 0.05).backward();
  const TD naive_q = qn.grad();
  const TD naive_d = dn.grad();
  const double naive = naive_info_nce(qv, dv, 0.05);

  for (std::size_t tile : {1, 2, 7, 8, 63, 64, 128}) {
    V q = V::parameter(qv);
    V d = V::parameter(dv);
    V loss = tiled_contrastive_loss(q, d, 0.05, {tile});
    CHECK(rel(loss.value().item(), naive) < 1e-9);
    loss.backward();
    double worst = 0;
    for (std::size_t i = 0; i < qv.numel(); ++i) {
      worst = std::max(worst, rel(q.grad()[i], naive_q[i]));
      worst = std::max(worst, rel(d.grad()[i], naive_d[i]));
    }
    CHECK(worst < 1e-7);
  }
  CHECK_THROWS_AS(tiled_contrastive_loss(V::constant(qv), V::constant(dv), 0.05, {0}), ConfigError);
}

TEST_CASE("tiled contrastive loss never allocates a B×B block") {
  const std::size_t B = 64;
  V q = V::parameter(normalized({B, 16}, 12));
  V d = V::parameter(normalized({B, 16}, 13));
  AllocationProbe probe;
  V loss = tiled_contrastive_loss(q, d, 0.05, {8});
  loss.backward();
  CHECK(probe.max_elements() < B * B);
  CHECK_FALSE(probe.saw_shape({B, B}));
  AllocationProbe naive_probe;
  contrastive_sft_loss(q, d, 0.05);
  CHECK(naive_probe.saw_shape({B, B}));
}

TEST_CASE("tiled loss is invariant to tile size (property)") {
  const std::size_t B = 32;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const TD q = normalized({B, 8}, 100 + seed);
    const TD d = normalized({B, 8}, 200 + seed);
    const double ref = tiled_contrastive_loss(V::constant(q), V::constant(d), 0.05, {B}).value().item();
    for (std::size_t tile : {std::size_t{1}, std::size_t{2}, std::size_t{7}, B - 1, B, 2 * B}) {
      CHECK(rel(tiled_contrastive_loss(V::constant(q), V::constant(d), 0.05, {tile}).value().item(), ref) < 1e-9);
    }
  }
}

TEST_CASE("mrl sft loss") {
  ModelConfig c = toy_config();
  const E model = E::init(c, 21);
  const auto batch = toy_pair_batch(4, 10, c.vocab, 22);
  const auto report = mrl_sft_loss(model, batch, {8, 16, 32}, 4, 0.05);
  REQUIRE(report.per_pair.size() == 3);
  double sum = 0;
  for (int dim : {8, 16, 32}) {
    // Separate query / document passes and the encoder's own pooling.
    const auto qo = model.forward(batch.query_tokens, batch.query_mask, 4, 10);
    const auto dout = model.forward(batch.doc_tokens, batch.doc_mask, 4, 10);
    const TD qe = model.pool(qo.final_state, batch.query_mask, 10, dim).value();
    const TD de = model.pool(dout.final_state, batch.doc_mask, 10, dim).value();
    const double expected = naive_info_nce(qe, de, 0.05);
    CHECK(rel(report.per_pair.at(Cell{4, dim}), expected) < 1e-9);
    sum += expected;

    const auto single = mrl_sft_loss(model, batch, {dim}, 4, 0.05);
    CHECK(rel(single.total, contrastive_sft_loss(V::constant(qe), V::constant(de), 0.05).value().item()) < 1e-9);
  }
  CHECK(rel(report.total, sum) < 1e-9);
  const auto tiled = mrl_sft_loss(model, batch, {8, 16, 32}, 4, 0.05, TileConfig{3});
  CHECK(rel(tiled.total, report.total) < 1e-9);

  PairBatch same = batch;
  same.batch = 1;
  same.query_tokens.resize(10);
  same.query_mask.resize(10);
  same.doc_tokens = same.query_tokens;
  same.doc_mask = same.query_mask;
  same.pair_ids = {0};
  CHECK(mrl_sft_loss(model, same, {8, 32}, 2, 0.05).total == 0.0);

  CHECK_THROWS_AS(mrl_sft_loss(model, batch, {64}, 4, 0.05), DimensionError);
  CHECK_THROWS_AS(mrl_sft_loss(model, batch, {}, 4, 0.05), ConfigError);
}

TEST_CASE("distillation term") {
  SUBCASE("identical distributions") {
    const TD z = random_tensor({4, 7}, 5);
    CHECK(distillation_term(V::constant(z), V::constant(z), 1.0, KlDirection::student_first).value().item() == 0.0);
  }
  SUBCASE("hand-set three-token distributions") {
    const TD zs = TD::matrix(1, 3, {std::log(0.5), std::log(0.3), std::log(0.2)});
    const TD zt = TD::matrix(1, 3, {std::log(0.2), std::log(0.2), std::log(0.6)});
    const double student_first = 0.5 * std::log(0.5 / 0.2) + 0.3 * std::log(0.3 / 0.2) + 0.2 * std::log(0.2 / 0.6);
    const double teacher_first = 0.2 * std::log(0.2 / 0.5) + 0.2 * std::log(0.2 / 0.3) + 0.6 * std::log(0.6 / 0.2);
    CHECK(std::abs(distillation_term(V::constant(zs), V::constant(zt), 1.0, KlDirection::student_first)
                       .value()
                       .item() -
                   student_first) < 1e-12);
    CHECK(std::abs(distillation_term(V::constant(zs), V::constant(zt), 1.0, KlDirection::teacher_first)
                       .value()
                       .item() -
                   teacher_first) < 1e-12);
  }
  SUBCASE("no gradient reaches the teacher") {
    V zs = V::parameter(random_tensor({3, 5}, 6));
    V zt = V::parameter(random_tensor({3, 5}, 7));
    for (auto dir : {KlDirection::student_first, KlDirection::teacher_first}) {
      zs.zero_grad();
      zt.zero_grad();
      distillation_term(zs, zt, 2.0, dir).backward();
      const TD gt = zt.grad();
      const TD gs = zs.grad();
      for (double g : gt.values()) CHECK(g == 0.0);
      double norm = 0;
      for (double g : gs.values()) norm += g * g;
      CHECK(norm > 0);
    }
  }
  SUBCASE("strictly positive when distributions differ (property)") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const double k = distillation_term(V::constant(random_tensor({2, 6}, 40 + seed)),
                                         V::constant(random_tensor({2, 6}, 80 + seed)), 1.0,
                                         KlDirection::student_first)
                           .value()
                           .item();
      CHECK(k > 0.0);
    }
  }
}

TEST_CASE("distill loss") {
  ModelConfig c = toy_config();
  const E model = E::init(c, 31);
  const auto batch = toy_mlm_batch(2, 12, c.vocab, 32);
  const auto& grid = c.granularity;
  const auto mrl = matryoshka_mlm_loss(model, batch);

  DistillPlan plan = build_distill_plan(DistillMode::all_from_top, Cell{4, 32}, std::nullopt, grid);
  CHECK(plan.pairs.size() == grid.grid_size() - 1);
  const auto with = distill_loss(model, batch, plan, grid);
  REQUIRE(with.aux.has_value());
  CHECK(*with.aux > 0.0);
  CHECK(rel(with.total, mrl.total + *with.aux) < 1e-9);
  double parts = 0;
  for (const auto& [cell, v] : with.per_pair) parts += v;
  CHECK(rel(with.total, parts + plan.lambda_d * *with.aux) < 1e-9);

  plan.lambda_d = 0.0;
  const auto zero = distill_loss(model, batch, plan, grid);
  CHECK(zero.total == mrl.total);
  CHECK(zero.objective.value().item() == mrl.objective.value().item());

  DistillPlan bad = plan;
  bad.pairs.push_back({Cell{4, 32}, Cell{4, 64}});
  CHECK_THROWS_AS(distill_loss(model, batch, bad, grid), DimensionError);
  bad.pairs.back() = {Cell{4, 32}, Cell{4, 32}};
  CHECK_THROWS_AS(distill_loss(model, batch, bad, grid), ConfigError);
}

TEST_CASE("build_distill_plan") {
  const GranularitySet grid{{4, 8, 12}, {32, 64, 128, 768}};
  const auto all = build_distill_plan(DistillMode::all_from_top, Cell{12, 768}, std::nullopt, grid);
  CHECK(all.pairs.size() == 11);
  for (const auto& p : all.pairs) {
    CHECK(p.teacher == Cell{12, 768});
    CHECK(p.student != p.teacher);
  }
  const auto one = build_distill_plan(DistillMode::single_pair, Cell{12, 64}, Cell{4, 64}, grid);
  REQUIRE(one.pairs.size() == 1);
  CHECK(one.pairs[0] == DistillPair{Cell{12, 64}, Cell{4, 64}});
  CHECK(one.lambda_d == 1.0);
  CHECK(one.tau_d == 1.0);
  CHECK_THROWS_AS(build_distill_plan(DistillMode::single_pair, Cell{12, 64}, std::nullopt, grid), ConfigError);
  CHECK_THROWS_AS(build_distill_plan(DistillMode::single_pair, Cell{12, 64}, Cell{12, 64}, grid), ConfigError);
  CHECK_THROWS_AS(build_distill_plan(DistillMode::all_from_top, Cell{6, 64}, std::nullopt, grid), ConfigError);
}

TEST_CASE("objective gradients pass grad_check on a small model") {
  ModelConfig c = toy_config(2, 16, 37, 8);
  c.granularity = {{1, 2}, {4, 16}};
  const E model = E::init(c, 41);
  auto params = test::all_params(model);
  GradCheckOptions opt;
  opt.max_coords = 120;
  const auto mlm = toy_mlm_batch(2, 8, c.vocab, 42);
  const auto pairs = toy_pair_batch(3, 8, c.vocab, 43);
  CHECK(grad_check([&] { return matryoshka_mlm_loss(model, mlm).objective; }, params, opt).max_rel_error < 1e-4);
  CHECK(grad_check([&] { return mrl_sft_loss(model, pairs, {4, 16}, 2, 0.05).objective; }, params, opt)
            .max_rel_error < 1e-4);
  CHECK(grad_check([&] { return mrl_sft_loss(model, pairs, {4, 16}, 1, 0.05, TileConfig{2}).objective; }, params,
                   opt)
            .max_rel_error < 1e-4);
  const auto plan = build_distill_plan(DistillMode::all_from_top, Cell{2, 16}, std::nullopt, c.granularity);
  const E frozen(model.config(), model.params().clone());
  CHECK(grad_check([&] { return distill_loss(model, mlm, plan, c.granularity, {}, &frozen).objective; }, params,
                   opt)
            .max_rel_error < 1e-4);
}

TEST_CASE("self-distillation gradient equals the frozen-teacher gradient") {
  ModelConfig c = toy_config(2, 16, 37, 8);
  c.granularity = {{1, 2}, {4, 16}};
  const E model = E::init(c, 51);
  const E frozen(model.config(), model.params().clone());
  const auto mlm = toy_mlm_batch(2, 8, c.vocab, 52);
  const auto plan = build_distill_plan(DistillMode::all_from_top, Cell{2, 16}, std::nullopt, c.granularity);
  auto params = test::all_params(model);

  const auto self = distill_loss(model, mlm, plan, c.granularity);
  const auto snap = distill_loss(model, mlm, plan, c.granularity, {}, &frozen);
  CHECK(self.total == snap.total);
  Var<double>(self.objective).backward();
  std::vector<TD> g_self;
  for (auto& p : params) {
    g_self.push_back(p.grad());
    p.zero_grad();
  }
  Var<double>(snap.objective).backward();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const TD g = params[i].grad();
    for (std::size_t k = 0; k < g.numel(); ++k) CHECK(std::abs(g[k] - g_self[i][k]) <= 1e-12 * (1 + std::abs(g[k])));
    params[i].zero_grad();
  }
}
