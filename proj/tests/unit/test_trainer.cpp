// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "m3/trainer/checkpoint.hpp"
#include "m3/trainer/optimizer.hpp"
#include "m3/trainer/trainer.hpp"
#include "test_util.hpp"

using namespace m3;
namespace fs = std::filesystem;
using TD = Tensor<double>;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "m3_test_trainer" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ParameterSet<double> single_param(TD value, TD grad) {
  ParameterSet<double> ps;
  ps.add("w", std::move(value));
  ps.at("w").node()->grad = std::move(grad);
  return ps;
}

StageConfig mlm_stage(std::uint64_t steps, double lr = 3e-3) {
  StageConfig s;
  s.name = "mlm";
  s.kind = StageKind::pretrain_mlm;
  s.data = "corpus";
  s.steps = steps;
  s.batch_size = 8;
  s.lr = lr;
  s.warmup_steps = std::max<std::uint64_t>(1, steps / 10);
  return s;
}

}  // namespace

TEST_CASE("adamw closed forms") {
  const TD p0 = test::random_tensor({3, 4}, 1);
  SUBCASE("lr = 0 leaves parameters unchanged") {
    auto ps = single_param(p0, test::random_tensor({3, 4}, 2));
    auto st = OptimizerState<double>::zeros(ps, {});
    adamw_step(ps, st, 0.0);
    CHECK(test::bit_equal(ps.at("w").value(), p0));
    CHECK(st.t == 1);
  }
  SUBCASE("zero gradient applies only decoupled decay") {
    auto ps = single_param(p0, TD(Shape{3, 4}));
    auto st = OptimizerState<double>::zeros(ps, {});
    adamw_step(ps, st, 0.1);
    for (std::size_t i = 0; i < p0.numel(); ++i) CHECK(ps.at("w").value()[i] == doctest::Approx(0.999 * p0[i]).epsilon(1e-15));
  }
  SUBCASE("first step is a sign update") {
    const TD g = test::random_tensor({3, 4}, 3);
    for (double factor : {1.0, 0.5, 2.0, 10.0}) {
      TD scaled = g;
      for (auto& x : scaled.values()) x *= factor;
      auto ps = single_param(p0, scaled);
      auto st = OptimizerState<double>::zeros(ps, AdamWConfig{0.9, 0.999, 1e-12, 0.0});
      adamw_step(ps, st, 0.01);
      for (std::size_t i = 0; i < p0.numel(); ++i) {
        const double expect = p0[i] - 0.01 * (g[i] > 0 ? 1.0 : -1.0);
        CHECK(std::abs(ps.at("w").value()[i] - expect) <= 1e-6 * std::abs(expect));
      }
    }
  }
  SUBCASE("non-finite gradient aborts without side effects") {
    TD g = test::random_tensor({3, 4}, 4);
    g[5] = std::numeric_limits<double>::quiet_NaN();
    auto ps = single_param(p0, g);
    auto st = OptimizerState<double>::zeros(ps, {});
    CHECK_THROWS_AS(adamw_step(ps, st, 0.1), NumericError);
    CHECK(st.t == 0);
    CHECK(test::bit_equal(ps.at("w").value(), p0));
    for (double m : st.m[0].values()) CHECK(m == 0.0);
  }
  SUBCASE("bad inputs") {
    auto ps = single_param(p0, TD(Shape{3, 4}));
    auto st = OptimizerState<double>::zeros(ps, {});
    CHECK_THROWS_AS(adamw_step(ps, st, -1.0), ConfigError);
    ParameterSet<double> other;
    other.add("w", TD(Shape{2, 2}));
    CHECK_THROWS_AS(adamw_step(other, st, 0.1), DimensionError);
    CHECK_THROWS_AS(OptimizerState<double>::zeros(ps, AdamWConfig{1.0, 0.999, 1e-8, 0.01}), ConfigError);
  }
}

TEST_CASE("adamw matches a scalar reference over several steps") {
  const TD p0 = test::random_tensor({5}, 5);
  ParameterSet<double> ps;
  ps.add("w", p0);
  const AdamWConfig c{0.9, 0.999, 1e-8, 0.01};
  auto st = OptimizerState<double>::zeros(ps, c);
  std::vector<long double> p(p0.values().begin(), p0.values().end()), m(5, 0), v(5, 0);
  for (int t = 1; t <= 6; ++t) {
    const TD g = test::random_tensor({5}, 100 + static_cast<std::uint64_t>(t));
    ps.at("w").node()->grad = g;
    const double lr = 0.05 / t;
    adamw_step(ps, st, lr);
    for (std::size_t i = 0; i < 5; ++i) {
      m[i] = 0.9L * m[i] + 0.1L * g[i];
      v[i] = 0.999L * v[i] + 0.001L * g[i] * g[i];
      const long double mh = m[i] / (1 - std::pow(0.9L, t));
      const long double vh = v[i] / (1 - std::pow(0.999L, t));
      p[i] -= lr * (mh / (std::sqrt(vh) + 1e-8L) + 0.01L * p[i]);
    }
  }
  for (std::size_t i = 0; i < 5; ++i) CHECK(ps.at("w").value()[i] == doctest::Approx(static_cast<double>(p[i])).epsilon(1e-12));
  CHECK(st.t == 6);
}

TEST_CASE("clip_grad_norm") {
  auto ps = single_param(TD(Shape{2}), TD::vector({3.0, 4.0}));
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(ps.at("w").node()->grad[0] == doctest::Approx(0.6));
  CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(1.0));
  CHECK(ps.at("w").node()->grad[1] == doctest::Approx(0.8));
}

TEST_CASE("cosine_lr") {
  const Schedule s{1e-3, 10, 110, 1e-5};
  CHECK(cosine_lr(s, 0) == 0.0);
  CHECK(cosine_lr(s, 10) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(cosine_lr(s, 110) == doctest::Approx(1e-5).epsilon(1e-15));
  CHECK(cosine_lr(s, 60) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
  CHECK(cosine_lr(s, 500) == 1e-5);
  CHECK(cosine_lr(s, 5) == doctest::Approx(5e-4));
  // Continuity at the warm-up boundary and monotone decay after it.
  CHECK(std::abs(cosine_lr(s, 11) - cosine_lr(s, 10)) < 1e-3 * 0.01);
  for (std::uint64_t k = 10; k < 110; ++k) CHECK(cosine_lr(s, k + 1) <= cosine_lr(s, k));
  for (std::uint64_t k = 0; k < 10; ++k) CHECK(cosine_lr(s, k + 1) > cosine_lr(s, k));
  CHECK_THROWS_AS((Schedule{1e-3, 0, 10, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((Schedule{1e-3, 20, 10, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((Schedule{1e-3, 1, 10, 1.0}.validate()), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  const fs::path dir = scratch("roundtrip");
  const ModelConfig cfg = test::toy_config();
  auto model = Encoder<double>::init(cfg, 3);
  Checkpoint<double> ck;
  ck.config = cfg;
  ck.params = model.params().clone();
  ck.optimizer = OptimizerState<double>::zeros(ck.params, {});
  ck.optimizer->m[0] = test::random_tensor(ck.optimizer->m[0].shape(), 9);
  ck.optimizer->t = 17;
  Rng rng(5);
  rng.normal();
  ck.rng_state = rng.serialize();
  ck.seed = 42;
  ck.step = 17;
  ck.stage = "mlm";
  ck.vocab = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "héllo"};

  save_checkpoint(ck, dir / "a.ckpt");
  const auto back = load_checkpoint<double>(dir / "a.ckpt");
  CHECK(back.config == cfg);
  CHECK(back.params.fingerprint() == ck.params.fingerprint());
  for (const auto& [name, var] : ck.params) CHECK(test::bit_equal(back.params.at(name).value(), var.value()));
  REQUIRE(back.optimizer.has_value());
  CHECK(back.optimizer->t == 17);
  CHECK(test::bit_equal(back.optimizer->m[0], ck.optimizer->m[0]));
  CHECK(back.rng_state == ck.rng_state);
  CHECK(back.vocab == ck.vocab);
  CHECK(back.step == 17);
  CHECK(back.stage == "mlm");

  save_checkpoint(back, dir / "b.ckpt");
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  const auto as_float = load_checkpoint<float>(dir / "a.ckpt");
  CHECK(as_float.params.at("embed.tokens").value()[3] ==
        static_cast<float>(ck.params.at("embed.tokens").value()[3]));
}

TEST_CASE("checkpoint integrity") {
  const fs::path dir = scratch("integrity");
  const ModelConfig cfg = test::toy_config(3, 24, 31, 8);
  Checkpoint<float> ck;
  ck.config = cfg;
  ck.params = Encoder<float>::init(cfg, 1).params().clone();
  save_checkpoint(ck, dir / "ok.ckpt");
  const std::string bytes = slurp(dir / "ok.ckpt");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };

  std::string flipped = bytes;
  flipped[bytes.size() - 7] = static_cast<char>(flipped[bytes.size() - 7] ^ 0x01);
  CHECK_THROWS_AS(load_checkpoint<float>(write("flip.ckpt", flipped)), IntegrityError);
  CHECK_THROWS_AS(load_checkpoint<float>(write("short.ckpt", bytes.substr(0, bytes.size() - 100))), IntegrityError);
  CHECK_THROWS_AS(load_checkpoint<float>(write("tiny.ckpt", bytes.substr(0, 10))), IntegrityError);
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint<float>(write("magic.ckpt", magic)), IntegrityError);
  std::string version = bytes;
  version[4] = 2;
  CHECK_THROWS_AS(load_checkpoint<float>(write("version.ckpt", version)), VersionError);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.ckpt"), DataError);
}

TEST_CASE("stage config json") {
  const ModelConfig cfg = test::toy_config();
  const auto j = nlohmann::json::parse(R"({"name": "s1", "kind": "pretrain_mlm", "data": "corpus", "steps": 10,
      "granularity": {"layers": [2, 4], "dims": [8, 32]}, "mask_policy": "mask_only"})");
  const auto s = j.get<StageConfig>();
  CHECK(s.mask_policy == MaskPolicy::mask_only);
  CHECK_NOTHROW(s.validate(cfg));
  CHECK(nlohmann::json(s).get<StageConfig>().grid(cfg) == s.grid(cfg));

  auto bad = j;
  bad["tua"] = 0.05;
  CHECK_THROWS_WITH_AS(bad.get<StageConfig>(), "stage 's1': unknown key 'tua'", ConfigError);
  bad = j;
  bad["distill"] = nlohmann::json::object();
  CHECK_THROWS_AS(bad.get<StageConfig>(), ConfigError);
  bad = j;
  bad["granularity"]["dims"] = {8, 64};
  try {
    bad.get<StageConfig>().validate(cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stage 's1'.granularity") != std::string::npos);
  }

  const auto sft = nlohmann::json::parse(
      R"({"name": "ft", "kind": "sft", "data": "pairs", "steps": 5, "layer": 4, "dim": 99})").get<StageConfig>();
  CHECK_THROWS_AS(sft.validate(cfg), ConfigError);
  const auto d = nlohmann::json::parse(R"({"name": "kd", "kind": "distill", "data": "corpus", "steps": 5,
      "distill": {"mode": "single_pair", "teacher": "L4-D32", "student": "L2-D8", "lambda": 0.5}})")
                     .get<StageConfig>();
  CHECK_NOTHROW(d.validate(cfg));
  CHECK(d.distill_plan(cfg).pairs.size() == 1);
  CHECK(d.distill_plan(cfg).lambda_d == 0.5);
}

TEST_CASE("run_stage: zero steps and determinism") {
  const ModelConfig cfg = test::toy_config();
  const auto data = test::toy_data(cfg.vocab, 16);
  const StageData sd{&data.mlm, &data.pairs};
  MemorySink sink;

  TrainState<double> zero{Encoder<double>::init(cfg, 1), std::nullopt, Rng(0), 7, 0, "", {}};
  const auto before = zero.model.params().fingerprint();
  const auto r0 = run_stage(mlm_stage(0), zero, sd, sink);
  CHECK(r0.steps_run == 0);
  CHECK(r0.completed);
  CHECK(zero.model.params().fingerprint() == before);

  auto run = [&](bool prefetch) {
    TrainState<double> st{Encoder<double>::init(cfg, 1), std::nullopt, Rng(0), 7, 0, "", {}};
    RunOptions opts;
    opts.prefetch = prefetch;
    run_stage(mlm_stage(6), st, sd, sink, opts);
    return st.model.params().clone();
  };
  const auto a = run(false);
  const auto b = run(false);
  const auto c = run(true);
  for (const auto& [name, var] : a) {
    CHECK(test::bit_equal(var.value(), b.at(name).value()));
    CHECK(test::bit_equal(var.value(), c.at(name).value()));
  }
  CHECK(a.fingerprint() != before);
  const auto& row = sink.rows.back();
  CHECK(row.at("stage") == "mlm");
  CHECK(row.at("step") == 6);
  CHECK(row.contains("L2-D8"));
  CHECK(row.contains("L4-D32"));
  CHECK(row.contains("wall_ms"));
  CHECK(row.contains("lr"));
  double sum = 0;
  for (const auto& cell : cfg.granularity.cells()) sum += row.at(cell.label()).get<double>();
  CHECK(row.at("total").get<double>() == doctest::Approx(sum).epsilon(1e-12));
}

TEST_CASE("run_stage: toy MLM training lowers the loss") {
  const ModelConfig cfg = test::toy_config(4, 32, 101, 16);
  const auto data = test::toy_data(cfg.vocab, 16);
  const StageData sd{&data.mlm, &data.pairs};
  int improved = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainState<float> st{Encoder<float>::init(cfg, seed), std::nullopt, Rng(0), seed, 0, "", {}};
    const StageConfig stage = mlm_stage(200);
    // The same held-out batch before and after training.
    const double initial = stage_loss(stage, st.model, sd, seed + 100, 0).total;
    MemorySink sink;
    run_stage(stage, st, sd, sink);
    const double final_loss = stage_loss(stage, st.model, sd, seed + 100, 0).total;
    MESSAGE("seed " << seed << ": " << initial << " -> " << final_loss);
    improved += final_loss < initial ? 1 : 0;
  }
  CHECK(improved >= 2);
}

TEST_CASE("run_stage: resume matches an unbroken run") {
  ModelConfig cfg = test::toy_config();
  cfg.hidden_dropout = 0.1;
  const auto data = test::toy_data(cfg.vocab, 16);
  const StageData sd{&data.mlm, &data.pairs};
  const fs::path dir = scratch("resume");
  StageConfig stage = mlm_stage(10);
  stage.checkpoint_every = 5;

  MemorySink whole;
  TrainState<double> a{Encoder<double>::init(cfg, 2), std::nullopt, Rng(0), 9, 0, "", {}};
  run_stage(stage, a, sd, whole);

  MemorySink first, second;
  TrainState<double> b{Encoder<double>::init(cfg, 2), std::nullopt, Rng(0), 9, 0, "", {}};
  RunOptions opts;
  opts.checkpoint_dir = dir;
  opts.stop_at = 5;
  const auto partial = run_stage(stage, b, sd, first, opts);
  CHECK_FALSE(partial.completed);
  auto resumed = TrainState<double>::from_checkpoint(load_checkpoint<double>(dir / "mlm.last.ckpt"));
  CHECK(resumed.step == 5);
  run_stage(stage, resumed, sd, second);

  REQUIRE(first.rows.size() + second.rows.size() == whole.rows.size());
  for (std::size_t i = 0; i < whole.rows.size(); ++i) {
    const auto& r = i < 5 ? first.rows[i] : second.rows[i - 5];
    const double expect = whole.rows[i].at("total").get<double>();
    CHECK(std::abs(r.at("total").get<double>() - expect) <= 1e-12 * std::abs(expect));
  }
  for (const auto& [name, var] : a.model.params()) {
    CHECK(test::bit_equal(var.value(), resumed.model.params().at(name).value()));
  }
}

TEST_CASE("run_stage: divergence aborts and keeps the last good checkpoint") {
  const ModelConfig cfg = test::toy_config();
  const auto data = test::toy_data(cfg.vocab, 16);
  const StageData sd{&data.mlm, &data.pairs};
  const fs::path dir = scratch("nan");
  StageConfig stage = mlm_stage(20, 1e30);
  stage.warmup_steps = 1;
  stage.checkpoint_every = 1;
  TrainState<float> st{Encoder<float>::init(cfg, 1), std::nullopt, Rng(0), 1, 0, "", {}};
  MemorySink sink;
  RunOptions opts;
  opts.checkpoint_dir = dir;
  CHECK_THROWS_AS(run_stage(stage, st, sd, sink, opts), NumericError);
  CHECK(st.step < 20);
  const bool have_last = fs::exists(dir / "mlm.last.ckpt");
  const bool have_good = fs::exists(dir / "mlm.last_good.ckpt");
  REQUIRE((have_last || have_good));
  const auto ck = load_checkpoint<float>(have_good ? dir / "mlm.last_good.ckpt" : dir / "mlm.last.ckpt");
  for (const auto& [name, var] : ck.params) CHECK(var.value().all_finite());
  CHECK(ck.step <= st.step);
}

TEST_CASE("stages chain through shared parameters") {
  const ModelConfig cfg = test::toy_config();
  const auto data = test::toy_data(cfg.vocab, 16);
  const StageData sd{&data.mlm, &data.pairs};
  TrainState<double> st{Encoder<double>::init(cfg, 1), std::nullopt, Rng(0), 3, 0, "", {}};
  MemorySink sink;
  run_stage(mlm_stage(3), st, sd, sink);
  const auto after_mlm = st.model.params().fingerprint();

  StageConfig sft;
  sft.name = "sft";
  sft.kind = StageKind::sft_mrl;
  sft.data = "pairs";
  sft.steps = 3;
  sft.layer = 4;
  sft.dims = {8, 32};
  sft.tile = 4;
  const auto ck = st.to_checkpoint();
  CHECK(ck.params.fingerprint() == after_mlm);
  run_stage(sft, st, sd, sink);
  CHECK(st.stage == "sft");
  CHECK(st.step == 3);
  CHECK(st.optimizer->t == 3);
  CHECK(sink.rows.back().contains("L4-D8"));
  CHECK(sink.rows.back().contains("L4-D32"));
  CHECK(st.model.params().fingerprint() != after_mlm);
}
