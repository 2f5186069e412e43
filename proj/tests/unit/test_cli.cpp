// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "m3/cli/commands.hpp"
#include "m3/evalkit/evalkit.hpp"
#include "m3/trainer/checkpoint.hpp"
#include "test_util.hpp"

using namespace m3;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Invocation {
  int code = -1;
  std::string out;
  std::string err;
};

Invocation invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Invocation r;
  r.code = cli::run(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

/// A fresh directory holding synthetic data and a tiny config.
struct Workspace {
  fs::path dir;

  explicit Workspace(const std::string& name) {
    dir = fs::temp_directory_path() / ("m3_cli_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    const auto r = invoke({"synth", "--output", dir.string(), "--corpus-docs", "300", "--docs", "120", "--queries",
                           "30", "--train-pairs", "200"});
    REQUIRE(r.code == 0);
    json c = read_json(dir / "toy.json");
    c["model"] = {{"n_layers", 3},
                  {"hidden", 16},
                  {"n_heads", 2},
                  {"vocab", 300},
                  {"max_seq", 16},
                  {"granularity", {{"layers", {1, 3}}, {"dims", {8, 16}}}}};
    c["seq"] = 16;
    for (auto& s : c["stages"]) {
      s["steps"] = 3;
      s["batch_size"] = 8;
      if (s.contains("granularity")) s["granularity"] = {{"layers", {1, 3}}, {"dims", {8}}};
      if (s.contains("tile")) s["tile"] = 4;
      if (s.contains("layer")) s["layer"] = 1;
      if (s.contains("dims")) s["dims"] = {8, 16};
    }
    c["eval"]["layer"] = 1;
    c["eval"]["dim"] = 16;
    c["eval"]["k"] = {1, 10};
    write_json(config(), c);
  }
  ~Workspace() { fs::remove_all(dir); }

  fs::path config() const { return dir / "toy.json"; }
  json read_config() const { return read_json(config()); }
  fs::path out(const std::string& name) const { return dir / name; }
};

ModelConfig model_of(const Workspace& w) { return w.read_config().at("model").get<ModelConfig>(); }

std::size_t count(const ModelConfig& c) { return Encoder<float>::init(c, 0).params().element_count(); }

}  // namespace

TEST_CASE("pretrain with zero steps writes the initialization") {
  Workspace w("zero");
  const auto r = invoke({"pretrain", "--config", w.config().string(), "--steps", "0", "--output",
                         w.out("run").string(), "--threads", "1"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const ModelConfig mc = model_of(w);
  const auto init = Encoder<float>::init(mc, Rng::derive_seed(w.read_config().at("seed").get<std::uint64_t>(), "init"));
  for (const char* file : {"stage1.ckpt", "stage3.ckpt", "pretrain.final.ckpt"}) {
    const auto ck = load_checkpoint<float>(w.out("run") / file);
    CHECK(ck.config == mc);
    for (const auto& [name, v] : init.params()) {
      const auto& a = v.value();
      const auto& b = ck.params.at(name).value();
      REQUIRE(a.shape() == b.shape());
      bool same = true;
      for (std::size_t i = 0; i < a.numel(); ++i) same = same && a[i] == b[i];
      CHECK_MESSAGE(same, name);
    }
  }
}

TEST_CASE("config errors exit 2 and name the field") {
  Workspace w("errors");
  auto expect_config_error = [&](const json& c, const std::string& needle) {
    write_json(w.config(), c);
    const auto r = invoke({"pretrain", "--config", w.config().string()});
    CHECK(r.code == cli::kExitConfig);
    CHECK_MESSAGE(r.err.find(needle) != std::string::npos, r.err);
    const auto e = json::parse(r.err.substr(r.err.find('{')));
    CHECK(e.at("error") == "config");
  };
  const json base = w.read_config();

  json c = base;
  c["stages"][3]["dims"] = {8, 12};
  expect_config_error(c, "stages[3].dim");

  c = base;
  c["stages"][3]["layer"] = 2;
  expect_config_error(c, "stages[3].layer");

  c = base;
  c["stages"][2]["granularity"]["dims"] = {8, 32};
  expect_config_error(c, "stages[2]");

  c = base;
  c["stages"][0]["stepz"] = 3;
  expect_config_error(c, "stepz");

  c = base;
  c["data"]["corpus"]["path"] = "missing.txt";
  expect_config_error(c, "missing.txt");

  c = base;
  c["stages"][1]["name"] = "stage1";
  expect_config_error(c, "stage1");

  write_json(w.config(), base);
  const auto r = invoke({"pretrain", "--config", w.config().string(), "--bogus"});
  CHECK(r.code == cli::kExitConfig);
}

TEST_CASE("stages chain through fingerprints and runs are bit-reproducible") {
  Workspace w("chain");
  const auto before = slurp(w.dir / "corpus.txt") + slurp(w.dir / "train.tsv");
  for (const char* out : {"a", "b"}) {
    const auto r = invoke({"pretrain", "--config", w.config().string(), "--output", w.out(out).string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
  CHECK(slurp(w.dir / "corpus.txt") + slurp(w.dir / "train.tsv") == before);
  CHECK(slurp(w.out("a") / "pretrain.final.ckpt") == slurp(w.out("b") / "pretrain.final.ckpt"));

  const json stages = read_json(w.out("a") / "pretrain.stages.json");
  REQUIRE(stages.size() == 3);
  const ModelConfig mc = model_of(w);
  const auto init = Encoder<float>::init(mc, Rng::derive_seed(w.read_config().at("seed").get<std::uint64_t>(), "init"));
  CHECK(stages[0].at("start_fingerprint") == init.params().fingerprint());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    CHECK(stages[i].at("steps_run") == 3);
    CHECK(stages[i].at("start_fingerprint") != stages[i].at("end_fingerprint"));
    if (i > 0) CHECK(stages[i].at("start_fingerprint") == stages[i - 1].at("end_fingerprint"));
    const auto ck = load_checkpoint<float>(w.out("a") / (stages[i].at("name").get<std::string>() + ".ckpt"));
    CHECK(Encoder<float>(ck.config, ck.params).params().fingerprint() == stages[i].at("end_fingerprint"));
  }
  std::ifstream metrics(w.out("a") / "stage2.metrics.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(metrics, line)) {
    const auto j = json::parse(line);
    CHECK(j.at("stage") == "stage2");
    for (const char* key : {"L1-D8", "L1-D16", "L3-D8", "L3-D16", "total", "lr", "wall_ms"}) CHECK(j.contains(key));
    ++rows;
  }
  CHECK(rows == 3);
}

TEST_CASE("sft_mrl from a pretrained checkpoint logs per-dim losses") {
  Workspace w("sft");
  REQUIRE(invoke({"pretrain", "--config", w.config().string(), "--output", w.out("run").string()}).code == 0);
  const auto pre = load_checkpoint<float>(w.out("run") / "pretrain.final.ckpt");
  const auto r = invoke({"sft", "--config", w.config().string(), "--output", w.out("run").string(), "--resume",
                         (w.out("run") / "pretrain.final.ckpt").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json stages = read_json(w.out("run") / "sft.stages.json");
  REQUIRE(stages.size() == 1);
  CHECK(stages[0].at("start_fingerprint") == Encoder<float>(pre.config, pre.params).params().fingerprint());
  std::ifstream metrics(w.out("run") / "sft.metrics.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(metrics, line)) {
    const auto j = json::parse(line);
    CHECK(j.contains("L1-D8"));
    CHECK(j.contains("L1-D16"));
    CHECK_FALSE(j.contains("L3-D8"));
    CHECK(j.at("L1-D8").get<double>() > 0);
    CHECK(j.at("total").get<double>() ==
          doctest::Approx(j.at("L1-D8").get<double>() + j.at("L1-D16").get<double>()).epsilon(1e-6));
    ++rows;
  }
  CHECK(rows == 3);

  // Resuming from a file this run would overwrite is refused.
  const auto again = invoke({"sft", "--config", w.config().string(), "--output", w.out("run").string(), "--resume",
                             (w.out("run") / "sft.final.ckpt").string()});
  CHECK(again.code == cli::kExitConfig);
}

TEST_CASE("eval and sweep") {
  Workspace w("eval");
  REQUIRE(invoke({"pretrain", "--config", w.config().string(), "--output", w.out("run").string()}).code == 0);
  const std::string ckpt = (w.out("run") / "pretrain.final.ckpt").string();
  const std::string cfg = w.config().string();

  SUBCASE("twice gives identical recall and matches the library") {
    const auto a = invoke({"eval", "--checkpoint", ckpt, "--config", cfg, "--output", w.out("e1").string()});
    const auto b = invoke({"eval", "--checkpoint", ckpt, "--config", cfg, "--output", w.out("e2").string()});
    REQUIRE_MESSAGE(a.code == 0, a.err);
    REQUIRE(b.code == 0);
    const json ja = read_json(w.out("e1") / "eval.json");
    const json jb = read_json(w.out("e2") / "eval.json");
    CHECK(ja.at("recall") == jb.at("recall"));
    CHECK(slurp(w.out("e1") / "eval.csv") == slurp(w.out("e2") / "eval.csv"));

    const auto ck = load_checkpoint<float>(ckpt);
    const Encoder<float> model(ck.config, ck.params);
    const Vocab vocab = Vocab::from_tokens(ck.vocab);
    const EvalSet set = EvalSet::load(w.dir / "docs.tsv", w.dir / "queries.tsv");
    const EvalReport lib = evaluate(model, vocab, set, 1, 16, {1, 10}, 16);
    for (auto k : {1, 10}) CHECK(ja.at("recall").at(std::to_string(k)).get<double>() == lib.recall.at(k));
    CHECK(ja.at("layer") == 1);
    CHECK(ja.at("dim") == 16);
  }

  SUBCASE("dim beyond the width exits 2") {
    const auto r = invoke({"eval", "--checkpoint", ckpt, "--config", cfg, "--dim", "32", "--output",
                           w.out("e").string()});
    CHECK(r.code == cli::kExitConfig);
    CHECK(r.err.find("--dim") != std::string::npos);
    const auto s = invoke({"sweep", "--checkpoint", ckpt, "--config", cfg, "--axis", "dim", "--values", "8,32",
                           "--output", w.out("s").string()});
    CHECK(s.code == cli::kExitConfig);
  }

  SUBCASE("missing checkpoint is a runtime error") {
    const auto r = invoke({"eval", "--checkpoint", (w.dir / "nope.ckpt").string(), "--config", cfg});
    CHECK(r.code == cli::kExitRuntime);
  }

  SUBCASE("a four-value sweep gives four points") {
    const auto r = invoke({"sweep", "--checkpoint", ckpt, "--config", cfg, "--axis", "dim", "--values",
                           "2,4,8,16", "--k", "10", "--layer", "1", "--output", w.out("s").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    std::ifstream csv(w.out("s") / "sweep.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "axis_value,K,recall,cost_proxy");
    std::vector<std::string> values;
    while (std::getline(csv, line)) values.push_back(line.substr(0, line.find(',')));
    CHECK(values == std::vector<std::string>{"2", "4", "8", "16"});
    const json j = read_json(w.out("s") / "sweep.json");
    CHECK(j.at("points").size() == 4);
    CHECK(j.at("fixed") == 1);
  }
}

TEST_CASE("ablate emits every arm with analytic parameter deltas") {
  Workspace w("ablate");
  const auto r = invoke({"ablate", "--config", w.config().string(), "--output", w.out("abl").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::ifstream csv(w.out("abl") / "ablation.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "arm,params,param_delta,recall@1,recall@10");
  std::vector<std::string> arms;
  std::vector<long long> params, deltas;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string arm, p, d;
    std::getline(ss, arm, ',');
    std::getline(ss, p, ',');
    std::getline(ss, d, ',');
    arms.push_back(arm);
    params.push_back(std::stoll(p));
    deltas.push_back(std::stoll(d));
  }
  CHECK(arms == std::vector<std::string>{"base", "-SwiGLU", "-Pre-norm", "-RMSNorm", "+Dropout", "+Bias"});
  CHECK(arms == cli::ablation_arms());

  // Closed-form counts, independent of the parameter layout code.
  const ModelConfig mc = model_of(w);
  const long long M = mc.hidden, N = mc.n_layers, V = mc.vocab, S = mc.max_seq;
  const long long F = std::llround(8.0 / 3.0 * static_cast<double>(M));
  const long long base = V * M + S * M + N * (2 * M + 4 * M * M + 3 * M * F) + M + M * V + V;
  CHECK(params[0] == base);
  CHECK(static_cast<std::size_t>(base) == count(mc));
  const std::vector<long long> expected{0, N * (2 * M * 4 * M - 3 * M * F), 0, (2 * N + 1) * M, 0,
                                        N * (4 * M + 2 * F + M)};
  for (std::size_t i = 0; i < arms.size(); ++i) {
    CHECK_MESSAGE(deltas[i] == expected[i], arms[i]);
    CHECK(params[i] == base + expected[i]);
  }

  // The base arm is the plain pretrain, sft, eval pipeline.
  const std::string cfg = w.config().string();
  REQUIRE(invoke({"pretrain", "--config", cfg, "--output", w.out("p").string()}).code == 0);
  REQUIRE(invoke({"sft", "--config", cfg, "--output", w.out("p").string(), "--resume",
                  (w.out("p") / "pretrain.final.ckpt").string()})
              .code == 0);
  REQUIRE(invoke({"eval", "--checkpoint", (w.out("p") / "sft.final.ckpt").string(), "--config", cfg, "--output",
                  w.out("pe").string()})
              .code == 0);
  const json pipeline = read_json(w.out("pe") / "eval.json");
  const json rows = read_json(w.out("abl") / "ablation.json");
  CHECK(rows[0].at("recall") == pipeline.at("recall"));
  const auto a = load_checkpoint<float>(w.out("abl") / "base" / "ablate.final.ckpt");
  const auto b = load_checkpoint<float>(w.out("p") / "sft.final.ckpt");
  CHECK(Encoder<float>(a.config, a.params).params().fingerprint() ==
        Encoder<float>(b.config, b.params).params().fingerprint());
}
