// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/cli/commands.hpp"

#include <Eigen/Core>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "m3/cli/run_config.hpp"
#include "m3/data/mixture.hpp"
#include "m3/data/pairs.hpp"
#include "m3/data/synthetic.hpp"
#include "m3/evalkit/evalkit.hpp"

namespace m3::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Level { error = 0, info = 1, debug = 2 };

Level log_level() {
  const char* v = std::getenv("M3_LOG");
  if (v == nullptr) return Level::info;
  const std::string s(v);
  if (s == "error") return Level::error;
  if (s == "debug") return Level::debug;
  return Level::info;
}

void log(Level level, const std::string& message) {
  static const Level threshold = log_level();
  if (level > threshold) return;
  static const char* const names[] = {"error", "info", "debug"};
  std::cerr << "[m3 " << names[static_cast<int>(level)] << "] " << message << '\n';
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::optional<std::uint64_t> steps;
  std::optional<std::string> resume;
  int threads = 1;
};

enum class Family { pretrain, sft, distill, all };

bool in_family(StageKind kind, Family f) {
  switch (f) {
    case Family::pretrain: return kind == StageKind::pretrain_mlm || kind == StageKind::pretrain_contrastive;
    case Family::sft: return kind == StageKind::sft || kind == StageKind::sft_mrl;
    case Family::distill: return kind == StageKind::distill;
    case Family::all: return true;
  }
  return false;
}

std::vector<std::string> nonempty_lines(const fs::path& p) {
  std::vector<std::string> out;
  for (auto& line : read_utf8_lines(p)) {
    if (!split_words(line).empty()) out.push_back(std::move(line));
  }
  return out;
}

struct PairTexts {
  std::vector<std::string> queries;
  std::vector<std::string> docs;
};

PairTexts load_pairs(const DataSourceConfig& src) {
  const fs::path& path = src.files.at(0).second;
  PairStore store = ingest_pairs(path);
  for (const auto& e : store.errors) log(Level::info, "skipped malformed pair line " + e);
  std::vector<PairRecord> recs = std::move(store.records);
  if (src.dedup) recs = dedup_pairs(recs);
  if (src.cap_per_query > 0) recs = cap_per_query(recs, src.cap_per_query);
  if (recs.empty()) throw DataError(path.string() + ": no usable pairs");
  PairTexts out;
  for (auto& r : recs) {
    out.queries.push_back(std::move(r.query));
    out.docs.push_back(std::move(r.doc));
  }
  return out;
}

/// Every text of every source, in source-name order.
Vocab build_vocab(const RunConfig& c, std::size_t max_size) {
  std::vector<std::string> texts;
  for (const auto& [name, src] : c.data) {
    if (src.type == "pairs") {
      auto p = load_pairs(src);
      texts.insert(texts.end(), p.queries.begin(), p.queries.end());
      texts.insert(texts.end(), p.docs.begin(), p.docs.end());
    } else {
      for (const auto& [lang, path] : src.files) {
        auto lines = nonempty_lines(path);
        texts.insert(texts.end(), lines.begin(), lines.end());
      }
    }
  }
  return Vocab::build(texts, max_size);
}

/// Owns the samplers a stage reads.
struct StageInputs {
  std::optional<MlmSampler> mlm;
  std::optional<PairSampler> pairs;
  StageData view() const { return {mlm ? &*mlm : nullptr, pairs ? &*pairs : nullptr}; }
};

void note_dropped(const MlmSampler& m) {
  if (m.dropped_rows() > 0) {
    log(Level::info, "skipped " + std::to_string(m.dropped_rows()) + " documents with no in-vocabulary word");
  }
}

StageInputs build_inputs(const RunConfig& c, const StageConfig& s, const Vocab& vocab, int model_vocab) {
  const DataSourceConfig& src = c.data.at(s.data);
  StageInputs in;
  if (src.type == "pairs") {
    const PairTexts p = load_pairs(src);
    in.pairs.emplace(EncodedCorpus::encode(vocab, p.queries, c.seq), EncodedCorpus::encode(vocab, p.docs, c.seq));
    return in;
  }
  if (src.type == "text") {
    in.mlm.emplace(EncodedCorpus::encode(vocab, nonempty_lines(src.files.at(0).second), c.seq), s.mask_rate,
                   s.mask_policy, model_vocab);
    note_dropped(*in.mlm);
    return in;
  }
  std::vector<std::string> texts;
  std::vector<std::uint32_t> group;
  std::vector<std::pair<std::string, std::size_t>> counts;
  for (std::size_t g = 0; g < src.files.size(); ++g) {
    const auto lines = nonempty_lines(src.files[g].second);
    texts.insert(texts.end(), lines.begin(), lines.end());
    group.insert(group.end(), lines.size(), static_cast<std::uint32_t>(g));
    counts.emplace_back(src.files[g].first, lines.size());
  }
  EncodedCorpus corpus = EncodedCorpus::encode(vocab, texts, c.seq);
  corpus.group = std::move(group);
  LanguageMixture mixture = smooth_mixture(proportions_from_counts(counts), src.smoothing);
  for (std::size_t g = 0; g < mixture.languages.size(); ++g) {
    log(Level::info, "language " + mixture.languages[g] + ": raw " + std::to_string(mixture.raw[g]) +
                         ", sampled " + std::to_string(mixture.smoothed[g]));
  }
  in.mlm.emplace(std::move(corpus), s.mask_rate, s.mask_policy, model_vocab, std::move(mixture));
  note_dropped(*in.mlm);
  return in;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

template <typename T>
struct TrainOutcome {
  TrainState<T> state;
  fs::path final_checkpoint;
  Vocab vocab;
};

/// Runs the stages of `family` in config order and writes checkpoints,
/// metrics and a stage summary under config.output.
template <typename T>
TrainOutcome<T> run_training(const RunConfig& c, Family family, const std::string& command,
                             const std::optional<fs::path>& start) {
  std::vector<const StageConfig*> stages;
  for (const auto& s : c.stages) {
    if (in_family(s.kind, family)) stages.push_back(&s);
  }
  if (stages.empty()) throw ConfigError("stages: config has no stages for '" + command + "'");

  std::optional<TrainState<T>> state;
  std::optional<Vocab> vocab;
  std::size_t first = 0;
  if (start) {
    Checkpoint<T> ck = load_checkpoint<T>(*start);
    if (c.model && *c.model != ck.config) {
      throw ConfigError("model: differs from the configuration stored in " + start->string());
    }
    if (!ck.vocab.empty()) vocab = Vocab::from_tokens(ck.vocab);
    const std::string ck_stage = ck.stage;
    const std::uint64_t ck_step = ck.step;
    state = TrainState<T>::from_checkpoint(std::move(ck));
    auto it = std::find_if(stages.begin(), stages.end(), [&](const StageConfig* s) { return s->name == ck_stage; });
    if (it != stages.end()) {
      first = static_cast<std::size_t>(it - stages.begin());
      if (ck_step >= (*it)->steps) {
        ++first;
        state->stage.clear();
      }
      log(Level::info, "resuming stage '" + ck_stage + "' at step " + std::to_string(ck_step));
    } else {
      state->stage.clear();
      state->step = 0;
      state->optimizer.reset();
      state->seed = c.seed;
      log(Level::info, "starting from " + start->string());
    }
  } else {
    if (!c.model) throw ConfigError("model: required when no init checkpoint is given");
    state = TrainState<T>{Encoder<T>::init(*c.model, Rng::derive_seed(c.seed, "init")), std::nullopt, Rng(0),
                          c.seed, 0, "", {}};
  }
  if (!vocab) {
    vocab = build_vocab(c, static_cast<std::size_t>(state->model.config().vocab));
    log(Level::info, "built vocabulary of " + std::to_string(vocab->size()) + " tokens");
  }
  state->vocab = vocab->tokens();
  state->extra = json{{"seq", c.seq}, {"command", command}};
  c.validate_for(state->model.config());

  if (start) {
    const fs::path in = fs::weakly_canonical(*start);
    std::vector<fs::path> written{c.output / (command + ".final.ckpt")};
    for (std::size_t i = first; i < stages.size(); ++i) {
      for (const char* suffix : {".ckpt", ".last.ckpt", ".last_good.ckpt"}) {
        written.push_back(c.output / (stages[i]->name + suffix));
      }
    }
    for (const auto& w : written) {
      if (fs::weakly_canonical(w) == in) {
        throw ConfigError("--resume: " + start->string() + " would be overwritten by this run; choose another --output");
      }
    }
  }
  fs::create_directories(c.output);
  write_json(c.output / (command + ".config.json"), to_json(c));
  json summary = json::array();
  for (std::size_t i = first; i < stages.size(); ++i) {
    const StageConfig& s = *stages[i];
    const bool resuming = state->stage == s.name;
    const StageInputs inputs = build_inputs(c, s, *vocab, state->model.config().vocab);
    std::ofstream metrics(c.output / (s.name + ".metrics.jsonl"), resuming ? std::ios::app : std::ios::trunc);
    JsonlSink sink(metrics);
    RunOptions opts;
    opts.checkpoint_dir = c.output;
    opts.prefetch = Eigen::nbThreads() > 1;
    const auto start_fp = state->model.params().fingerprint();
    log(Level::info, "stage '" + s.name + "' (" + to_string(s.kind) + "), " + std::to_string(s.steps) + " steps");
    const StageResult r = run_stage(s, *state, inputs.view(), sink, opts);
    if (state->stage.empty()) state->stage = s.name;  // zero-step stage
    save_checkpoint(state->to_checkpoint(), c.output / (s.name + ".ckpt"));
    summary.push_back({{"name", s.name},
                       {"kind", to_string(s.kind)},
                       {"steps", s.steps},
                       {"steps_run", r.steps_run},
                       {"start_fingerprint", start_fp},
                       {"end_fingerprint", state->model.params().fingerprint()},
                       {"first_total", r.first_total ? json(*r.first_total) : json(nullptr)},
                       {"last_total", r.last_total ? json(*r.last_total) : json(nullptr)}});
    log(Level::info, "stage '" + s.name + "' done" +
                         (r.last_total ? ", last loss " + std::to_string(*r.last_total) : std::string()));
  }
  const fs::path final_path = c.output / (command + ".final.ckpt");
  save_checkpoint(state->to_checkpoint(), final_path);
  write_json(c.output / (command + ".stages.json"), summary);
  return TrainOutcome<T>{std::move(*state), final_path, std::move(*vocab)};
}

std::string dtype_of(const fs::path& ckpt) {
  return read_checkpoint_manifest(ckpt).at("dtype").get<std::string>() == "f64" ? "double" : "float";
}

template <typename F>
auto with_dtype(const std::string& dtype, F&& f) {
  if (dtype == "double") return f(double{});
  return f(float{});
}

RunConfig load_with_overrides(const std::string& path, const Overrides& o) {
  RunConfig c = load_run_config(path);
  if (o.seed) c.seed = *o.seed;
  if (o.output) c.output = fs::absolute(*o.output);
  if (o.steps) {
    for (auto& s : c.stages) s.steps = *o.steps;
  }
  return c;
}

int cmd_train(const std::string& config_path, const Overrides& o, Family family, const std::string& command) {
  const RunConfig c = load_with_overrides(config_path, o);
  std::optional<fs::path> start = c.init;
  if (o.resume) start = fs::path(*o.resume);
  const std::string dtype = start ? dtype_of(*start) : c.dtype;
  return with_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    const auto out = run_training<T>(c, family, command, start);
    std::cout << json{{"command", command},
                      {"checkpoint", out.final_checkpoint.string()},
                      {"fingerprint", out.state.model.params().fingerprint()}}
                     .dump()
              << '\n';
    return kExitOk;
  });
}

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::string> config;
  std::optional<std::string> docs;
  std::optional<std::string> queries;
  std::optional<int> layer;
  std::optional<int> dim;
  std::vector<std::size_t> ks;
  std::optional<std::size_t> seq;
  std::string output = "runs/eval";
  std::string axis;
  std::vector<int> values;
};

struct EvalInputs {
  EvalSet set;
  std::vector<std::size_t> ks;
  std::size_t seq = 32;
  std::optional<int> layer;
  std::optional<int> dim;
};

EvalInputs resolve_eval(const EvalArgs& a, const json& manifest) {
  EvalInputs in;
  std::optional<EvalConfig> from_config;
  if (a.config) from_config = load_run_config(*a.config).eval;
  fs::path docs, queries;
  if (a.docs) docs = *a.docs;
  else if (from_config) docs = from_config->docs;
  if (a.queries) queries = *a.queries;
  else if (from_config) queries = from_config->queries;
  if (docs.empty() || queries.empty()) throw ConfigError("--docs and --queries (or an eval block via --config) are required");
  if (!fs::is_regular_file(docs)) throw ConfigError("--docs: file not found: " + docs.string());
  if (!fs::is_regular_file(queries)) throw ConfigError("--queries: file not found: " + queries.string());
  in.set = EvalSet::load(docs, queries);
  in.ks = !a.ks.empty() ? a.ks : (from_config ? from_config->ks : std::vector<std::size_t>{1, 10, 100});
  for (auto k : in.ks) {
    if (k == 0) throw ConfigError("--k: K must be positive");
  }
  in.layer = a.layer ? a.layer : (from_config ? std::optional<int>(from_config->layer) : std::nullopt);
  in.dim = a.dim ? a.dim : (from_config ? std::optional<int>(from_config->dim) : std::nullopt);
  in.seq = a.seq.value_or(manifest.at("extra").value("seq", std::size_t{32}));
  return in;
}

void check_model_cell(const ModelConfig& m, int layer, int dim) {
  if (layer < 1 || layer > m.n_layers) {
    throw ConfigError("--layer: " + std::to_string(layer) + " outside [1, " + std::to_string(m.n_layers) + "]");
  }
  if (dim < 1 || dim > m.hidden) {
    throw ConfigError("--dim: " + std::to_string(dim) + " exceeds the model width " + std::to_string(m.hidden));
  }
}

template <typename T>
std::pair<Encoder<T>, Vocab> load_model(const fs::path& path) {
  Checkpoint<T> ck = load_checkpoint<T>(path);
  if (ck.vocab.empty()) throw ConfigError("--checkpoint: " + path.string() + " carries no vocabulary");
  Vocab vocab = Vocab::from_tokens(ck.vocab);
  return {Encoder<T>(ck.config, std::move(ck.params)), std::move(vocab)};
}

int cmd_eval(const EvalArgs& a) {
  const json manifest = read_checkpoint_manifest(a.checkpoint);
  const EvalInputs in = resolve_eval(a, manifest);
  const ModelConfig mc = manifest.at("config").get<ModelConfig>();
  const int layer = in.layer.value_or(mc.n_layers);
  const int dim = in.dim.value_or(mc.hidden);
  check_model_cell(mc, layer, dim);
  return with_dtype(dtype_of(a.checkpoint), [&](auto tag) {
    using T = decltype(tag);
    const auto [model, vocab] = load_model<T>(a.checkpoint);
    const EvalReport report = evaluate(model, vocab, in.set, layer, dim, in.ks, in.seq);
    for (const auto& w : report.warnings) log(Level::info, w);
    json j = to_json(report);
    j["checkpoint"] = a.checkpoint;
    j["fingerprint"] = model.params().fingerprint();
    const fs::path out(a.output);
    fs::create_directories(out);
    write_json(out / "eval.json", j);
    std::ofstream csv(out / "eval.csv");
    write_csv(csv, report);
    std::cout << j.dump() << '\n';
    return kExitOk;
  });
}

int cmd_sweep(const EvalArgs& a) {
  const json manifest = read_checkpoint_manifest(a.checkpoint);
  const EvalInputs in = resolve_eval(a, manifest);
  const ModelConfig mc = manifest.at("config").get<ModelConfig>();
  const SweepAxis axis = parse_sweep_axis(a.axis);
  if (a.values.empty()) throw ConfigError("--values: at least one value is required");
  for (std::size_t i = 1; i < a.values.size(); ++i) {
    if (a.values[i] <= a.values[i - 1]) throw ConfigError("--values: must be strictly increasing");
  }
  const int fixed = axis == SweepAxis::dim ? a.layer.value_or(mc.n_layers) : a.dim.value_or(mc.hidden);
  for (int v : a.values) {
    if (axis == SweepAxis::dim) check_model_cell(mc, fixed, v);
    else check_model_cell(mc, v, fixed);
  }
  return with_dtype(dtype_of(a.checkpoint), [&](auto tag) {
    using T = decltype(tag);
    const auto [model, vocab] = load_model<T>(a.checkpoint);
    const TradeoffCurve curve = tradeoff_sweep(model, vocab, in.set, axis, a.values, in.ks, in.seq, fixed);
    json j = to_json(curve);
    j["checkpoint"] = a.checkpoint;
    j["fingerprint"] = model.params().fingerprint();
    const fs::path out(a.output);
    fs::create_directories(out);
    write_json(out / "sweep.json", j);
    std::ofstream csv(out / "sweep.csv");
    write_csv(csv, curve);
    std::cout << j.dump() << '\n';
    return kExitOk;
  });
}

struct Arm {
  std::string name;
  std::string slug;
  void (*apply)(ModelConfig&);
};

const std::vector<Arm>& arms() {
  static const std::vector<Arm> a{
      {"base", "base", [](ModelConfig&) {}},
      {"-SwiGLU", "no_swiglu",
       [](ModelConfig& m) {
         m.activation = FfnKind::gelu;
         m.ffn_mult = 4.0;
       }},
      {"-Pre-norm", "no_prenorm", [](ModelConfig& m) { m.norm_placement = NormPlacement::post; }},
      {"-RMSNorm", "no_rmsnorm", [](ModelConfig& m) { m.norm = NormKind::layernorm; }},
      {"+Dropout", "dropout", [](ModelConfig& m) { m.hidden_dropout = 0.1; }},
      {"+Bias", "bias", [](ModelConfig& m) { m.use_bias = true; }},
  };
  return a;
}

int cmd_ablate(const std::string& config_path, const Overrides& o) {
  const RunConfig base = load_with_overrides(config_path, o);
  if (!base.model) throw ConfigError("model: ablate needs an explicit model block");
  if (base.init) throw ConfigError("init: ablate trains every arm from scratch and cannot take a checkpoint");
  if (!base.eval) throw ConfigError("eval: ablate needs an eval block");
  const EvalSet set = EvalSet::load(base.eval->docs, base.eval->queries);
  // Validate every arm before any compute.
  for (const auto& arm : arms()) {
    ModelConfig m = *base.model;
    arm.apply(m);
    try {
      m.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("model (arm " + arm.name + "): " + e.what());
    }
    base.validate_for(m);
  }
  return with_dtype(base.dtype, [&](auto tag) {
    using T = decltype(tag);
    json rows = json::array();
    std::ostringstream csv;
    csv << "arm,params,param_delta";
    for (auto k : base.eval->ks) csv << ",recall@" << k;
    csv << '\n';
    std::size_t base_params = 0;
    for (const auto& arm : arms()) {
      RunConfig c = base;
      arm.apply(*c.model);
      c.output = base.output / arm.slug;
      log(Level::info, "ablation arm " + arm.name);
      const auto out = run_training<T>(c, Family::all, "ablate", std::nullopt);
      const EvalReport r =
          evaluate(out.state.model, out.vocab, set, base.eval->layer, base.eval->dim, base.eval->ks, base.seq);
      const std::size_t params = out.state.model.params().element_count();
      if (arm.name == "base") base_params = params;
      const auto delta = static_cast<long long>(params) - static_cast<long long>(base_params);
      csv << arm.name << ',' << params << ',' << delta;
      json rj{{"arm", arm.name}, {"params", params}, {"param_delta", delta}, {"recall", json::object()}};
      for (auto k : base.eval->ks) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", r.recall.at(k));
        csv << ',' << buf;
        rj["recall"][std::to_string(k)] = r.recall.at(k);
      }
      csv << '\n';
      rows.push_back(rj);
    }
    fs::create_directories(base.output);
    std::ofstream(base.output / "ablation.csv") << csv.str();
    write_json(base.output / "ablation.json", rows);
    std::cout << rows.dump() << '\n';
    return kExitOk;
  });
}

struct SynthArgs {
  std::string output = "toy";
  std::uint64_t seed = 1;
  std::size_t corpus_docs = 4000;
  std::size_t docs = 2000;
  std::size_t queries = 200;
  std::size_t train_pairs = 4000;
};

int cmd_synth(const SynthArgs& a) {
  const fs::path out(a.output);
  fs::create_directories(out);
  RetrievalSetConfig rc;
  rc.n_docs = a.docs;
  rc.n_queries = a.queries;
  rc.n_train_pairs = a.train_pairs;
  const RetrievalSet set = generate_retrieval_set(rc, a.seed);
  auto write_lines = [&](const fs::path& p, const std::vector<std::string>& lines) {
    std::ofstream f(p);
    for (const auto& l : lines) f << l << '\n';
  };
  write_lines(out / "corpus.txt", generate_corpus(rc.language, a.corpus_docs, Rng::derive_seed(a.seed, "corpus")));
  // A second language at roughly one fifth of the volume, for the multilingual stage.
  SyntheticLanguageConfig other = rc.language;
  other.prefix = "sw_";
  write_lines(out / "corpus_sw.txt", generate_corpus(other, a.corpus_docs / 4, Rng::derive_seed(a.seed, "corpus.sw")));
  write_pairs(out / "train.tsv", set.train_pairs);
  EvalSet::from_retrieval_set(set).save(out / "docs.tsv", out / "queries.tsv");

  const json config{
      {"seed", a.seed},
      {"dtype", "float"},
      {"output", "run"},
      {"seq", 32},
      {"model",
       {{"n_layers", 6},
        {"hidden", 64},
        {"n_heads", 4},
        {"vocab", 2000},
        {"max_seq", 32},
        {"granularity", {{"layers", {2, 4, 6}}, {"dims", {8, 16, 32, 64}}}}}},
      {"data",
       {{"corpus", {{"type", "text"}, {"path", "corpus.txt"}}},
        {"multilingual",
         {{"type", "multilingual"},
          {"languages", {{{"name", "en"}, {"path", "corpus.txt"}}, {{"name", "sw"}, {"path", "corpus_sw.txt"}}}},
          {"smoothing", 0.7}}},
        {"pairs", {{"type", "pairs"}, {"path", "train.tsv"}}}}},
      {"stages",
       {{{"name", "stage1"}, {"kind", "pretrain_mlm"}, {"data", "corpus"}, {"steps", 200}, {"batch_size", 32},
         {"lr", 2e-3}},
        {{"name", "stage2"}, {"kind", "pretrain_mlm"}, {"data", "multilingual"}, {"steps", 100},
         {"batch_size", 32}, {"lr", 2e-3}},
        {{"name", "stage3"}, {"kind", "pretrain_contrastive"}, {"data", "pairs"}, {"steps", 50},
         {"batch_size", 64}, {"lr", 2e-3}, {"granularity", {{"layers", {2, 6}}, {"dims", {8, 16, 32}}}},
         {"tau", 0.05}, {"tile", 16}},
        {{"name", "sft"}, {"kind", "sft_mrl"}, {"data", "pairs"}, {"steps", 100}, {"batch_size", 64}, {"lr", 1e-3},
         {"layer", 2}, {"dims", {8, 16, 32, 64}}, {"tau", 0.05}}}},
      {"eval", {{"docs", "docs.tsv"}, {"queries", "queries.tsv"}, {"layer", 2}, {"dim", 64}, {"k", {1, 10, 100}}}}};
  write_json(out / "toy.json", config);
  std::cout << json{{"output", out.string()}, {"config", (out / "toy.json").string()}}.dump() << '\n';
  return kExitOk;
}

void report_error(const char* kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

const std::vector<std::string>& ablation_arms() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& a : arms()) n.push_back(a.name);
    return n;
  }();
  return names;
}

int run(int argc, const char* const* argv) {
  CLI::App app{"m3: multigranular Matryoshka encoder pretraining, fine-tuning and retrieval evaluation"};
  app.require_subcommand(1);
  Overrides o;
  std::string config;
  auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Run configuration (JSON)")->required();
    sub->add_option("--seed", o.seed, "Override the run seed");
    sub->add_option("--output", o.output, "Override the output directory");
    sub->add_option("--steps", o.steps, "Override the step count of every stage");
    sub->add_option("--threads", o.threads, "Worker threads; 1 is the deterministic verification mode");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Run the config's pretraining stages");
  auto* sft = app.add_subcommand("sft", "Run the config's fine-tuning stages");
  auto* distill = app.add_subcommand("distill", "Run the config's distillation stages");
  for (auto* sub : {pretrain, sft, distill}) {
    add_train_flags(sub);
    sub->add_option("--resume", o.resume, "Checkpoint to start or resume from");
  }
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every architecture ablation arm");
  add_train_flags(ablate);

  EvalArgs ea;
  auto add_eval_flags = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->required();
    sub->add_option("--config", ea.config, "Config whose eval block supplies defaults");
    sub->add_option("--docs", ea.docs, "Document pool (<id>\\t<text> per line)");
    sub->add_option("--queries", ea.queries, "Queries (<positive id>\\t<text> per line)");
    sub->add_option("--k", ea.ks, "Recall cut-offs")->delimiter(',');
    sub->add_option("--seq", ea.seq, "Sequence length (defaults to the training length)");
    sub->add_option("--output", ea.output, "Output directory");
    sub->add_option("--threads", o.threads, "Worker threads");
  };
  auto* eval = app.add_subcommand("eval", "Exact-search Recall@K of one (layer, dim) cell");
  add_eval_flags(eval);
  eval->add_option("--layer", ea.layer, "Layer (defaults to the last)");
  eval->add_option("--dim", ea.dim, "Embedding dimension (defaults to the full width)");
  auto* sweep = app.add_subcommand("sweep", "Recall@K along the dim or layer axis");
  add_eval_flags(sweep);
  sweep->add_option("--axis", ea.axis, "dim or layer")->required();
  sweep->add_option("--values", ea.values, "Strictly increasing axis values")->delimiter(',')->required();
  sweep->add_option("--layer", ea.layer, "Fixed layer for the dim axis");
  sweep->add_option("--dim", ea.dim, "Fixed dim for the layer axis");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic toy corpus, pair set, eval set and config");
  synth->add_option("--output", sa.output, "Output directory");
  synth->add_option("--seed", sa.seed, "Generator seed");
  synth->add_option("--corpus-docs", sa.corpus_docs, "Pretraining documents");
  synth->add_option("--docs", sa.docs, "Evaluation pool size");
  synth->add_option("--queries", sa.queries, "Evaluation queries");
  synth->add_option("--train-pairs", sa.train_pairs, "Training pairs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return kExitConfig;
  }

  try {
    if (o.threads < 1) throw ConfigError("--threads: must be at least 1");
    Eigen::setNbThreads(o.threads);
    if (pretrain->parsed()) return cmd_train(config, o, Family::pretrain, "pretrain");
    if (sft->parsed()) return cmd_train(config, o, Family::sft, "sft");
    if (distill->parsed()) return cmd_train(config, o, Family::distill, "distill");
    if (ablate->parsed()) return cmd_ablate(config, o);
    if (eval->parsed()) return cmd_eval(ea);
    if (sweep->parsed()) return cmd_sweep(ea);
    if (synth->parsed()) return cmd_synth(sa);
  } catch (const ConfigError& e) {
    report_error("config", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    report_error("runtime", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"m3"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace m3::cli
