// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/trainer/trainer.hpp"

#include <chrono>
#include <cmath>
#include <ostream>

#include "m3/numerics/ops.hpp"
#include "m3/util/json_fields.hpp"

namespace m3 {

namespace {

std::string to_string(DistillMode m) { return m == DistillMode::all_from_top ? "all_from_top" : "single_pair"; }
std::string to_string(KlDirection d) { return d == KlDirection::student_first ? "student_first" : "teacher_first"; }

DistillMode parse_distill_mode(const std::string& s) {
  if (s == "all_from_top") return DistillMode::all_from_top;
  if (s == "single_pair") return DistillMode::single_pair;
  throw ConfigError("distill.mode: unknown value '" + s + "' (all_from_top, single_pair)");
}

KlDirection parse_kl_direction(const std::string& s) {
  if (s == "student_first") return KlDirection::student_first;
  if (s == "teacher_first") return KlDirection::teacher_first;
  throw ConfigError("distill.kl_direction: unknown value '" + s + "' (student_first, teacher_first)");
}

std::string field(const StageConfig& s, const char* key) {
  return "stage '" + s.name + "'." + key;
}

}  // namespace

std::string to_string(StageKind kind) {
  switch (kind) {
    case StageKind::pretrain_mlm: return "pretrain_mlm";
    case StageKind::pretrain_contrastive: return "pretrain_contrastive";
    case StageKind::sft: return "sft";
    case StageKind::sft_mrl: return "sft_mrl";
    case StageKind::distill: return "distill";
  }
  return "?";
}

StageKind parse_stage_kind(std::string_view name) {
  for (auto k : {StageKind::pretrain_mlm, StageKind::pretrain_contrastive, StageKind::sft, StageKind::sft_mrl,
                 StageKind::distill}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown stage kind '" + std::string(name) + "'");
}

bool uses_mlm_data(StageKind kind) {
  return kind == StageKind::pretrain_mlm || kind == StageKind::distill;
}

Schedule StageConfig::schedule() const {
  Schedule s;
  s.peak_lr = lr;
  s.total_steps = std::max<std::uint64_t>(steps, 1);
  s.warmup_steps = std::min(warmup_steps.value_or(std::max<std::uint64_t>(1, steps / 10)), s.total_steps);
  s.min_lr = min_lr;
  return s;
}

GranularitySet StageConfig::grid(const ModelConfig& model) const {
  switch (kind) {
    case StageKind::sft: return GranularitySet{{layer}, {dim}};
    case StageKind::sft_mrl: return GranularitySet{{layer}, dims};
    default: return granularity.value_or(model.granularity);
  }
}

DistillPlan StageConfig::distill_plan(const ModelConfig& model) const {
  if (!distill) throw ConfigError(field(*this, "distill") + ": missing");
  const GranularitySet g = grid(model);
  const Cell top{g.layers.back(), g.dims.back()};
  DistillPlan plan = build_distill_plan(distill->mode, distill->teacher.value_or(top), distill->student, g,
                                        distill->lambda_d, distill->tau_d);
  plan.kl_direction = distill->kl_direction;
  plan.validate(g, model.hidden);
  return plan;
}

void StageConfig::validate(const ModelConfig& model) const {
  if (name.empty()) throw ConfigError("stage.name: must be non-empty");
  if (data.empty()) throw ConfigError(field(*this, "data") + ": must name a data source");
  if (batch_size == 0) throw ConfigError(field(*this, "batch_size") + ": must be positive");
  if (steps > 0) {
    try {
      schedule().validate();
      adamw.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(field(*this, "lr") + ": " + e.what());
    }
  }
  if (clip_norm && !(*clip_norm > 0)) throw ConfigError(field(*this, "clip_norm") + ": must be positive");
  if (!(tau > 0)) throw ConfigError(field(*this, "tau") + ": must be positive");
  if (tile && *tile == 0) throw ConfigError(field(*this, "tile") + ": must be positive");
  if (!(mask_rate > 0 && mask_rate <= 1)) throw ConfigError(field(*this, "mask_rate") + ": must lie in (0, 1]");
  if (kind == StageKind::sft && (layer < 1 || layer > model.n_layers || dim < 1 || dim > model.hidden)) {
    throw ConfigError(field(*this, "layer/dim") + ": (" + std::to_string(layer) + ", " + std::to_string(dim) +
                      ") outside the model's " + std::to_string(model.n_layers) + " layers x " +
                      std::to_string(model.hidden) + " dims");
  }
  try {
    grid(model).validate(model.n_layers, model.hidden);
  } catch (const ConfigError& e) {
    const char* key = kind == StageKind::sft_mrl ? "dims" : (kind == StageKind::sft ? "layer/dim" : "granularity");
    throw ConfigError(field(*this, key) + ": " + e.what());
  }
  if ((kind == StageKind::distill) != distill.has_value()) {
    throw ConfigError(field(*this, "distill") + ": required for, and only for, distill stages");
  }
  if (kind == StageKind::distill) {
    try {
      distill_plan(model);
    } catch (const Error& e) {
      throw ConfigError(field(*this, "distill") + ": " + e.what());
    }
  }
}

void to_json(nlohmann::json& j, const StageConfig& s) {
  j = nlohmann::json{{"name", s.name},           {"kind", to_string(s.kind)}, {"data", s.data},
                     {"steps", s.steps},         {"batch_size", s.batch_size}, {"lr", s.lr},
                     {"min_lr", s.min_lr},       {"adamw", s.adamw},           {"checkpoint_every", s.checkpoint_every}};
  if (s.warmup_steps) j["warmup_steps"] = *s.warmup_steps;
  if (s.clip_norm) j["clip_norm"] = *s.clip_norm;
  switch (s.kind) {
    case StageKind::pretrain_mlm:
    case StageKind::distill:
      if (s.granularity) j["granularity"] = *s.granularity;
      j["mask_rate"] = s.mask_rate;
      j["mask_policy"] = std::string(to_string(s.mask_policy));
      break;
    case StageKind::pretrain_contrastive:
      if (s.granularity) j["granularity"] = *s.granularity;
      j["tau"] = s.tau;
      break;
    case StageKind::sft:
      j["layer"] = s.layer;
      j["dim"] = s.dim;
      j["tau"] = s.tau;
      break;
    case StageKind::sft_mrl:
      j["layer"] = s.layer;
      j["dims"] = s.dims;
      j["tau"] = s.tau;
      break;
  }
  if (s.tile && s.kind != StageKind::pretrain_mlm && s.kind != StageKind::distill) j["tile"] = *s.tile;
  if (s.distill) {
    const auto& d = *s.distill;
    nlohmann::json dj{{"mode", to_string(d.mode)},
                      {"lambda", d.lambda_d},
                      {"tau", d.tau_d},
                      {"kl_direction", to_string(d.kl_direction)}};
    if (d.teacher) dj["teacher"] = d.teacher->label();
    if (d.student) dj["student"] = d.student->label();
    j["distill"] = dj;
  }
}

void from_json(const nlohmann::json& j, StageConfig& s) {
  if (!j.is_object()) throw ConfigError("stage must be an object");
  std::string kind;
  json_fields::read_required(j, "stage", "name", s.name);
  const std::string where = "stage '" + s.name + "'";
  json_fields::read_required(j, where, "kind", kind);
  s.kind = parse_stage_kind(kind);
  switch (s.kind) {
    case StageKind::pretrain_mlm:
      json_fields::require_known(j, where, {"name", "kind", "data", "steps", "batch_size", "lr", "warmup_steps",
                                            "min_lr", "adamw", "clip_norm", "checkpoint_every", "granularity",
                                            "mask_rate", "mask_policy"});
      break;
    case StageKind::distill:
      json_fields::require_known(j, where, {"name", "kind", "data", "steps", "batch_size", "lr", "warmup_steps",
                                            "min_lr", "adamw", "clip_norm", "checkpoint_every", "granularity",
                                            "mask_rate", "mask_policy", "distill"});
      break;
    case StageKind::pretrain_contrastive:
      json_fields::require_known(j, where, {"name", "kind", "data", "steps", "batch_size", "lr", "warmup_steps",
                                            "min_lr", "adamw", "clip_norm", "checkpoint_every", "granularity", "tau",
                                            "tile"});
      break;
    case StageKind::sft:
      json_fields::require_known(j, where, {"name", "kind", "data", "steps", "batch_size", "lr", "warmup_steps",
                                            "min_lr", "adamw", "clip_norm", "checkpoint_every", "layer", "dim", "tau",
                                            "tile"});
      json_fields::read_required(j, where, "layer", s.layer);
      json_fields::read_required(j, where, "dim", s.dim);
      break;
    case StageKind::sft_mrl:
      json_fields::require_known(j, where, {"name", "kind", "data", "steps", "batch_size", "lr", "warmup_steps",
                                            "min_lr", "adamw", "clip_norm", "checkpoint_every", "layer", "dims",
                                            "tau", "tile"});
      json_fields::read_required(j, where, "layer", s.layer);
      json_fields::read_required(j, where, "dims", s.dims);
      break;
  }
  json_fields::read_required(j, where, "data", s.data);
  json_fields::read_required(j, where, "steps", s.steps);
  json_fields::read(j, where, "batch_size", s.batch_size);
  json_fields::read(j, where, "lr", s.lr);
  if (j.contains("warmup_steps")) {
    std::uint64_t w = 0;
    json_fields::read(j, where, "warmup_steps", w);
    s.warmup_steps = w;
  }
  json_fields::read(j, where, "min_lr", s.min_lr);
  json_fields::read(j, where, "adamw", s.adamw);
  if (j.contains("clip_norm")) {
    double c = 0;
    json_fields::read(j, where, "clip_norm", c);
    s.clip_norm = c;
  }
  json_fields::read(j, where, "checkpoint_every", s.checkpoint_every);
  if (j.contains("granularity")) {
    GranularitySet g;
    json_fields::read(j, where, "granularity", g);
    s.granularity = g;
  }
  json_fields::read(j, where, "mask_rate", s.mask_rate);
  if (j.contains("mask_policy")) {
    std::string p;
    json_fields::read(j, where, "mask_policy", p);
    s.mask_policy = parse_mask_policy(p);
  }
  json_fields::read(j, where, "tau", s.tau);
  if (j.contains("tile")) {
    std::size_t t = 0;
    json_fields::read(j, where, "tile", t);
    s.tile = t;
  }
  if (j.contains("distill")) {
    const auto& dj = j.at("distill");
    const std::string dw = where + ".distill";
    json_fields::require_known(dj, dw, {"mode", "teacher", "student", "lambda", "tau", "kl_direction"});
    DistillSettings d;
    std::string text;
    if (dj.contains("mode")) {
      json_fields::read(dj, dw, "mode", text);
      d.mode = parse_distill_mode(text);
    }
    if (dj.contains("teacher")) {
      Cell c;
      json_fields::read(dj, dw, "teacher", c);
      d.teacher = c;
    }
    if (dj.contains("student")) {
      Cell c;
      json_fields::read(dj, dw, "student", c);
      d.student = c;
    }
    json_fields::read(dj, dw, "lambda", d.lambda_d);
    json_fields::read(dj, dw, "tau", d.tau_d);
    if (dj.contains("kl_direction")) {
      json_fields::read(dj, dw, "kl_direction", text);
      d.kl_direction = parse_kl_direction(text);
    }
    s.distill = d;
  }
}

void JsonlSink::record(const nlohmann::json& row) { *out_ << row.dump() << '\n' << std::flush; }

template <typename T>
Checkpoint<T> TrainState<T>::to_checkpoint() const {
  Checkpoint<T> ck;
  ck.config = model.config();
  ck.params = model.params().clone();
  ck.optimizer = optimizer;
  ck.rng_state = rng.serialize();
  ck.seed = seed;
  ck.step = step;
  ck.stage = stage;
  ck.vocab = vocab;
  ck.extra = extra;
  return ck;
}

template <typename T>
TrainState<T> TrainState<T>::from_checkpoint(Checkpoint<T> ck) {
  Rng rng;
  if (!ck.rng_state.empty()) rng.deserialize(ck.rng_state);
  return TrainState<T>{Encoder<T>(ck.config, std::move(ck.params)), std::move(ck.optimizer), rng, ck.seed,
                       ck.step, ck.stage, std::move(ck.vocab), std::move(ck.extra)};
}

namespace {

struct AnyBatch {
  std::optional<MlmBatch> mlm;
  std::optional<PairBatch> pairs;
};

AnyBatch make_batch(const StageConfig& c, const StageData& data, std::uint64_t seed, std::uint64_t step) {
  const std::uint64_t stage_seed = Rng::derive_seed(seed, "stage." + c.name);
  AnyBatch b;
  if (uses_mlm_data(c.kind)) {
    if (!data.mlm) throw ConfigError("stage '" + c.name + "' needs an MLM data source");
    b.mlm = data.mlm->batch(stage_seed, step, c.batch_size);
  } else {
    if (!data.pairs) throw ConfigError("stage '" + c.name + "' needs a pair data source");
    b.pairs = data.pairs->batch(stage_seed, step, c.batch_size);
  }
  return b;
}

template <typename T>
LossReport<T> batch_loss(const StageConfig& c, const Encoder<T>& model, const AnyBatch& b,
                         const ObjectiveOptions& opts) {
  const ModelConfig& mc = model.config();
  const std::optional<TileConfig> tile =
      c.tile ? std::optional<TileConfig>(TileConfig{*c.tile}) : std::nullopt;
  switch (c.kind) {
    case StageKind::pretrain_mlm: return matryoshka_mlm_loss(model, *b.mlm, c.grid(mc), opts);
    case StageKind::distill: return distill_loss(model, *b.mlm, c.distill_plan(mc), c.grid(mc), opts);
    case StageKind::pretrain_contrastive:
    case StageKind::sft: return matryoshka_contrastive_loss(model, *b.pairs, c.grid(mc), c.tau, tile, opts);
    case StageKind::sft_mrl: return mrl_sft_loss(model, *b.pairs, c.dims, c.layer, c.tau, tile, opts);
  }
  throw ConfigError("unhandled stage kind");
}

template <typename T>
void save_to(const TrainState<T>& state, const std::filesystem::path& dir, const std::string& file) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  save_checkpoint(state.to_checkpoint(), dir / file);
}

}  // namespace

template <typename T>
LossReport<T> stage_loss(const StageConfig& config, const Encoder<T>& model, const StageData& data,
                         std::uint64_t seed, std::uint64_t batch_step) {
  config.validate(model.config());
  return batch_loss(config, model, make_batch(config, data, seed, batch_step), ObjectiveOptions{});
}

template <typename T>
StageResult run_stage(const StageConfig& config, TrainState<T>& state, const StageData& data,
                      MetricSink& sink, const RunOptions& options) {
  config.validate(state.model.config());
  if (state.stage != config.name) {
    state.stage = config.name;
    state.step = 0;
    state.optimizer.reset();
    state.rng = Rng::stream(state.seed, "dropout." + config.name);
  }
  if (!state.optimizer) {
    if (state.step > 0) throw ConfigError("cannot resume stage '" + config.name + "' without optimizer state");
    state.optimizer = OptimizerState<T>::zeros(state.model.params(), config.adamw);
  }
  state.optimizer->config = config.adamw;
  if (state.step > config.steps) {
    throw ConfigError("checkpoint is at step " + std::to_string(state.step) + " of stage '" + config.name +
                      "', which has only " + std::to_string(config.steps) + " steps");
  }

  const Schedule schedule = config.schedule();
  const std::uint64_t last = std::min(config.steps, options.stop_at.value_or(config.steps));
  StageResult result;
  if (state.step >= last) {
    result.completed = state.step == config.steps;
    return result;
  }
  Prefetcher<AnyBatch> batches([&](std::uint64_t s) { return make_batch(config, data, state.seed, s); },
                               state.step, last, 2, options.prefetch);
  auto& params = state.model.params();
  while (state.step < last) {
    const auto t0 = std::chrono::steady_clock::now();
    const AnyBatch batch = batches.next();
    const double lr = cosine_lr(schedule, state.step + 1);
    params.zero_grad();
    std::optional<double> grad_norm;
    try {
      LossReport<T> report = batch_loss(config, state.model, batch, ObjectiveOptions{true, &state.rng});
      if (!std::isfinite(report.total)) {
        throw NumericError("non-finite loss " + std::to_string(report.total) + " at step " +
                           std::to_string(state.step + 1) + " of stage '" + config.name + "'");
      }
      report.objective.backward();
      if (config.clip_norm) grad_norm = clip_grad_norm(params, *config.clip_norm);
      adamw_step(params, *state.optimizer, lr);
      ++state.step;
      params.zero_grad();

      if (!result.first_total) result.first_total = report.total;
      result.last_total = report.total;
      ++result.steps_run;
      nlohmann::json row{{"step", state.step}, {"stage", config.name}, {"lr", lr}, {"total", report.total}};
      for (const auto& [cell, loss] : report.per_pair) row[cell.label()] = loss;
      if (report.aux) row["distill"] = *report.aux;
      if (grad_norm) row["grad_norm"] = *grad_norm;
      row["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      sink.record(row);
    } catch (const NumericError&) {
      params.zero_grad();
      bool finite = true;
      for (const auto& [name, var] : params) finite = finite && var.value().all_finite();
      // A diverged update leaves non-finite parameters; the periodic checkpoint is then the last good one.
      if (finite) save_to(state, options.checkpoint_dir, config.name + ".last_good.ckpt");
      throw;
    }
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
      save_to(state, options.checkpoint_dir, config.name + ".last.ckpt");
    }
  }
  result.completed = state.step == config.steps;
  return result;
}

template struct TrainState<float>;
template struct TrainState<double>;
template StageResult run_stage(const StageConfig&, TrainState<float>&, const StageData&, MetricSink&,
                               const RunOptions&);
template StageResult run_stage(const StageConfig&, TrainState<double>&, const StageData&, MetricSink&,
                               const RunOptions&);
template LossReport<float> stage_loss(const StageConfig&, const Encoder<float>&, const StageData&, std::uint64_t,
                                      std::uint64_t);
template LossReport<double> stage_loss(const StageConfig&, const Encoder<double>&, const StageData&,
                                       std::uint64_t, std::uint64_t);

}  // namespace m3
