// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3/data/masking.hpp"
#include "m3/data/sampler.hpp"
#include "m3/objectives/objectives.hpp"
#include "m3/trainer/checkpoint.hpp"
#include "m3/trainer/optimizer.hpp"

namespace m3 {

enum class StageKind { pretrain_mlm, pretrain_contrastive, sft, sft_mrl, distill };

std::string to_string(StageKind kind);
StageKind parse_stage_kind(std::string_view name);
/// pretrain_mlm and distill read MLM batches; the rest read query/document
/// pairs.
bool uses_mlm_data(StageKind kind);

struct DistillSettings {
  DistillMode mode = DistillMode::all_from_top;
  /// Defaults to the top cell (deepest layer, widest dim) of the grid.
  std::optional<Cell> teacher;
  std::optional<Cell> student;
  double lambda_d = 1.0;
  double tau_d = 1.0;
  KlDirection kl_direction = KlDirection::student_first;
};

struct StageConfig {
  std::string name;
  StageKind kind = StageKind::pretrain_mlm;
  /// Name of the data source the stage reads.
  std::string data;
  std::uint64_t steps = 0;
  std::size_t batch_size = 8;

  double lr = 1e-4;
  /// Defaults to max(1, steps / 10).
  std::optional<std::uint64_t> warmup_steps;
  double min_lr = 0.0;
  AdamWConfig adamw;
  std::optional<double> clip_norm;
  /// 0 disables periodic checkpoints.
  std::uint64_t checkpoint_every = 0;

  /// MLM, contrastive and distill stages; defaults to the model granularity.
  std::optional<GranularitySet> granularity;
  double mask_rate = 0.15;
  MaskPolicy mask_policy = MaskPolicy::bert_80_10_10;

  double tau = 0.05;
  std::optional<std::size_t> tile;
  /// sft: the single (layer, dim) cell. sft_mrl: the layer and dims.
  int layer = 0;
  int dim = 0;
  std::vector<int> dims;

  std::optional<DistillSettings> distill;

  Schedule schedule() const;
  GranularitySet grid(const ModelConfig& model) const;
  DistillPlan distill_plan(const ModelConfig& model) const;
  /// Throws ConfigError naming the offending field.
  void validate(const ModelConfig& model) const;
};

/// Rejects keys that do not belong to the stage kind.
void to_json(nlohmann::json& j, const StageConfig& s);
void from_json(const nlohmann::json& j, StageConfig& s);

/// Everything a resumable run carries between steps.
template <typename T>
struct TrainState {
  Encoder<T> model;
  std::optional<OptimizerState<T>> optimizer;
  /// Dropout stream.
  Rng rng;
  std::uint64_t seed = 0;
  /// Steps completed in `stage`.
  std::uint64_t step = 0;
  std::string stage;
  std::vector<std::string> vocab;
  /// Copied into the manifest of every checkpoint written from this state.
  nlohmann::json extra = nlohmann::json::object();

  Checkpoint<T> to_checkpoint() const;
  static TrainState from_checkpoint(Checkpoint<T> ckpt);
};

class MetricSink {
 public:
  virtual ~MetricSink() = default;
  virtual void record(const nlohmann::json& row) = 0;
};

/// One JSON object per line.
class JsonlSink : public MetricSink {
 public:
  explicit JsonlSink(std::ostream& out) : out_(&out) {}
  void record(const nlohmann::json& row) override;

 private:
  std::ostream* out_;
};

class MemorySink : public MetricSink {
 public:
  void record(const nlohmann::json& row) override { rows.push_back(row); }
  std::vector<nlohmann::json> rows;
};

struct StageData {
  const MlmSampler* mlm = nullptr;
  const PairSampler* pairs = nullptr;
};

struct RunOptions {
  /// Periodic "<stage>.last.ckpt" and abort-time "<stage>.last_good.ckpt"
  /// land here; empty disables both.
  std::filesystem::path checkpoint_dir;
  /// Build batches on a background thread.
  bool prefetch = false;
  /// Stop after this many completed steps of the stage (for interruption).
  std::optional<std::uint64_t> stop_at;
};

struct StageResult {
  std::uint64_t steps_run = 0;
  std::optional<double> first_total;
  std::optional<double> last_total;
  bool completed = false;
};

/// Runs `config` on `state`. A state whose `stage` differs from
/// `config.name` starts the stage fresh (step 0, zero moments, new dropout
/// stream); otherwise training resumes at `state.step`.
///
/// A non-finite loss or gradient aborts with NumericError. The state from
/// before the failing step is written as "<stage>.last_good.ckpt" when its
/// parameters are finite; earlier periodic checkpoints are left in place.
template <typename T>
StageResult run_stage(const StageConfig& config, TrainState<T>& state, const StageData& data,
                      MetricSink& sink, const RunOptions& options = {});

/// The loss of one batch without updating anything. `batch_step` selects the
/// deterministic batch; the model runs in eval mode.
template <typename T>
LossReport<T> stage_loss(const StageConfig& config, const Encoder<T>& model, const StageData& data,
                         std::uint64_t seed, std::uint64_t batch_step);

extern template struct TrainState<float>;
extern template struct TrainState<double>;

}  // namespace m3
