// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3/encoder/config.hpp"
#include "m3/trainer/trainer.hpp"

namespace m3::cli {

/// A named data source. "text": one document per line. "multilingual": one
/// text file per language, sampled by the smoothed mixture. "pairs":
/// query<TAB>doc[<TAB>timestamp] lines.
struct DataSourceConfig {
  std::string type;
  std::vector<std::pair<std::string, std::filesystem::path>> files;  // (language, path)
  double smoothing = 0.7;
  bool dedup = true;
  std::size_t cap_per_query = 0;  // 0 keeps every pair
};

struct EvalConfig {
  std::filesystem::path docs;
  std::filesystem::path queries;
  int layer = 0;
  int dim = 0;
  std::vector<std::size_t> ks{1, 10, 100};
};

struct RunConfig {
  std::uint64_t seed = 0;
  /// "float" or "double".
  std::string dtype = "float";
  std::filesystem::path output = "runs/default";
  std::optional<ModelConfig> model;
  std::size_t seq = 32;
  /// Starting checkpoint; the model config then comes from it.
  std::optional<std::filesystem::path> init;
  std::map<std::string, DataSourceConfig> data;
  std::vector<StageConfig> stages;
  std::optional<EvalConfig> eval;

  /// Checks everything that does not depend on the model. Relative paths
  /// have already been resolved against the config file's directory.
  void validate_static() const;
  /// Cross-checks stages and eval against `model`, naming the field at fault.
  void validate_for(const ModelConfig& model) const;
};

/// Parses and statically validates; unknown keys are errors. Relative paths
/// are resolved against the directory of `path`.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json to_json(const RunConfig& config);

}  // namespace m3::cli
