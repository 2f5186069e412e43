// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3/encoder/model.hpp"
#include "m3/trainer/optimizer.hpp"

namespace m3 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ParameterSet<T> params;
  std::optional<OptimizerState<T>> optimizer;
  /// Serialized Rng used for dropout during training.
  std::string rng_state;
  std::uint64_t seed = 0;
  /// Optimizer steps completed in `stage`.
  std::uint64_t step = 0;
  std::string stage;
  /// Token list of the vocabulary (ids are positions); empty if none.
  std::vector<std::string> vocab;
  /// Free-form metadata, stored in the manifest.
  nlohmann::json extra = nlohmann::json::object();
};

/// File layout: "M3CK", u32 version, u64 manifest length (little-endian),
/// UTF-8 JSON manifest, then raw little-endian tensor payloads in manifest
/// order (parameters, then optimizer first and second moments). Each tensor
/// entry records its offset, byte length and CRC-32.
template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path);

/// Payloads stored with a different element type are converted.
/// Throws IntegrityError for a bad magic, truncation or checksum mismatch,
/// VersionError for an unknown format version.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Manifest only, without reading payloads.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);

extern template void save_checkpoint(const Checkpoint<float>&, const std::filesystem::path&);
extern template void save_checkpoint(const Checkpoint<double>&, const std::filesystem::path&);
extern template Checkpoint<float> load_checkpoint(const std::filesystem::path&);
extern template Checkpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace m3
