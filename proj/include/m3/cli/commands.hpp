// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace m3::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Entry point of the m3 command-line tool. Returns the process exit code:
/// 0 on success, 2 for invalid configuration or arguments, 1 for runtime
/// failures. Errors are printed to stderr as one JSON object.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

/// Table-4 arm names in output order.
const std::vector<std::string>& ablation_arms();

}  // namespace m3::cli
