// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/cli/commands.hpp"

int main(int argc, char** argv) { return m3::cli::run(argc, argv); }
