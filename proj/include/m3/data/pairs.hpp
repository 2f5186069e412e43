// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace m3 {

struct PairRecord {
  std::string query;
  std::string doc;
  std::optional<std::int64_t> timestamp;  // seconds since the Unix epoch, UTC
  std::size_t line = 0;                   // 1-based source line, 0 if generated

  bool operator==(const PairRecord&) const = default;
};

struct PairStore {
  std::vector<PairRecord> records;
  /// One "<path>:<line>: <reason>" entry per rejected line.
  std::vector<std::string> errors;
};

/// Parses "YYYY-MM-DD", optionally followed by "THH:MM[:SS]" and "Z" or a
/// "±HH:MM" offset. Returns nullopt when malformed.
std::optional<std::int64_t> parse_iso8601(std::string_view text);

/// Reads `query<TAB>doc[<TAB>timestamp]` lines. Malformed lines (wrong field
/// count, empty fields, bad timestamp, invalid UTF-8) are recorded in
/// `errors` and skipped; if more than 10% of non-empty lines are malformed
/// the whole file is rejected with DataError.
PairStore ingest_pairs(const std::filesystem::path& path);
PairStore parse_pairs(const std::vector<std::string>& lines, std::string_view source = "<memory>");

void write_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& records);

/// Drops exact (query, doc) repeats, keeping the first occurrence.
std::vector<PairRecord> dedup_pairs(const std::vector<PairRecord>& records);
/// Keeps at most `cap` records per distinct query, first come first kept.
std::vector<PairRecord> cap_per_query(const std::vector<PairRecord>& records, std::size_t cap);

/// train: timestamp < boundary; test: timestamp >= boundary. Every record must
/// carry a timestamp (DataError otherwise).
std::pair<std::vector<PairRecord>, std::vector<PairRecord>> temporal_split(
    const std::vector<PairRecord>& records, std::int64_t boundary);

}  // namespace m3
