// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/data/pairs.hpp"

#include <charconv>
#include <cstdio>
#include <chrono>
#include <fstream>
#include <set>
#include <unordered_map>

#include "m3/data/text.hpp"
#include "m3/numerics/errors.hpp"

namespace m3 {

namespace {

bool read_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  const char* first = s.data() + pos;
  for (std::size_t i = 0; i < len; ++i) {
    if (first[i] < '0' || first[i] > '9') return false;
  }
  return std::from_chars(first, first + len, out).ec == std::errc{};
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace

std::optional<std::int64_t> parse_iso8601(std::string_view s) {
  using namespace std::chrono;
  int y = 0, mo = 0, d = 0, hh = 0, mm = 0, ss = 0;
  if (!read_int(s, 0, 4, y) || s.size() < 10 || s[4] != '-' || s[7] != '-' || !read_int(s, 5, 2, mo) ||
      !read_int(s, 8, 2, d)) {
    return std::nullopt;
  }
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  std::size_t pos = 10;
  int offset_minutes = 0;
  if (pos < s.size()) {
    if (s[pos] != 'T' && s[pos] != ' ') return std::nullopt;
    if (!read_int(s, pos + 1, 2, hh) || pos + 3 >= s.size() || s[pos + 3] != ':' || !read_int(s, pos + 4, 2, mm)) {
      return std::nullopt;
    }
    pos += 6;
    if (pos < s.size() && s[pos] == ':') {
      if (!read_int(s, pos + 1, 2, ss)) return std::nullopt;
      pos += 3;
    }
    if (hh > 23 || mm > 59 || ss > 60) return std::nullopt;
    if (pos < s.size()) {
      if (s[pos] == 'Z') {
        ++pos;
      } else if (s[pos] == '+' || s[pos] == '-') {
        int oh = 0, om = 0;
        if (!read_int(s, pos + 1, 2, oh) || pos + 3 >= s.size() || s[pos + 3] != ':' ||
            !read_int(s, pos + 4, 2, om)) {
          return std::nullopt;
        }
        offset_minutes = (s[pos] == '+' ? 1 : -1) * (oh * 60 + om);
        pos += 6;
      }
    }
    if (pos != s.size()) return std::nullopt;
  }
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + hh * 3600 + mm * 60 + ss - offset_minutes * 60;
}

PairStore parse_pairs(const std::vector<std::string>& lines, std::string_view source) {
  PairStore store;
  std::size_t non_empty = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    ++non_empty;
    const std::string where = std::string(source) + ":" + std::to_string(i + 1) + ": ";
    if (auto bad = find_invalid_utf8(line)) {
      store.errors.push_back(where + "invalid UTF-8 at byte " + std::to_string(*bad));
      continue;
    }
    const auto fields = split_tabs(line);
    if (fields.size() < 2 || fields.size() > 3) {
      store.errors.push_back(where + "expected 2 or 3 tab-separated fields, got " + std::to_string(fields.size()));
      continue;
    }
    if (fields[0].empty() || fields[1].empty()) {
      store.errors.push_back(where + "empty query or document");
      continue;
    }
    PairRecord r{std::string(fields[0]), std::string(fields[1]), std::nullopt, i + 1};
    if (fields.size() == 3) {
      r.timestamp = parse_iso8601(fields[2]);
      if (!r.timestamp) {
        store.errors.push_back(where + "malformed timestamp '" + std::string(fields[2]) + "'");
        continue;
      }
    }
    store.records.push_back(std::move(r));
  }
  if (non_empty > 0 && store.errors.size() * 10 > non_empty) {
    throw DataError(std::string(source) + ": " + std::to_string(store.errors.size()) + " of " +
                    std::to_string(non_empty) + " lines malformed (more than 10%); first: " + store.errors.front());
  }
  return store;
}

PairStore ingest_pairs(const std::filesystem::path& path) {
  // Lines are read raw so that invalid UTF-8 becomes a per-line error.
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(std::move(line));
  return parse_pairs(lines, path.string());
}

void write_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : records) {
    out << r.query << '\t' << r.doc;
    if (r.timestamp) {
      using namespace std::chrono;
      const sys_seconds t{seconds{*r.timestamp}};
      const auto day_start = floor<days>(t);
      const year_month_day ymd{day_start};
      const hh_mm_ss hms{t - day_start};
      char buf[64];
      std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02ld:%02ld:%02ldZ", static_cast<int>(ymd.year()),
                    static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                    static_cast<long>(hms.hours().count()), static_cast<long>(hms.minutes().count()),
                    static_cast<long>(hms.seconds().count()));
      out << '\t' << buf;
    }
    out << '\n';
  }
}

std::vector<PairRecord> dedup_pairs(const std::vector<PairRecord>& records) {
  std::set<std::pair<std::string_view, std::string_view>> seen;
  std::vector<PairRecord> out;
  for (const auto& r : records) {
    if (seen.emplace(r.query, r.doc).second) out.push_back(r);
  }
  return out;
}

std::vector<PairRecord> cap_per_query(const std::vector<PairRecord>& records, std::size_t cap) {
  if (cap == 0) throw ConfigError("per-query cap must be at least 1");
  std::unordered_map<std::string_view, std::size_t> kept;
  std::vector<PairRecord> out;
  for (const auto& r : records) {
    if (kept[r.query]++ < cap) out.push_back(r);
  }
  return out;
}

std::pair<std::vector<PairRecord>, std::vector<PairRecord>> temporal_split(const std::vector<PairRecord>& records,
                                                                           std::int64_t boundary) {
  std::pair<std::vector<PairRecord>, std::vector<PairRecord>> out;
  for (const auto& r : records) {
    if (!r.timestamp) throw DataError("temporal_split: record from line " + std::to_string(r.line) + " has no timestamp");
    (*r.timestamp < boundary ? out.first : out.second).push_back(r);
  }
  return out;
}

}  // namespace m3
