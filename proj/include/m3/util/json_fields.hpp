// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "m3/numerics/errors.hpp"

namespace m3::json_fields {

/// Throws ConfigError("<where>: unknown key '<k>'") for keys outside `known`.
inline void require_known(const nlohmann::json& j, std::string_view where,
                          std::initializer_list<std::string_view> known) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || k == key;
    if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

/// Reads j[key] into `out` when present; type errors become ConfigError.
template <typename V>
void read(const nlohmann::json& j, std::string_view where, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + "." + key + ": " + e.what());
  }
}

template <typename V>
void read_required(const nlohmann::json& j, std::string_view where, const char* key, V& out) {
  if (!j.contains(key)) throw ConfigError(std::string(where) + ": missing required key '" + key + "'");
  read(j, where, key, out);
}

}  // namespace m3::json_fields
