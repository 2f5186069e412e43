// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/cli/run_config.hpp"

#include <algorithm>
#include <fstream>

#include "m3/util/json_fields.hpp"

namespace m3::cli {

namespace {

namespace fs = std::filesystem;

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::string list_str(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "]";
}

void require_file(const fs::path& p, const std::string& field) {
  if (!fs::is_regular_file(p)) throw ConfigError(field + ": file not found: " + p.string());
}

DataSourceConfig parse_source(const nlohmann::json& j, const std::string& where, const fs::path& base) {
  DataSourceConfig s;
  json_fields::read_required(j, where, "type", s.type);
  if (s.type == "text") {
    json_fields::require_known(j, where, {"type", "path"});
    std::string p;
    json_fields::read_required(j, where, "path", p);
    s.files.emplace_back("", resolve(base, p));
  } else if (s.type == "multilingual") {
    json_fields::require_known(j, where, {"type", "languages", "smoothing"});
    if (!j.contains("languages") || !j.at("languages").is_array() || j.at("languages").empty()) {
      throw ConfigError(where + ".languages: must be a non-empty array");
    }
    for (std::size_t i = 0; i < j.at("languages").size(); ++i) {
      const auto& lj = j.at("languages")[i];
      const std::string lw = where + ".languages[" + std::to_string(i) + "]";
      json_fields::require_known(lj, lw, {"name", "path"});
      std::string name, p;
      json_fields::read_required(lj, lw, "name", name);
      json_fields::read_required(lj, lw, "path", p);
      s.files.emplace_back(name, resolve(base, p));
    }
    json_fields::read(j, where, "smoothing", s.smoothing);
  } else if (s.type == "pairs") {
    json_fields::require_known(j, where, {"type", "path", "dedup", "cap_per_query"});
    std::string p;
    json_fields::read_required(j, where, "path", p);
    s.files.emplace_back("", resolve(base, p));
    json_fields::read(j, where, "dedup", s.dedup);
    json_fields::read(j, where, "cap_per_query", s.cap_per_query);
  } else {
    throw ConfigError(where + ".type: unknown source type '" + s.type + "' (text, multilingual, pairs)");
  }
  return s;
}

}  // namespace

RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base) {
  json_fields::require_known(j, "config", {"seed", "dtype", "output", "model", "seq", "init", "data", "stages", "eval"});
  RunConfig c;
  json_fields::read(j, "config", "seed", c.seed);
  json_fields::read(j, "config", "dtype", c.dtype);
  std::string text;
  if (j.contains("output")) {
    json_fields::read(j, "config", "output", text);
    c.output = resolve(base, text);
  }
  if (j.contains("model")) {
    ModelConfig m;
    json_fields::read(j, "config", "model", m);
    c.model = m;
  }
  json_fields::read(j, "config", "seq", c.seq);
  if (j.contains("init")) {
    json_fields::read(j, "config", "init", text);
    c.init = resolve(base, text);
  }
  if (j.contains("data")) {
    if (!j.at("data").is_object()) throw ConfigError("data: must be an object of named sources");
    for (const auto& [name, sj] : j.at("data").items()) c.data[name] = parse_source(sj, "data." + name, base);
  }
  if (j.contains("stages")) {
    if (!j.at("stages").is_array()) throw ConfigError("stages: must be an array");
    for (std::size_t i = 0; i < j.at("stages").size(); ++i) {
      try {
        c.stages.push_back(j.at("stages")[i].get<StageConfig>());
      } catch (const ConfigError& e) {
        throw ConfigError("stages[" + std::to_string(i) + "]: " + e.what());
      }
    }
  }
  if (j.contains("eval")) {
    const auto& ej = j.at("eval");
    json_fields::require_known(ej, "eval", {"docs", "queries", "layer", "dim", "k"});
    EvalConfig e;
    json_fields::read_required(ej, "eval", "docs", text);
    e.docs = resolve(base, text);
    json_fields::read_required(ej, "eval", "queries", text);
    e.queries = resolve(base, text);
    json_fields::read_required(ej, "eval", "layer", e.layer);
    json_fields::read_required(ej, "eval", "dim", e.dim);
    json_fields::read(ej, "eval", "k", e.ks);
    c.eval = e;
  }
  c.validate_static();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, fs::absolute(path).parent_path());
}

void RunConfig::validate_static() const {
  if (dtype != "float" && dtype != "double") throw ConfigError("dtype: must be \"float\" or \"double\"");
  if (seq < 2) throw ConfigError("seq: must be at least 2");
  if (model) {
    try {
      model->validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
  }
  if (init) require_file(*init, "init");
  for (const auto& [name, src] : data) {
    for (std::size_t i = 0; i < src.files.size(); ++i) {
      require_file(src.files[i].second, "data." + name + (src.type == "multilingual" ? ".languages[" +
                                                                                        std::to_string(i) + "].path"
                                                                                  : ".path"));
    }
    if (!(src.smoothing >= 0 && src.smoothing <= 1)) throw ConfigError("data." + name + ".smoothing: must lie in [0, 1]");
  }
  std::vector<std::string> names;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "stages[" + std::to_string(i) + "]";
    if (std::find(names.begin(), names.end(), s.name) != names.end()) {
      throw ConfigError(where + ".name: duplicate stage name '" + s.name + "'");
    }
    names.push_back(s.name);
    auto it = data.find(s.data);
    if (it == data.end()) throw ConfigError(where + ".data: no data source named '" + s.data + "'");
    const bool wants_mlm = uses_mlm_data(s.kind);
    if (wants_mlm == (it->second.type == "pairs")) {
      throw ConfigError(where + ".data: stage kind " + to_string(s.kind) + " cannot read " + it->second.type +
                        " source '" + s.data + "'");
    }
  }
  if (eval) {
    require_file(eval->docs, "eval.docs");
    require_file(eval->queries, "eval.queries");
    if (eval->ks.empty()) throw ConfigError("eval.k: must list at least one K");
    for (auto k : eval->ks) {
      if (k == 0) throw ConfigError("eval.k: K must be positive");
    }
  }
}

void RunConfig::validate_for(const ModelConfig& m) const {
  if (seq > static_cast<std::size_t>(m.max_seq)) {
    throw ConfigError("seq: " + std::to_string(seq) + " exceeds model.max_seq " + std::to_string(m.max_seq));
  }
  const auto& g = m.granularity;
  auto check_layer = [&](const std::string& field, int l) {
    if (!g.has_layer(l)) {
      throw ConfigError(field + ": " + std::to_string(l) + " is not in model.granularity.layers " + list_str(g.layers));
    }
  };
  auto check_dim = [&](const std::string& field, int d) {
    if (!g.has_dim(d)) {
      throw ConfigError(field + ": " + std::to_string(d) + " is not in model.granularity.dims " + list_str(g.dims));
    }
  };
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string where = "stages[" + std::to_string(i) + "]";
    switch (s.kind) {
      case StageKind::sft:
        check_layer(where + ".layer", s.layer);
        check_dim(where + ".dim", s.dim);
        break;
      case StageKind::sft_mrl:
        check_layer(where + ".layer", s.layer);
        for (std::size_t k = 0; k < s.dims.size(); ++k) check_dim(where + ".dims[" + std::to_string(k) + "]", s.dims[k]);
        break;
      default:
        if (s.granularity) {
          for (std::size_t k = 0; k < s.granularity->layers.size(); ++k) {
            check_layer(where + ".granularity.layers[" + std::to_string(k) + "]", s.granularity->layers[k]);
          }
          for (std::size_t k = 0; k < s.granularity->dims.size(); ++k) {
            check_dim(where + ".granularity.dims[" + std::to_string(k) + "]", s.granularity->dims[k]);
          }
        }
        break;
    }
    try {
      s.validate(m);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  if (eval) {
    if (eval->layer < 1 || eval->layer > m.n_layers) {
      throw ConfigError("eval.layer: " + std::to_string(eval->layer) + " outside [1, " + std::to_string(m.n_layers) + "]");
    }
    if (eval->dim < 1 || eval->dim > m.hidden) {
      throw ConfigError("eval.dim: " + std::to_string(eval->dim) + " outside [1, " + std::to_string(m.hidden) + "]");
    }
  }
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j{{"seed", c.seed}, {"dtype", c.dtype}, {"output", c.output.string()}, {"seq", c.seq}};
  if (c.model) j["model"] = *c.model;
  if (c.init) j["init"] = c.init->string();
  nlohmann::json data = nlohmann::json::object();
  for (const auto& [name, s] : c.data) {
    nlohmann::json sj{{"type", s.type}};
    if (s.type == "multilingual") {
      nlohmann::json langs = nlohmann::json::array();
      for (const auto& [lang, p] : s.files) langs.push_back({{"name", lang}, {"path", p.string()}});
      sj["languages"] = langs;
      sj["smoothing"] = s.smoothing;
    } else {
      sj["path"] = s.files.at(0).second.string();
    }
    if (s.type == "pairs") {
      sj["dedup"] = s.dedup;
      sj["cap_per_query"] = s.cap_per_query;
    }
    data[name] = sj;
  }
  j["data"] = data;
  j["stages"] = c.stages;
  if (c.eval) {
    j["eval"] = {{"docs", c.eval->docs.string()},
                 {"queries", c.eval->queries.string()},
                 {"layer", c.eval->layer},
                 {"dim", c.eval->dim},
                 {"k", c.eval->ks}};
  }
  return j;
}

}  // namespace m3::cli
