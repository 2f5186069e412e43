// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/trainer/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace m3 {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', '3', 'C', 'K'};

template <typename T> const char* dtype_name() { return sizeof(T) == 4 ? "f32" : "f64"; }

std::uint32_t crc_of(const void* data, std::size_t bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (bytes > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    bytes -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

struct PendingTensor {
  std::string name;
  const void* data;
  Shape shape;
  std::size_t bytes;
};

template <typename U, typename T>
Tensor<T> decode_tensor(const char* bytes, const Shape& shape) {
  Tensor<U> raw(shape);
  std::memcpy(raw.data(), bytes, raw.numel() * sizeof(U));
  if constexpr (std::is_same_v<U, T>) {
    return raw;
  } else {
    return raw.template cast<T>();
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path) {
  std::vector<PendingTensor> tensors;
  for (const auto& [name, var] : ckpt.params) {
    tensors.push_back({"params/" + name, var.value().data(), var.shape(), var.value().numel() * sizeof(T)});
  }
  nlohmann::json opt = nullptr;
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    for (std::size_t i = 0; i < o.names.size(); ++i) {
      tensors.push_back({"adam_m/" + o.names[i], o.m[i].data(), o.m[i].shape(), o.m[i].numel() * sizeof(T)});
    }
    for (std::size_t i = 0; i < o.names.size(); ++i) {
      tensors.push_back({"adam_v/" + o.names[i], o.v[i].data(), o.v[i].shape(), o.v[i].numel() * sizeof(T)});
    }
    opt = nlohmann::json{{"config", o.config}, {"t", o.t}, {"names", o.names}};
  }
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    entries.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"bytes", t.bytes},
                       {"crc32", crc_of(t.data, t.bytes)}});
    offset += t.bytes;
  }
  const nlohmann::json manifest{{"dtype", dtype_name<T>()},
                                {"config", ckpt.config},
                                {"optimizer", opt},
                                {"rng", ckpt.rng_state},
                                {"seed", ckpt.seed},
                                {"step", ckpt.step},
                                {"stage", ckpt.stage},
                                {"vocab", ckpt.vocab},
                                {"extra", ckpt.extra},
                                {"fingerprint", ckpt.params.fingerprint()},
                                {"payload_bytes", offset},
                                {"tensors", entries}};
  const std::string text = manifest.dump();

  // Write next to the target and rename, so a crash never leaves a torn file.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(kMagic, 4);
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) out.write(static_cast<const char*>(t.data), static_cast<std::streamsize>(t.bytes));
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

struct RawCheckpoint {
  nlohmann::json manifest;
  std::string payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  const std::string where = "checkpoint " + path.string();
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (file_size < 16 || !in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IntegrityError(where + ": missing M3CK header");
  }
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion) {
    throw VersionError(where + ": format version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  }
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (len > file_size - 16) throw IntegrityError(where + ": manifest length exceeds file size");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  RawCheckpoint raw;
  try {
    raw.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(where + ": unreadable manifest: " + e.what());
  }
  const auto payload_bytes = raw.manifest.value("payload_bytes", std::uint64_t{0});
  if (file_size - 16 - len != payload_bytes) {
    throw IntegrityError(where + ": payload is " + std::to_string(file_size - 16 - len) + " bytes, manifest says " +
                         std::to_string(payload_bytes));
  }
  if (with_payload) {
    raw.payload.resize(payload_bytes);
    in.read(raw.payload.data(), static_cast<std::streamsize>(payload_bytes));
    if (!in) throw IntegrityError(where + ": short read");
  }
  return raw;
}

}  // namespace

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path) {
  return read_raw(path, false).manifest;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path, true);
  const auto& mf = raw.manifest;
  const std::string where = "checkpoint " + path.string();
  try {
    const std::string dtype = mf.at("dtype").get<std::string>();
    if (dtype != "f32" && dtype != "f64") throw IntegrityError(where + ": unknown dtype " + dtype);
    std::map<std::string, Tensor<T>> tensors;
    for (const auto& e : mf.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto bytes = e.at("bytes").get<std::uint64_t>();
      const std::size_t width = dtype == "f32" ? 4 : 8;
      if (offset + bytes > raw.payload.size() || bytes != shape_numel(shape) * width) {
        throw IntegrityError(where + ": tensor '" + name + "' lies outside the payload");
      }
      const char* p = raw.payload.data() + offset;
      if (crc_of(p, bytes) != e.at("crc32").get<std::uint32_t>()) {
        throw IntegrityError(where + ": checksum mismatch in tensor '" + name + "'");
      }
      tensors.emplace(name, dtype == "f32" ? decode_tensor<float, T>(p, shape) : decode_tensor<double, T>(p, shape));
    }
    Checkpoint<T> ck;
    ck.config = mf.at("config").get<ModelConfig>();
    for (const auto& [name, shape] : parameter_layout(ck.config)) {
      auto it = tensors.find("params/" + name);
      if (it == tensors.end()) throw IntegrityError(where + ": missing parameter '" + name + "'");
      ck.params.add(name, std::move(it->second));
    }
    if (!mf.at("optimizer").is_null()) {
      const auto& o = mf.at("optimizer");
      OptimizerState<T> s;
      s.config = o.at("config").get<AdamWConfig>();
      s.t = o.at("t").get<std::uint64_t>();
      s.names = o.at("names").get<std::vector<std::string>>();
      for (const auto& n : s.names) {
        auto m = tensors.find("adam_m/" + n);
        auto v = tensors.find("adam_v/" + n);
        if (m == tensors.end() || v == tensors.end()) {
          throw IntegrityError(where + ": missing optimizer moments for '" + n + "'");
        }
        s.m.push_back(std::move(m->second));
        s.v.push_back(std::move(v->second));
      }
      s.check_compatible(ck.params);
      ck.optimizer = std::move(s);
    }
    ck.rng_state = mf.at("rng").get<std::string>();
    ck.seed = mf.at("seed").get<std::uint64_t>();
    ck.step = mf.at("step").get<std::uint64_t>();
    ck.stage = mf.at("stage").get<std::string>();
    ck.vocab = mf.at("vocab").get<std::vector<std::string>>();
    ck.extra = mf.at("extra");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(where + ": malformed manifest: " + e.what());
  }
}

template void save_checkpoint(const Checkpoint<float>&, const std::filesystem::path&);
template void save_checkpoint(const Checkpoint<double>&, const std::filesystem::path&);
template Checkpoint<float> load_checkpoint(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace m3
