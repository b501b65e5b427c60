// Copyright 2026 The mhred Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Checkpoint files (little-endian):
//
//   "MHREDCKP" | u32 version | u64 header length | header JSON
//   u64 tensor count | per tensor: u32 name length | name | u32 ndim | u64 dims[ndim]
//                                  | f64 values (row-major)
//   "END!"
//
// The header JSON holds {"config": ModelConfig, "meta": {...}}. Values are stored as raw
// doubles, so a save/load round trip is exact.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhred/error.hpp"
#include "mhred/model.hpp"

namespace mhred {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw LoadError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                            const ModelParams& params,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
  // Write to a sibling file first so a failed save never leaves a partial checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw LoadError("cannot write checkpoint " + path.string());
    out.write("MHREDCKP", 8);
    detail::write_pod(out, kCheckpointVersion);
    const std::string header = nlohmann::json{{"config", cfg}, {"meta", meta}}.dump();
    detail::write_pod(out, std::uint64_t{header.size()});
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto named = params.named();
    detail::write_pod(out, std::uint64_t{named.size()});
    for (const auto& [name, t] : named) {
      detail::write_pod(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_pod(out, static_cast<std::uint32_t>(t.ndim()));
      for (std::size_t d : t.shape()) detail::write_pod(out, std::uint64_t{d});
      out.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    out.write("END!", 4);
    if (!out) throw LoadError("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint; nothing is returned unless every tensor was read and matched.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "MHREDCKP", 8) != 0)
    throw LoadError(path.string() + ": not a checkpoint file");
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw LoadError(path.string() + ": checkpoint version " + std::to_string(version) +
                    ", expected " + std::to_string(kCheckpointVersion));
  const auto header_len = detail::read_pod<std::uint64_t>(in, "header length");
  if (header_len > (std::uint64_t{1} << 26)) throw LoadError(path.string() + ": bad header length");
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len)))
    throw LoadError(path.string() + ": checkpoint truncated in header");
  Checkpoint ck;
  try {
    auto j = nlohmann::json::parse(header);
    ck.config = j.at("config").get<ModelConfig>();
    ck.meta = j.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad checkpoint header: " + e.what());
  }
  try {
    ck.params = ModelParams::zeros(ck.config);
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  auto named = ck.params.named();
  const auto count = detail::read_pod<std::uint64_t>(in, "tensor count");
  if (count != named.size())
    throw LoadError(path.string() + ": " + std::to_string(count) + " tensors, configuration needs " +
                    std::to_string(named.size()));
  for (auto& [expected, t] : named) {
    const auto name_len = detail::read_pod<std::uint32_t>(in, "tensor name");
    if (name_len > 4096) throw LoadError(path.string() + ": bad tensor name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw LoadError("checkpoint truncated in tensor name");
    if (name != expected)
      throw LoadError(path.string() + ": expected tensor " + expected + ", found " + name);
    const auto ndim = detail::read_pod<std::uint32_t>(in, name + " rank");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d)
      shape.push_back(detail::read_pod<std::uint64_t>(in, name + " shape"));
    if (shape != t.shape())
      throw LoadError(path.string() + ": tensor " + name + " has shape " + shape_str(shape) +
                      ", expected " + shape_str(t.shape()));
    auto dst = t.mutable_data();
    if (!in.read(reinterpret_cast<char*>(dst.data()),
                 static_cast<std::streamsize>(dst.size() * sizeof(double))))
      throw LoadError(path.string() + ": checkpoint truncated in tensor " + name);
  }
  char tail[4];
  if (!in.read(tail, 4) || std::memcmp(tail, "END!", 4) != 0)
    throw LoadError(path.string() + ": checkpoint truncated (missing end marker)");
  return ck;
}

}  // namespace mhred
