// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moelpr/errors.hpp"
#include "moelpr/hash.hpp"
#include "moelpr/model.hpp"

namespace moelpr {

// Named-tensor archive, versioned "MOELPR1" magic:
//
//   [0..8)   magic "MOELPR1\0"
//   [8..12)  u32 little-endian header length H
//   [12..12+H)  JSON header: version, model config, seed, freeze metadata,
//               tensor directory (name, dtype, shape, payload offset, bytes)
//   [12+H..12+H+P)  payload: raw little-endian f64 tensor data
//   last 32 bytes   SHA-256 over everything before it
//
// The header JSON is emitted with sorted keys and the tensor directory in
// store order, so save -> load -> save is byte-identical.

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'L', 'P', 'R', '1', '\0'};
inline constexpr uint32_t kCheckpointVersion = 1;

/// Model weights plus everything needed to resume: config, per-stage
/// trainability metadata, and the RNG seed the weights were drawn from.
struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  ModelConfig config;
  ParamStore tensors;
  std::map<std::string, std::map<std::string, bool>> freeze;  // stage -> name -> trainable
  uint64_t seed = 0;
};

inline Checkpoint checkpoint_from_model(const MoEModel& m) {
  Checkpoint c;
  c.config = m.config;
  c.seed = m.seed;
  for (const auto& [name, t] : m.params.items()) c.tensors.add(name, t);
  return c;
}

/// Rebuilds a model, checking that the archive holds exactly the parameter
/// set the config implies (same names, same shapes, nothing extra).
inline MoEModel model_from_checkpoint(const Checkpoint& c) {
  MoEModel expect = MoEModel::init(c.config, c.seed);
  if (expect.params.size() != c.tensors.size())
    throw FormatError("checkpoint: expected " + std::to_string(expect.params.size()) +
                      " tensors for this config, found " + std::to_string(c.tensors.size()));
  for (auto& [name, t] : expect.params.items()) {
    if (!c.tensors.has(name)) throw FormatError("checkpoint: missing tensor '" + name + "'");
    const Tensor& src = c.tensors.get(name);
    if (!src.same_shape(t))
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + src.shape_str() +
                        ", expected " + t.shape_str());
    t = src;
  }
  return expect;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  nlohmann::json dir = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors.items()) {
    const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * sizeof(double);
    dir.push_back({{"name", name},
                   {"dtype", "f64"},
                   {"shape", {t.rows, t.cols}},
                   {"offset", offset},
                   {"nbytes", nbytes}});
    offset += nbytes;
  }
  nlohmann::json header{{"version", c.version},
                        {"config", c.config.to_json()},
                        {"seed", c.seed},
                        {"freeze", c.freeze},
                        {"tensors", dir}};
  const std::string header_str = header.dump();
  if (header_str.size() > UINT32_MAX) throw IoError("save_checkpoint: header too large");

  std::string blob;
  blob.reserve(12 + header_str.size() + offset);
  blob.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint32_t hlen = static_cast<uint32_t>(header_str.size());
  blob.append(reinterpret_cast<const char*>(&hlen), 4);
  blob.append(header_str);
  for (const auto& [name, t] : c.tensors.items())
    blob.append(reinterpret_cast<const char*>(t.data.data()), t.numel() * sizeof(double));
  const auto digest = sha256_bytes(blob.data(), blob.size());
  blob.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < 12 + 32) throw TruncatedError("load_checkpoint: file too short: " + path);
  if (std::memcmp(blob.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw FormatError("load_checkpoint: bad magic (not a MOELPR1 checkpoint): " + path);
  uint32_t hlen = 0;
  std::memcpy(&hlen, blob.data() + 8, 4);
  if (blob.size() < 12 + static_cast<size_t>(hlen) + 32)
    throw TruncatedError("load_checkpoint: header extends past end of file: " + path);

  // verify the trailing checksum before trusting anything else
  const size_t body = blob.size() - 32;
  const auto digest = sha256_bytes(blob.data(), body);
  if (std::memcmp(digest.data(), blob.data() + body, 32) != 0)
    throw ChecksumError("load_checkpoint: checksum mismatch (truncated or corrupt): " + path);

  nlohmann::json header =
      nlohmann::json::parse(blob.substr(12, hlen), nullptr, false);
  if (header.is_discarded())
    throw FormatError("load_checkpoint: unreadable header JSON: " + path);
  Checkpoint c;
  c.version = header.at("version").get<uint32_t>();
  if (c.version != kCheckpointVersion)
    throw VersionError("load_checkpoint: version " + std::to_string(c.version) +
                       " unsupported (want " + std::to_string(kCheckpointVersion) + ")");
  c.config = ModelConfig::from_json(header.at("config"));
  c.seed = header.at("seed").get<uint64_t>();
  c.freeze = header.at("freeze")
                 .get<std::map<std::string, std::map<std::string, bool>>>();

  const size_t payload_start = 12 + hlen;
  const size_t payload_len = body - payload_start;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    if (entry.at("dtype").get<std::string>() != "f64")
      throw FormatError("load_checkpoint: tensor '" + name + "' has unsupported dtype");
    const int64_t rows = entry.at("shape")[0].get<int64_t>();
    const int64_t cols = entry.at("shape")[1].get<int64_t>();
    const uint64_t off = entry.at("offset").get<uint64_t>();
    const uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(rows * cols) * sizeof(double) ||
        off + nbytes > payload_len)
      throw FormatError("load_checkpoint: tensor '" + name + "' directory entry is corrupt");
    Tensor t(rows, cols);
    std::memcpy(t.data.data(), blob.data() + payload_start + off, nbytes);
    c.tensors.add(name, std::move(t));
  }
  return c;
}

}  // namespace moelpr
