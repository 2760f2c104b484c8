#pragma once

#include "clens/error.hpp"
#include "clens/model/weights.hpp"
#include "clens/util/hash.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

namespace clens {

// File layout:
//   "CLNS1"                       5 bytes
//   manifest length               uint64, little-endian
//   manifest                      UTF-8 JSON
//   payload                       contiguous little-endian f32
// Manifest: {"format":"CLNS1","spec":{...},"payload_bytes":N,
//            "tensors":[{"name":..,"shape":[..],"offset":..}, ...]}
// Offsets are byte offsets from the start of the payload.
inline constexpr char kCheckpointMagic[] = "CLNS1";

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace detail

/// Serialises weights to the checkpoint byte layout.
inline std::string encode_checkpoint(const Weights<float>& w) {
  nlohmann::json manifest;
  manifest["format"] = kCheckpointMagic;
  manifest["spec"] = w.spec;
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : param_views(w)) {
    tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", payload.size()}});
    for (std::size_t i = 0; i < p.size; ++i) detail::put_f32_le(payload, p.data[i]);
  }
  manifest["tensors"] = tensors;
  manifest["payload_bytes"] = payload.size();
  const std::string header = manifest.dump();
  std::string out(kCheckpointMagic);
  detail::put_u64_le(out, header.size());
  out += header;
  out += payload;
  return out;
}

inline Weights<float> decode_checkpoint(const std::string& bytes) {
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  if (bytes.size() < magic_len + 8 || bytes.compare(0, magic_len, kCheckpointMagic) != 0)
    throw ArtifactError("checkpoint: malformed header (bad magic)");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t mlen = detail::get_u64_le(raw + magic_len);
  const std::size_t payload_start = magic_len + 8 + mlen;
  if (mlen > bytes.size() || payload_start > bytes.size())
    throw ArtifactError("checkpoint: malformed header (manifest length)");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(magic_len + 8, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kCheckpointMagic)
    throw ArtifactError("checkpoint: malformed header (format field)");
  ModelSpec spec;
  try {
    spec = manifest.at("spec").get<ModelSpec>();
    spec.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("checkpoint: bad spec: ") + e.what());
  }
  const std::size_t payload_bytes = manifest.value("payload_bytes", std::size_t{0});
  if (bytes.size() - payload_start < payload_bytes)
    throw ArtifactError("checkpoint: truncated payload");

  Weights<float> w = zero_weights<float>(spec);
  auto views = param_views(w);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != views.size()) throw ShapeError("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != views[i].name)
      throw ShapeError("checkpoint: unexpected tensor '" + t.at("name").get<std::string>() + "'");
    if (t.at("shape").get<std::vector<int>>() != views[i].shape)
      throw ShapeError("checkpoint: shape mismatch for " + views[i].name);
    const std::size_t off = t.at("offset").get<std::size_t>();
    if (off + views[i].size * 4 > payload_bytes)
      throw ArtifactError("checkpoint: truncated payload at " + views[i].name);
    const unsigned char* p = raw + payload_start + off;
    for (std::size_t j = 0; j < views[i].size; ++j) views[i].data[j] = detail::get_f32_le(p + 4 * j);
  }
  return w;
}

inline void save_checkpoint(const Weights<float>& w, const std::string& path) {
  const std::string bytes = encode_checkpoint(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArtifactError("failed writing checkpoint '" + path + "'");
}

inline Weights<float> load_checkpoint(const std::string& path) {
  return decode_checkpoint(util::read_file(path));
}

/// Git-style content hash of the weights' checkpoint encoding.
inline std::string weights_hash(const Weights<float>& w) {
  return util::git_blob_hash(encode_checkpoint(w));
}

}  // namespace clens
