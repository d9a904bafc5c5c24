// Checkpoint blobs and manifests.
//
// <stem>.bin            binary blob, little-endian:
//                         "MSMOCKPT" | u32 version | u32 tensor_count |
//                         per tensor: u32 name_len | name | u64 rows | u64 cols | f64[rows*cols] (column-major)
// <stem>.manifest.json  kind, format version, blob hash, model dimensions,
//                       seed, tokenizer rule, config hash, code version and
//                       any model-specific metadata (e.g. vocabularies).
//
// Manifests are written with sorted keys and no timestamps so identical inputs
// produce byte-identical files.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmo/nn/layers.hpp"

namespace msmo::checkpoint {

using Json = nlohmann::json;

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr const char* kMagic = "MSMOCKPT";
inline constexpr const char* kCodeVersion = "msmo-0.1.0";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a, used for blob and config fingerprints.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::filesystem::path blob_path(const std::filesystem::path& stem) { return stem.string() + ".bin"; }
inline std::filesystem::path manifest_path(const std::filesystem::path& stem) { return stem.string() + ".manifest.json"; }

inline bool exists(const std::filesystem::path& stem) {
  return std::filesystem::exists(blob_path(stem)) && std::filesystem::exists(manifest_path(stem));
}

namespace detail {
template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}
template <typename T>
T get(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw CheckpointError("checkpoint blob truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace detail

inline std::string encode_blob(const nn::ParamList& params) {
  std::string buf(kMagic);
  detail::put<std::uint32_t>(buf, kFormatVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(p->value.rows()));
    detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(p->value.cols()));
    buf.append(reinterpret_cast<const char*>(p->value.data()), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  return buf;
}

inline void decode_blob(const std::string& buf, const nn::ParamList& params) {
  const std::size_t magic_len = std::strlen(kMagic);
  if (buf.compare(0, magic_len, kMagic) != 0) throw CheckpointError("not a checkpoint blob (bad magic)");
  std::size_t pos = magic_len;
  if (detail::get<std::uint32_t>(buf, pos) != kFormatVersion) throw CheckpointError("unsupported checkpoint version");
  const auto count = detail::get<std::uint32_t>(buf, pos);
  if (count != params.size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, model expects " + std::to_string(params.size()));
  for (const auto& [name, p] : params) {
    const auto len = detail::get<std::uint32_t>(buf, pos);
    if (pos + len > buf.size()) throw CheckpointError("checkpoint blob truncated");
    const std::string stored = buf.substr(pos, len);
    pos += len;
    if (stored != name) throw CheckpointError("tensor name mismatch: blob has '" + stored + "', model expects '" + name + "'");
    const auto rows = detail::get<std::uint64_t>(buf, pos);
    const auto cols = detail::get<std::uint64_t>(buf, pos);
    if (static_cast<Eigen::Index>(rows) != p->value.rows() || static_cast<Eigen::Index>(cols) != p->value.cols())
      throw CheckpointError("shape mismatch for tensor '" + name + "'");
    const std::size_t bytes = sizeof(double) * rows * cols;
    if (pos + bytes > buf.size()) throw CheckpointError("checkpoint blob truncated");
    std::memcpy(p->value.data(), buf.data() + pos, bytes);
    pos += bytes;
    p->zero_grad();
  }
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes blob + manifest. `meta` is merged into the manifest.
inline void save(const std::filesystem::path& stem, const std::string& kind, const nn::ParamList& params, const Json& meta) {
  const std::string blob = encode_blob(params);
  write_file(blob_path(stem), blob);
  Json manifest = meta;
  manifest["kind"] = kind;
  manifest["format_version"] = kFormatVersion;
  manifest["code_version"] = kCodeVersion;
  manifest["blob"] = blob_path(stem).filename().string();
  manifest["blob_fnv1a"] = hex64(fnv1a(blob));
  manifest["tensor_count"] = params.size();
  write_file(manifest_path(stem), manifest.dump(2) + "\n");
}

inline Json read_manifest(const std::filesystem::path& stem) {
  try {
    return Json::parse(read_file(manifest_path(stem)));
  } catch (const Json::exception& e) {
    throw CheckpointError("malformed manifest " + manifest_path(stem).string() + ": " + e.what());
  }
}

/// Loads tensors into `params` after checking kind and blob hash. Returns the
/// manifest.
inline Json load(const std::filesystem::path& stem, const std::string& kind, const nn::ParamList& params) {
  Json manifest = read_manifest(stem);
  if (manifest.value("kind", "") != kind)
    throw CheckpointError("checkpoint " + stem.string() + " is of kind '" + manifest.value("kind", "") + "', expected '" + kind + "'");
  const std::string blob = read_file(blob_path(stem));
  if (manifest.value("blob_fnv1a", "") != hex64(fnv1a(blob)))
    throw CheckpointError("checkpoint blob hash does not match manifest: " + blob_path(stem).string());
  decode_blob(blob, params);
  return manifest;
}

}  // namespace msmo::checkpoint
