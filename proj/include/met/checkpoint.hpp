#pragma once

// Checkpoints: `<prefix>.json` manifest plus `<prefix>.bin` blob of
// little-endian float32 values, row-major, tensors back to back.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "met/tensor.hpp"

namespace met {

inline constexpr const char* kCheckpointDtype = "f32le";

struct TensorRecord {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // bytes into the blob
};

struct CheckpointManifest {
  std::string dtype = kCheckpointDtype;
  std::string blob;
  std::vector<TensorRecord> tensors;

  std::uint64_t expected_bytes() const {
    std::uint64_t n = 0;
    for (const auto& t : tensors) n += shape_numel(t.shape) * 4;
    return n;
  }

  /// Offsets must be contiguous, in order, and names unique.
  void validate() const {
    if (dtype != kCheckpointDtype) throw DataError("unsupported checkpoint dtype '" + dtype + "'");
    std::set<std::string> names;
    std::uint64_t next = 0;
    for (const auto& t : tensors) {
      if (!names.insert(t.name).second) throw DataError("duplicate tensor name '" + t.name + "'");
      if (t.shape.empty()) throw DataError("tensor '" + t.name + "' has no shape");
      for (auto e : t.shape)
        if (e == 0) throw DataError("tensor '" + t.name + "' has a zero extent");
      if (t.offset != next)
        throw DataError("tensor '" + t.name + "' at offset " + std::to_string(t.offset) +
                        ", expected " + std::to_string(next));
      next += shape_numel(t.shape) * 4;
    }
  }
};

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

inline void put_f32(std::vector<char>& out, double v) {
  const auto f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  bits = to_le(bits);
  const auto* p = reinterpret_cast<const char*>(&bits);
  out.insert(out.end(), p, p + 4);
}

inline double get_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  bits = to_le(bits);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::vector<char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

inline std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* ext) {
  auto p = prefix;
  p += ext;
  return p;
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const CheckpointManifest& m) {
  nlohmann::json j;
  j["dtype"] = m.dtype;
  j["blob"] = m.blob;
  j["tensors"] = nlohmann::json::array();
  for (const auto& t : m.tensors)
    j["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  return j;
}

inline CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  try {
    CheckpointManifest m;
    m.dtype = j.at("dtype").get<std::string>();
    m.blob = j.at("blob").get<std::string>();
    for (const auto& t : j.at("tensors"))
      m.tensors.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>(),
                           t.at("offset").get<std::uint64_t>()});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

/// Writes `<prefix>.json` and `<prefix>.bin`. Names must be unique.
inline CheckpointManifest save_checkpoint(std::span<const Parameter> params,
                                          const std::filesystem::path& prefix) {
  CheckpointManifest m;
  m.blob = detail::with_suffix(prefix, ".bin").filename().string();
  std::vector<char> blob;
  for (const auto& p : params) {
    m.tensors.push_back({p.name, p.tensor.shape(), blob.size()});
    for (double v : p.tensor.data()) detail::put_f32(blob, v);
  }
  m.validate();
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  detail::write_file(detail::with_suffix(prefix, ".bin"), std::string(blob.begin(), blob.end()));
  detail::write_file(detail::with_suffix(prefix, ".json"), manifest_to_json(m).dump(2) + "\n");
  return m;
}

/// Tensors by name, values widened from float32.
using TensorMap = std::map<std::string, Tensor>;

inline TensorMap load_checkpoint(const std::filesystem::path& prefix) {
  const auto manifest_path = detail::with_suffix(prefix, ".json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("cannot parse " + manifest_path.string() + ": " + e.what());
  }
  const auto m = manifest_from_json(j);
  m.validate();
  const auto blob = detail::read_file(manifest_path.parent_path() / m.blob);
  if (blob.size() != m.expected_bytes())
    throw DataError("checkpoint blob " + m.blob + " has " + std::to_string(blob.size()) +
                    " bytes, manifest expects " + std::to_string(m.expected_bytes()));
  TensorMap out;
  for (const auto& t : m.tensors) {
    const auto n = shape_numel(t.shape);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = detail::get_f32(blob.data() + t.offset + 4 * i);
    out.emplace(t.name, Tensor(t.shape, std::move(v)));
  }
  return out;
}

/// Copies loaded values into `targets` in place. Every target must be
/// present with a matching shape; loaded names outside `targets` are an error
/// unless they start with one of `ignore_prefixes`.
inline void assign_checkpoint(const TensorMap& loaded, std::span<Parameter> targets,
                              const std::vector<std::string>& ignore_prefixes = {}) {
  std::set<std::string> wanted;
  for (auto& p : targets) {
    wanted.insert(p.name);
    auto it = loaded.find(p.name);
    if (it == loaded.end()) throw DataError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape())
      throw DataError("tensor '" + p.name + "' has shape " + shape_str(it->second.shape()) +
                      ", config expects " + shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  std::string unknown;
  for (const auto& [name, _] : loaded) {
    if (wanted.count(name)) continue;
    bool skip = false;
    for (const auto& pre : ignore_prefixes) skip = skip || name.rfind(pre, 0) == 0;
    if (!skip) unknown += (unknown.empty() ? "" : ", ") + name;
  }
  if (!unknown.empty()) throw DataError("unknown tensors in checkpoint: " + unknown);
}

}  // namespace met
