#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvtt/model.hpp"
#include "mvtt/volume.hpp"

namespace mvtt {

// Checkpoint directory:
//   manifest.json  {format_version: 1, dtype: "f32le", blob: "params.f32",
//                   config: MvttConfig,
//                   entries: [{name, shape, offset, count}]}   offset in bytes
//   params.f32     every entry's values, contiguous, in manifest order

inline constexpr const char* kCheckpointManifest = "manifest.json";
inline constexpr const char* kCheckpointBlob = "params.f32";

inline void save_checkpoint(const MvttParams& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["dtype"] = "f32le";
  manifest["blob"] = kCheckpointBlob;
  manifest["config"] = params.config;
  auto entries = nlohmann::ordered_json::array();
  std::vector<char> blob;
  for (const auto& [name, tensor] : params.state()) {
    entries.push_back({{"name", name}, {"shape", tensor.shape()}, {"offset", blob.size()}, {"count", tensor.numel()}});
    for (double v : tensor.data()) detail::append_f32le(blob, static_cast<float>(v));
  }
  manifest["entries"] = entries;
  detail::write_file_bytes(dir / kCheckpointBlob, blob);
  std::ofstream out(dir / kCheckpointManifest, std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

inline MvttParams load_checkpoint(const std::filesystem::path& dir) {
  auto fail = [&](const std::string& what) {
    return Error("checkpoint manifest validation failed (" + dir.string() + "): " + what);
  };
  nlohmann::json manifest;
  {
    std::ifstream in(dir / kCheckpointManifest);
    if (!in) throw fail("missing " + std::string(kCheckpointManifest));
    try {
      in >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed JSON: ") + e.what());
    }
  }
  try {
    if (manifest.at("format_version").get<int>() != 1) throw fail("unknown format_version");
    if (manifest.at("dtype").get<std::string>() != "f32le") throw fail("unsupported dtype");
    MvttConfig config = manifest.at("config").get<MvttConfig>();
    MvttParams params = MvttParams::zeros(config);
    auto expected = params.state();
    const auto& entries = manifest.at("entries");
    if (entries.size() != expected.size()) {
      throw fail("manifest lists " + std::to_string(entries.size()) + " tensors, model expects " +
                 std::to_string(expected.size()));
    }
    const auto bytes = detail::read_file_bytes(dir / manifest.at("blob").get<std::string>());
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const auto name = e.at("name").get<std::string>();
      if (name != expected[i].name) throw fail("entry " + std::to_string(i) + " is '" + name + "', expected '" +
                                               expected[i].name + "'");
      const auto shape = e.at("shape").get<Shape>();
      if (shape != expected[i].tensor.shape()) {
        throw fail("'" + name + "' has shape " + to_string(shape) + ", expected " +
                   to_string(expected[i].tensor.shape()));
      }
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (offset != cursor || count != numel(shape)) throw fail("'" + name + "' has inconsistent offset or count");
      if (offset + 4 * count > bytes.size()) {
        throw fail("blob has " + std::to_string(bytes.size()) + " bytes, '" + name + "' needs " +
                   std::to_string(offset + 4 * count));
      }
      auto& dst = expected[i].tensor.data();
      for (std::size_t k = 0; k < count; ++k) dst[k] = detail::read_f32le(raw + offset + 4 * k);
      cursor = offset + 4 * count;
    }
    if (cursor != bytes.size()) {
      throw fail("blob has " + std::to_string(bytes.size()) + " bytes, manifest covers " + std::to_string(cursor));
    }
    return params;
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  } catch (const Error& e) {
    const std::string what = e.what();
    if (what.rfind("checkpoint manifest validation failed", 0) == 0) throw;
    throw fail(what);
  }
}

/// Raw f64 little-endian array I/O for optimizer state.
inline void write_f64_blob(const std::filesystem::path& path, const std::vector<double>& values) {
  std::vector<char> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
  }
  detail::write_file_bytes(path, bytes);
}

inline std::vector<double> read_f64_blob(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.size() % 8 != 0) throw Error(path.string() + ": size is not a multiple of 8");
  std::vector<double> values(bytes.size() / 8);
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[8 * i + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

}  // namespace mvtt
