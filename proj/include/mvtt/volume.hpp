#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvtt/tensor.hpp"

namespace mvtt {

enum class VolumeKind { intensity, label };

inline const char* to_string(VolumeKind k) { return k == VolumeKind::intensity ? "intensity" : "label"; }

/// Scalar grid in (Z, Y, X) row-major order with physical spacing in mm.
struct Volume {
  std::array<std::size_t, 3> dims{1, 1, 1};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  VolumeKind kind = VolumeKind::intensity;
  std::vector<double> values;

  Volume() : values(1, 0.0) {}
  Volume(std::array<std::size_t, 3> d, std::array<double, 3> s, VolumeKind k, double fill = 0.0)
      : dims(d), spacing_mm(s), kind(k), values(d[0] * d[1] * d[2], fill) {}

  std::size_t size() const { return values.size(); }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  double& at(std::size_t z, std::size_t y, std::size_t x) { return values[index(z, y, x)]; }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return values[index(z, y, x)]; }
  double voxel_volume_mm3() const { return spacing_mm[0] * spacing_mm[1] * spacing_mm[2]; }

  bool same_grid(const Volume& other) const { return dims == other.dims && spacing_mm == other.spacing_mm; }

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw Error("volume: dims must be >= 1 on every axis");
      if (!(spacing_mm[a] > 0.0)) throw Error("volume: spacing must be positive on every axis");
    }
    if (values.size() != dims[0] * dims[1] * dims[2]) {
      throw Error("volume: " + std::to_string(values.size()) + " values for dims " + std::to_string(dims[0]) + "x" +
                  std::to_string(dims[1]) + "x" + std::to_string(dims[2]));
    }
    if (kind == VolumeKind::label) {
      for (double v : values)
        if (v != 0.0 && v != 1.0) throw Error("volume: label volume contains value " + std::to_string(v));
    }
  }

  /// (Z, 1, Y, X) view as a stack of single-channel axial slices.
  Tensor as_axial_tensor() const { return Tensor(Shape{dims[0], 1, dims[1], dims[2]}, values); }
};

inline std::string dims_string(const std::array<std::size_t, 3>& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

/// Rounds every value through 32-bit float so the volume survives f32 storage bitwise.
inline void quantize_to_f32(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------
// File format: <name>.vjson header next to a <name>.vraw blob.
//   {format_version: 1, kind, dims: [Z,Y,X], spacing_mm: [sz,sy,sx],
//    dtype: "f32le" | "u8", blob: "<name>.vraw"}
// The blob is row-major with Z slowest. Intensities are f32 little endian;
// labels are u8 in {0,1}.

namespace detail {

inline void append_f32le(std::vector<char>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

inline float read_f32le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

}  // namespace detail

/// Writes `<stem>.vjson` and `<stem>.vraw`; `path` may name either or the bare stem.
inline void write_volume(const Volume& volume, const std::filesystem::path& path) {
  volume.validate();
  std::filesystem::path header = path;
  header.replace_extension(".vjson");
  std::filesystem::path blob = path;
  blob.replace_extension(".vraw");
  if (header.has_parent_path()) std::filesystem::create_directories(header.parent_path());

  const bool label = volume.kind == VolumeKind::label;
  std::vector<char> bytes;
  bytes.reserve(volume.size() * (label ? 1 : 4));
  for (double v : volume.values) {
    if (label) {
      bytes.push_back(static_cast<char>(v != 0.0 ? 1 : 0));
    } else {
      detail::append_f32le(bytes, static_cast<float>(v));
    }
  }
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["kind"] = to_string(volume.kind);
  j["dims"] = volume.dims;
  j["spacing_mm"] = volume.spacing_mm;
  j["dtype"] = label ? "u8" : "f32le";
  j["blob"] = blob.filename().string();
  detail::write_file_bytes(blob, bytes);
  std::ofstream out(header, std::ios::trunc);
  if (!out) throw Error("cannot write " + header.string());
  out << j.dump(2) << '\n';
}

inline Volume read_volume(const std::filesystem::path& path) {
  std::filesystem::path header = path;
  header.replace_extension(".vjson");
  nlohmann::json j;
  {
    std::ifstream in(header);
    if (!in) throw Error("cannot open volume header " + header.string());
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed volume header " + header.string() + ": " + e.what());
    }
  }
  auto fail = [&](const std::string& what) { return Error("volume header " + header.string() + ": " + what); };
  try {
    if (!j.is_object()) throw fail("not a JSON object");
    for (const char* key : {"format_version", "kind", "dims", "spacing_mm", "dtype", "blob"})
      if (!j.contains(key)) throw fail(std::string("missing field '") + key + "'");
    const int version = j.at("format_version").get<int>();
    if (version != 1) throw fail("unknown format_version " + std::to_string(version));

    Volume v;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "intensity") {
      v.kind = VolumeKind::intensity;
    } else if (kind == "label") {
      v.kind = VolumeKind::label;
    } else {
      throw fail("unknown kind '" + kind + "'");
    }
    const auto dims = j.at("dims").get<std::vector<long long>>();
    const auto spacing = j.at("spacing_mm").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3) throw fail("dims and spacing_mm need exactly 3 entries");
    for (std::size_t a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw fail("dims must be >= 1");
      if (!(spacing[a] > 0.0)) throw fail("spacing_mm must be positive");
      v.dims[a] = static_cast<std::size_t>(dims[a]);
      v.spacing_mm[a] = spacing[a];
    }
    const auto dtype = j.at("dtype").get<std::string>();
    const std::string expected_dtype = v.kind == VolumeKind::label ? "u8" : "f32le";
    if (dtype != expected_dtype) throw fail("dtype '" + dtype + "' does not match kind '" + kind + "'");

    const auto blob_path = header.parent_path() / j.at("blob").get<std::string>();
    const auto bytes = detail::read_file_bytes(blob_path);
    const std::size_t count = v.dims[0] * v.dims[1] * v.dims[2];
    const std::size_t width = v.kind == VolumeKind::label ? 1 : 4;
    if (bytes.size() != count * width) {
      throw fail("blob " + blob_path.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                 std::to_string(count * width));
    }
    v.values.resize(count);
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < count; ++i) {
      if (v.kind == VolumeKind::label) {
        if (raw[i] > 1) throw fail("label value " + std::to_string(raw[i]) + " at voxel " + std::to_string(i));
        v.values[i] = raw[i];
      } else {
        v.values[i] = detail::read_f32le(raw + 4 * i);
      }
    }
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
}

}  // namespace mvtt
