#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvtt/volume.hpp"

namespace mvtt {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Ratio metrics; an empty optional means the ratio is undefined (zero denominator).
struct SegmentationMetrics {
  std::optional<double> accuracy, sensitivity, specificity, dice;
};

struct ScarBurden {
  double scar_volume_mm3 = 0.0;
  double wall_volume_mm3 = 0.0;
  double percentage = 0.0;
};

struct AgreementStats {
  double bias = 0.0;
  double sd = 0.0;
  double loa_low = 0.0;
  double loa_high = 0.0;
};

/// Wall thickness used for scar-extent quantification, in mm.
inline constexpr double kWallThicknessMm = 2.25;

inline void require_binary(const Volume& v, const char* what) {
  for (double x : v.values)
    if (x != 0.0 && x != 1.0) throw Error(std::string(what) + ": mask is not binary");
}

inline ConfusionCounts confusion(const Volume& pred, const Volume& truth) {
  if (pred.dims != truth.dims) {
    throw Error("confusion: shape mismatch " + dims_string(pred.dims) + " vs " + dims_string(truth.dims));
  }
  require_binary(pred, "confusion");
  require_binary(truth, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] != 0.0;
    const bool g = truth.values[i] != 0.0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline SegmentationMetrics metrics(const ConfusionCounts& c) {
  auto ratio = [](double num, double den) -> std::optional<double> {
    if (den == 0.0) return std::nullopt;
    return num / den;
  };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  return {ratio(tp + tn, tp + fp + fn + tn), ratio(tp, tp + fn), ratio(tn, tn + fp), ratio(2 * tp, 2 * tp + fp + fn)};
}

/// Exposed-face surface area of a binary mask in mm^2. Faces on the grid
/// border count as exposed.
inline double surface_area_mm2(const Volume& mask) {
  const auto [nz, ny, nx] = mask.dims;
  const auto [sz, sy, sx] = mask.spacing_mm;
  const double area[3] = {sy * sx, sz * sx, sz * sy};
  auto inside = [&](long z, long y, long x) {
    if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(nz) || y >= static_cast<long>(ny) ||
        x >= static_cast<long>(nx))
      return false;
    return mask.at(static_cast<std::size_t>(z), static_cast<std::size_t>(y), static_cast<std::size_t>(x)) != 0.0;
  };
  std::uint64_t faces[3] = {0, 0, 0};
  for (long z = 0; z < static_cast<long>(nz); ++z)
    for (long y = 0; y < static_cast<long>(ny); ++y)
      for (long x = 0; x < static_cast<long>(nx); ++x) {
        if (!inside(z, y, x)) continue;
        faces[0] += !inside(z - 1, y, x) + !inside(z + 1, y, x);
        faces[1] += !inside(z, y - 1, x) + !inside(z, y + 1, x);
        faces[2] += !inside(z, y, x - 1) + !inside(z, y, x + 1);
      }
  return static_cast<double>(faces[0]) * area[0] + static_cast<double>(faces[1]) * area[1] +
         static_cast<double>(faces[2]) * area[2];
}

/// Scar volume as a percentage of a wall modeled as the anatomy surface
/// extruded to a fixed thickness.
inline ScarBurden scar_burden(const Volume& scar_mask, const Volume& anatomy_mask,
                              double wall_thickness_mm = kWallThicknessMm) {
  if (!scar_mask.same_grid(anatomy_mask)) {
    throw Error("scar_burden: scar grid " + dims_string(scar_mask.dims) + " does not match anatomy grid " +
                dims_string(anatomy_mask.dims));
  }
  require_binary(scar_mask, "scar_burden");
  require_binary(anatomy_mask, "scar_burden");
  ScarBurden b;
  b.wall_volume_mm3 = surface_area_mm2(anatomy_mask) * wall_thickness_mm;
  if (b.wall_volume_mm3 <= 0.0) throw Error("scar_burden: empty anatomy, wall volume undefined");
  std::uint64_t scar = 0;
  for (double v : scar_mask.values) scar += v != 0.0;
  b.scar_volume_mm3 = static_cast<double>(scar) * scar_mask.voxel_volume_mm3();
  b.percentage = 100.0 * b.scar_volume_mm3 / b.wall_volume_mm3;
  return b;
}

inline double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Sample (n-1) standard deviation.
inline double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) throw Error("sample_sd: need at least 2 values");
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw Error("pearson: need two series of equal length >= 2, got " + std::to_string(xs.size()) + " and " +
                std::to_string(ys.size()));
  }
  const double mx = mean_of(xs), my = mean_of(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("pearson: zero variance series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Differences are ys - xs; limits of agreement are bias -/+ 1.96 sample SDs.
inline AgreementStats bland_altman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw Error("bland_altman: need two series of equal length >= 2, got " + std::to_string(xs.size()) + " and " +
                std::to_string(ys.size()));
  }
  std::vector<double> d(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) d[i] = ys[i] - xs[i];
  AgreementStats s;
  s.bias = mean_of(d);
  s.sd = sample_sd(d);
  s.loa_low = s.bias - 1.96 * s.sd;
  s.loa_high = s.bias + 1.96 * s.sd;
  return s;
}

/// Mean and sample SD of the defined entries; undefined entries are skipped.
struct Summary {
  std::optional<double> mean, sd;
  std::size_t count = 0;
};

inline Summary summarize(const std::vector<std::optional<double>>& values) {
  std::vector<double> defined;
  for (const auto& v : values)
    if (v) defined.push_back(*v);
  Summary s;
  s.count = defined.size();
  if (!defined.empty()) s.mean = mean_of(defined);
  if (defined.size() >= 2) s.sd = sample_sd(defined);
  return s;
}

}  // namespace mvtt
