#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <limits>
#include <numbers>
#include <vector>

#include "mvtt/metrics.hpp"
#include "mvtt/random.hpp"
#include "mvtt/tensor.hpp"
#include "mvtt/volume.hpp"

namespace mvtt {

/// Synthetic LGE-like atrium: an ellipsoidal blood pool with cylindrical vein
/// stubs, bright scar patches in the boundary band, and a bright fiducial
/// column that keeps per-slice intensity ranges comparable.
struct PhantomSpec {
  std::array<std::size_t, 3> dims{16, 32, 32};
  std::array<double, 3> spacing_mm{2.0, 1.0, 1.0};

  std::array<double, 3> semi_axes_mm{11.0, 9.0, 10.0};
  std::array<double, 3> center_mm{16.0, 16.0, 16.0};

  std::size_t pv_stub_count = 2;
  double pv_radius_mm = 2.0;
  double pv_length_mm = 5.0;

  std::size_t scar_patch_count = 3;
  double scar_half_angle_min = 0.25;  // radians
  double scar_half_angle_max = 0.7;
  double scar_thickness_mm = 2.0;
  std::size_t wall_band_vox = 2;  // boundary band depth in voxels

  double background_mean = 20.0, background_sd = 4.0;
  double blood_mean = 60.0, blood_sd = 4.0;
  double scar_mean = 120.0, scar_sd = 6.0;
  double fiducial_mean = 160.0;
  double fiducial_radius_mm = 1.5;
  double noise_sd = 3.0;

  std::uint64_t seed = 0;

  std::size_t scar_layers() const {
    const double finest = std::min({spacing_mm[0], spacing_mm[1], spacing_mm[2]});
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scar_thickness_mm / finest)));
  }

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw Error("phantom: dims must be >= 1");
      if (!(spacing_mm[a] > 0)) throw Error("phantom: spacing must be positive");
      if (!(semi_axes_mm[a] > 0)) throw Error("phantom: semi-axes must be positive");
      const double extent = static_cast<double>(dims[a]) * spacing_mm[a];
      if (center_mm[a] - semi_axes_mm[a] < 0.0 || center_mm[a] + semi_axes_mm[a] > extent) {
        throw Error("phantom: ellipsoid exceeds the grid on axis " + std::to_string(a) + " (center " +
                    std::to_string(center_mm[a]) + " mm, semi-axis " + std::to_string(semi_axes_mm[a]) +
                    " mm, extent " + std::to_string(extent) + " mm)");
      }
    }
    if (wall_band_vox < 1) throw Error("phantom: wall band must be at least one voxel");
    if (scar_layers() > 2 * wall_band_vox) throw Error("phantom: scar thickness exceeds twice the wall band");
    if (scar_half_angle_min < 0 || scar_half_angle_max < scar_half_angle_min) {
      throw Error("phantom: invalid scar angular extent range");
    }
  }

  /// Default geometry rescaled to another grid: centered, with semi-axes and
  /// fiducial scaled by the physical extent relative to the default 32 mm cube.
  static PhantomSpec for_grid(std::array<std::size_t, 3> dims, std::array<double, 3> spacing) {
    PhantomSpec s;
    const PhantomSpec reference;
    s.dims = dims;
    s.spacing_mm = spacing;
    double smallest = 1e300;
    for (std::size_t a = 0; a < 3; ++a) {
      const double extent = static_cast<double>(dims[a]) * spacing[a];
      const double ref_extent = static_cast<double>(reference.dims[a]) * reference.spacing_mm[a];
      s.semi_axes_mm[a] = reference.semi_axes_mm[a] * extent / ref_extent;
      s.center_mm[a] = extent / 2.0;
      smallest = std::min(smallest, extent / ref_extent);
    }
    s.pv_radius_mm = reference.pv_radius_mm * std::min(1.0, smallest);
    s.pv_length_mm = reference.pv_length_mm * std::min(1.0, smallest);
    return s;
  }

  /// Per-case variant of a template: center and semi-axes jittered by the case seed.
  PhantomSpec variant(std::uint64_t case_seed) const {
    PhantomSpec s = *this;
    s.seed = case_seed;
    Rng rng(case_seed ^ 0x9E3779B97F4A7C15ull);
    for (std::size_t a = 0; a < 3; ++a) {
      s.semi_axes_mm[a] = semi_axes_mm[a] * rng.uniform(0.85, 1.1);
      s.center_mm[a] = center_mm[a] + rng.uniform(-1.5, 1.5) * spacing_mm[a];
      const double extent = static_cast<double>(dims[a]) * spacing_mm[a];
      s.center_mm[a] = std::clamp(s.center_mm[a], s.semi_axes_mm[a], extent - s.semi_axes_mm[a]);
    }
    return s;
  }
};

struct Phantom {
  Volume intensity;
  Volume anatomy;
  Volume scar;
  double scar_fraction = 0.0;  // scar volume / modeled wall volume
};

/// L1 (6-connected) distance from every voxel of `mask` to the nearest voxel
/// outside it; the region beyond the grid counts as outside. Zero off-mask.
inline std::vector<std::size_t> boundary_depth(const Volume& mask) {
  const auto [nz, ny, nx] = mask.dims;
  constexpr std::size_t unset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> depth(mask.size(), unset);
  std::deque<std::size_t> queue;
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        const std::size_t i = mask.index(z, y, x);
        if (mask.values[i] == 0.0) {
          depth[i] = 0;
          queue.push_back(i);
        } else if (z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx) {
          depth[i] = 1;
          queue.push_back(i);
        }
      }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const std::size_t x = i % nx, y = (i / nx) % ny, z = i / (nx * ny);
    auto relax = [&](std::size_t j) {
      if (depth[j] == unset) {
        depth[j] = depth[i] + 1;
        queue.push_back(j);
      }
    };
    if (z > 0) relax(i - nx * ny);
    if (z + 1 < nz) relax(i + nx * ny);
    if (y > 0) relax(i - nx);
    if (y + 1 < ny) relax(i + nx);
    if (x > 0) relax(i - 1);
    if (x + 1 < nx) relax(i + 1);
  }
  return depth;
}

inline Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto& d = spec.dims;
  const auto& s = spec.spacing_mm;
  const auto& c = spec.center_mm;
  const auto& r = spec.semi_axes_mm;
  auto centre_of = [&](std::size_t z, std::size_t y, std::size_t x) {
    return std::array<double, 3>{(static_cast<double>(z) + 0.5) * s[0], (static_cast<double>(y) + 0.5) * s[1],
                                 (static_cast<double>(x) + 0.5) * s[2]};
  };
  auto unit = [](std::array<double, 3> v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return std::array<double, 3>{v[0] / n, v[1] / n, v[2] / n};
  };

  // Vein stubs leave the upper half of the ellipsoid, spread in azimuth.
  struct Stub {
    std::array<double, 3> dir;
    double reach;
  };
  std::vector<Stub> stubs;
  const double azimuth0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t k = 0; k < spec.pv_stub_count; ++k) {
    const double az = azimuth0 + 2.0 * std::numbers::pi * static_cast<double>(k) /
                                     static_cast<double>(std::max<std::size_t>(1, spec.pv_stub_count));
    const double elevation = rng.uniform(0.3, 0.7);
    const auto dir = unit({std::sin(elevation), std::cos(elevation) * std::sin(az), std::cos(elevation) * std::cos(az)});
    // Distance from center to the ellipsoid surface along dir.
    const double q = std::sqrt(dir[0] * dir[0] / (r[0] * r[0]) + dir[1] * dir[1] / (r[1] * r[1]) +
                               dir[2] * dir[2] / (r[2] * r[2]));
    stubs.push_back({dir, 1.0 / q + spec.pv_length_mm});
  }

  Volume anatomy(d, s, VolumeKind::label);
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        const auto p = centre_of(z, y, x);
        const std::array<double, 3> v{p[0] - c[0], p[1] - c[1], p[2] - c[2]};
        double e = 0.0;
        for (int a = 0; a < 3; ++a) e += v[a] * v[a] / (r[a] * r[a]);
        bool in = e <= 1.0;
        for (const auto& stub : stubs) {
          if (in) break;
          const double t = v[0] * stub.dir[0] + v[1] * stub.dir[1] + v[2] * stub.dir[2];
          if (t < 0.0 || t > stub.reach) continue;
          const double perp2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - t * t;
          in = perp2 <= spec.pv_radius_mm * spec.pv_radius_mm;
        }
        anatomy.at(z, y, x) = in ? 1.0 : 0.0;
      }

  // Scar: anatomy voxels within the outer scar layers whose direction from
  // the center falls inside one of the patch cones.
  std::vector<std::pair<std::array<double, 3>, double>> patches;
  for (std::size_t k = 0; k < spec.scar_patch_count; ++k) {
    const auto dir = unit({rng.normal(), rng.normal(), rng.normal()});
    patches.emplace_back(dir, rng.uniform(spec.scar_half_angle_min, spec.scar_half_angle_max));
  }
  const auto depth = boundary_depth(anatomy);
  const std::size_t layers = std::min(spec.scar_layers(), spec.wall_band_vox);
  Volume scar(d, s, VolumeKind::label);
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        const std::size_t i = anatomy.index(z, y, x);
        if (anatomy.values[i] == 0.0 || depth[i] > layers) continue;
        const auto p = centre_of(z, y, x);
        const auto v = unit({p[0] - c[0] + 1e-12, p[1] - c[1], p[2] - c[2]});
        for (const auto& [dir, half_angle] : patches) {
          const double cosine = v[0] * dir[0] + v[1] * dir[1] + v[2] * dir[2];
          if (cosine >= std::cos(half_angle)) {
            scar.values[i] = 1.0;
            break;
          }
        }
      }

  // Intensities: each voxel draws from its region's distribution, plus scanner noise.
  const double fy = 3.0 * s[1], fx = 3.0 * s[2];
  Volume intensity(d, s, VolumeKind::intensity);
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        const std::size_t i = anatomy.index(z, y, x);
        const auto p = centre_of(z, y, x);
        double value;
        if (scar.values[i] != 0.0) {
          value = rng.normal(spec.scar_mean, spec.scar_sd);
        } else if (anatomy.values[i] != 0.0) {
          value = rng.normal(spec.blood_mean, spec.blood_sd);
        } else if ((p[1] - fy) * (p[1] - fy) + (p[2] - fx) * (p[2] - fx) <=
                   spec.fiducial_radius_mm * spec.fiducial_radius_mm) {
          value = spec.fiducial_mean;
        } else {
          value = rng.normal(spec.background_mean, spec.background_sd);
        }
        intensity.values[i] = value + rng.normal(0.0, spec.noise_sd);
      }
  quantize_to_f32(intensity.values);

  Phantom out{std::move(intensity), std::move(anatomy), std::move(scar), 0.0};
  if (std::any_of(out.anatomy.values.begin(), out.anatomy.values.end(), [](double v) { return v != 0.0; })) {
    out.scar_fraction = scar_burden(out.scar, out.anatomy).percentage / 100.0;
  }
  return out;
}

/// Per-axial-slice mean normalization: (I - mean) / (max - min); constant slices map to zero.
inline Volume normalize(const Volume& volume) {
  if (volume.kind != VolumeKind::intensity) throw Error("normalize: expects an intensity volume");
  Volume out = volume;
  const std::size_t plane = volume.dims[1] * volume.dims[2];
  for (std::size_t z = 0; z < volume.dims[0]; ++z) {
    const double* src = volume.values.data() + z * plane;
    double* dst = out.values.data() + z * plane;
    double lo = src[0], hi = src[0], total = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      if (!std::isfinite(src[i])) {
        throw Error("normalize: non-finite intensity in slice " + std::to_string(z) + " at offset " +
                    std::to_string(i));
      }
      lo = std::min(lo, src[i]);
      hi = std::max(hi, src[i]);
      total += src[i];
    }
    if (hi == lo) {
      std::fill(dst, dst + plane, 0.0);
      continue;
    }
    const double mean = total / static_cast<double>(plane);
    const double range = hi - lo;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] - mean) / range;
  }
  return out;
}

// ---------------------------------------------------------------------------
// View convention. With a volume laid out as (Z, C, Y, X):
//   axial:    Z slices of (Y, X)   -> (Z, C, Y, X)
//   sagittal: X slices of (Y, Z)   -> (X, C, Y, Z)
//   coronal:  Y slices of (X, Z)   -> (Y, C, X, Z)
// Orders follow permute_axes (output axis i takes input axis order[i]).

inline const std::vector<std::size_t> kAxialToSagittal{3, 1, 2, 0};
inline const std::vector<std::size_t> kSagittalToAxial{3, 1, 2, 0};
inline const std::vector<std::size_t> kAxialToCoronal{2, 1, 3, 0};
inline const std::vector<std::size_t> kCoronalToAxial{3, 1, 0, 2};

struct MultiviewSlices {
  Tensor axial;     // (Z, 1, Y, X)
  Tensor sagittal;  // (X, 1, Y, Z)
  Tensor coronal;   // (Y, 1, X, Z)
};

inline MultiviewSlices reslice(const Volume& volume) {
  Tensor axial = volume.as_axial_tensor();
  return {axial, permute_axes(axial, kAxialToSagittal), permute_axes(axial, kAxialToCoronal)};
}

inline Tensor sagittal_to_axial(const Tensor& t) { return permute_axes(t, kSagittalToAxial); }
inline Tensor coronal_to_axial(const Tensor& t) { return permute_axes(t, kCoronalToAxial); }

}  // namespace mvtt
