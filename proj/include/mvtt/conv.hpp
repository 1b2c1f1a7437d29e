#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mvtt/parallel.hpp"
#include "mvtt/tensor.hpp"

namespace mvtt {

enum class Padding { same, valid };

struct ConvSpec {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t dilation = 1;
  Padding padding = Padding::same;

  static ConvSpec square(std::size_t k, std::size_t in, std::size_t out, std::size_t dilation = 1,
                         Padding padding = Padding::same) {
    return ConvSpec{k, k, in, out, 1, 1, dilation, padding};
  }

  void validate() const {
    if (kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0 || dilation == 0 || in_channels == 0 ||
        out_channels == 0) {
      throw Error("ConvSpec: kernel, stride, dilation and channel counts must all be >= 1");
    }
  }

  Shape weight_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
};

/// Extent covered by a k-tap kernel at dilation d.
constexpr std::size_t effective_extent(std::size_t kernel, std::size_t dilation) {
  return (kernel - 1) * dilation + 1;
}

struct AxisPlan {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

/// Output length and leading pad along one axis. Same padding splits the total
/// pad symmetrically with the odd cell on the trailing side.
inline AxisPlan plan_axis(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t dilation,
                          Padding padding) {
  const std::size_t extent = effective_extent(kernel, dilation);
  if (padding == Padding::valid) {
    if (in < extent) {
      throw Error("conv2d: valid padding needs input length >= " + std::to_string(extent) + ", got " +
                  std::to_string(in));
    }
    return {(in - extent) / stride + 1, 0};
  }
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + extent;
  const std::size_t total = needed > in ? needed - in : 0;
  return {out, total / 2};
}

namespace detail {

// Hook used by the gradient-check sensitivity test: scales the weight
// gradient so a broken backward pass can be demonstrated on demand.
inline double& conv_weight_grad_fault() {
  static double scale = 1.0;
  return scale;
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, oh, ow, sh, sw, d, pt, pl;

  // Range of output columns whose input column ox*sw + kx*d - pl lies in [0, w).
  std::pair<std::size_t, std::size_t> ox_range(std::size_t kx) const {
    const long offset = static_cast<long>(kx * d) - static_cast<long>(pl);
    long lo = 0;
    if (offset < 0) lo = (-offset + static_cast<long>(sw) - 1) / static_cast<long>(sw);
    long hi = static_cast<long>(ow);
    // largest ox with ox*sw + offset <= w-1
    const long limit = static_cast<long>(w) - 1 - offset;
    if (limit < 0) return {0, 0};
    hi = std::min(hi, limit / static_cast<long>(sw) + 1);
    if (lo >= hi) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }

  bool input_row(std::size_t oy, std::size_t ky, std::size_t& iy) const {
    const long r = static_cast<long>(oy * sh + ky * d) - static_cast<long>(pt);
    if (r < 0 || r >= static_cast<long>(h)) return false;
    iy = static_cast<std::size_t>(r);
    return true;
  }

  long input_col(std::size_t ox, std::size_t kx) const {
    return static_cast<long>(ox * sw + kx * d) - static_cast<long>(pl);
  }
};

}  // namespace detail

/// 2D convolution over (slice, channel, height, width) input; every slice is
/// convolved independently. Weights are (out, in, kh, kw); bias is (out) or
/// undefined for no bias.
inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, const ConvSpec& spec) {
  spec.validate();
  if (input.rank() != 4 || input.dim(1) != spec.in_channels) {
    throw Error("conv2d: input shape " + to_string(input.shape()) + " incompatible with weight shape " +
                to_string(spec.weight_shape()) + " (in_channels=" + std::to_string(spec.in_channels) + ")");
  }
  if (weights.shape() != spec.weight_shape()) {
    throw Error("conv2d: weight shape " + to_string(weights.shape()) + " does not match expected " +
                to_string(spec.weight_shape()));
  }
  if (bias.defined() && bias.shape() != Shape{spec.out_channels}) {
    throw Error("conv2d: bias shape " + to_string(bias.shape()) + " does not match expected " +
                to_string(Shape{spec.out_channels}));
  }
  if (!all_finite(weights) || (bias.defined() && !all_finite(bias))) {
    throw Error("conv2d: non-finite weights or bias");
  }

  const auto rows = plan_axis(input.dim(2), spec.kernel_h, spec.stride_h, spec.dilation, spec.padding);
  const auto cols = plan_axis(input.dim(3), spec.kernel_w, spec.stride_w, spec.dilation, spec.padding);
  const detail::ConvGeometry g{input.dim(0), spec.in_channels, input.dim(2), input.dim(3), spec.out_channels,
                               spec.kernel_h, spec.kernel_w,   rows.out,     cols.out,     spec.stride_h,
                               spec.stride_w, spec.dilation,   rows.pad_before, cols.pad_before};

  const std::size_t in_plane = g.h * g.w;
  const std::size_t out_plane = g.oh * g.ow;
  std::vector<double> out(g.n * g.cout * out_plane);
  const double* x = input.data().data();
  const double* wt = weights.data().data();
  const double* b = bias.defined() ? bias.data().data() : nullptr;

  parallel_for(g.n * g.cout, [&](std::size_t job) {
    const std::size_t n = job / g.cout;
    const std::size_t co = job % g.cout;
    double* dst = out.data() + (n * g.cout + co) * out_plane;
    std::fill(dst, dst + out_plane, b ? b[co] : 0.0);
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      const double* src = x + (n * g.cin + ci) * in_plane;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const double wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
          const auto [lo, hi] = g.ox_range(kx);
          const long off = g.input_col(0, kx);
          if (lo >= hi) continue;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            std::size_t iy;
            if (!g.input_row(oy, ky, iy)) continue;
            const double* row = src + iy * g.w;
            double* orow = dst + oy * g.ow;
            for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * row[static_cast<long>(ox * g.sw) + off];
          }
        }
      }
    }
  }, 4);

  std::vector<Tensor> inputs{input, weights};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(Shape{g.n, g.cout, g.oh, g.ow}, std::move(out), inputs, [g](detail::Node& self) {
    auto& pin = *self.parents[0];
    auto& pw = *self.parents[1];
    const std::size_t in_plane = g.h * g.w;
    const std::size_t out_plane = g.oh * g.ow;
    const double* gout = self.grad.data();

    if (auto* gi = detail::grad_slot(pin)) {
      parallel_for(g.n * g.cin, [&](std::size_t job) {
        const std::size_t n = job / g.cin;
        const std::size_t ci = job % g.cin;
        double* dst = gi->data() + (n * g.cin + ci) * in_plane;
        for (std::size_t co = 0; co < g.cout; ++co) {
          const double* go = gout + (n * g.cout + co) * out_plane;
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              const double wv = pw.data[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
              const auto [lo, hi] = g.ox_range(kx);
          const long off = g.input_col(0, kx);
              if (lo >= hi) continue;
              for (std::size_t oy = 0; oy < g.oh; ++oy) {
                std::size_t iy;
                if (!g.input_row(oy, ky, iy)) continue;
                double* row = dst + iy * g.w;
                const double* orow = go + oy * g.ow;
                for (std::size_t ox = lo; ox < hi; ++ox) row[static_cast<long>(ox * g.sw) + off] += wv * orow[ox];
              }
            }
          }
        }
      }, 4);
    }

    if (auto* gw = detail::grad_slot(pw)) {
      const double fault = detail::conv_weight_grad_fault();
      parallel_for(g.cout * g.cin, [&](std::size_t job) {
        const std::size_t co = job / g.cin;
        const std::size_t ci = job % g.cin;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const auto [lo, hi] = g.ox_range(kx);
          const long off = g.input_col(0, kx);
            double acc = 0.0;
            if (lo < hi) {
              for (std::size_t n = 0; n < g.n; ++n) {
                const double* src = pin.data.data() + (n * g.cin + ci) * in_plane;
                const double* go = gout + (n * g.cout + co) * out_plane;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                  std::size_t iy;
                  if (!g.input_row(oy, ky, iy)) continue;
                  const double* row = src + iy * g.w;
                  const double* orow = go + oy * g.ow;
                  for (std::size_t ox = lo; ox < hi; ++ox) acc += orow[ox] * row[static_cast<long>(ox * g.sw) + off];
                }
              }
            }
            (*gw)[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] += fault * acc;
          }
        }
      });
    }

    if (self.parents.size() > 2) {
      if (auto* gb = detail::grad_slot(*self.parents[2])) {
        for (std::size_t co = 0; co < g.cout; ++co) {
          double acc = 0.0;
          for (std::size_t n = 0; n < g.n; ++n) {
            const double* go = gout + (n * g.cout + co) * out_plane;
            for (std::size_t i = 0; i < out_plane; ++i) acc += go[i];
          }
          (*gb)[co] += acc;
        }
      }
    }
  });
}

}  // namespace mvtt
