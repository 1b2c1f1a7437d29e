#pragma once

// Independent reference implementations used only by the tests. None of these
// share code paths with the library routines they check.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <utility>
#include <vector>

#include "mvtt/conv.hpp"
#include "mvtt/metrics.hpp"
#include "mvtt/random.hpp"
#include "mvtt/tensor.hpp"
#include "mvtt/volume.hpp"

namespace oracle {

/// Direct nested-loop convolution with explicit zero padding, evaluated
/// straight from the definition out[n,o,y,x] = b[o] + sum w[o,i,ky,kx] * in[n,i,y*s+ky*d-p, x*s+kx*d-p].
inline std::vector<double> conv2d(const mvtt::Tensor& in, const mvtt::Tensor& w, const std::vector<double>& bias,
                                  const mvtt::ConvSpec& spec, std::size_t& out_h, std::size_t& out_w) {
  const long n = static_cast<long>(in.dim(0)), ci = static_cast<long>(in.dim(1));
  const long h = static_cast<long>(in.dim(2)), wd = static_cast<long>(in.dim(3));
  const long co = static_cast<long>(spec.out_channels), kh = static_cast<long>(spec.kernel_h),
             kw = static_cast<long>(spec.kernel_w), d = static_cast<long>(spec.dilation),
             sh = static_cast<long>(spec.stride_h), sw = static_cast<long>(spec.stride_w);
  auto axis = [&](long len, long k, long s, long& out, long& pad) {
    const long ext = (k - 1) * d + 1;
    if (spec.padding == mvtt::Padding::valid) {
      out = (len - ext) / s + 1;
      pad = 0;
    } else {
      out = (len + s - 1) / s;
      const long total = std::max(0L, (out - 1) * s + ext - len);
      pad = total / 2;  // odd cell goes to the trailing side
    }
  };
  long oh, ow, pt, pl;
  axis(h, kh, sh, oh, pt);
  axis(wd, kw, sw, ow, pl);
  out_h = static_cast<std::size_t>(oh);
  out_w = static_cast<std::size_t>(ow);
  std::vector<double> out(static_cast<std::size_t>(n * co * oh * ow));
  auto at_in = [&](long b, long c, long y, long x) -> double {
    if (y < 0 || y >= h || x < 0 || x >= wd) return 0.0;
    return in.data()[static_cast<std::size_t>(((b * ci + c) * h + y) * wd + x)];
  };
  for (long b = 0; b < n; ++b)
    for (long o = 0; o < co; ++o)
      for (long y = 0; y < oh; ++y)
        for (long x = 0; x < ow; ++x) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
          for (long c = 0; c < ci; ++c)
            for (long ky = 0; ky < kh; ++ky)
              for (long kx = 0; kx < kw; ++kx)
                acc += w.data()[static_cast<std::size_t>(((o * ci + c) * kh + ky) * kw + kx)] *
                       at_in(b, c, y * sh + ky * d - pt, x * sw + kx * d - pl);
          out[static_cast<std::size_t>(((b * co + o) * oh + y) * ow + x)] = acc;
        }
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Scalar LSTM step obtained by substituting 1x1 quantities into the gate equations.
struct ScalarLstm {
  double wxf, whf, wcf, bf, wxi, whi, wci, bi, wxc, whc, bc, wxo, who, wco, bo;
  struct Out {
    double f, i, c, o, h;
  };
  Out step(double x, double h, double c) const {
    Out r;
    r.f = sigmoid(wxf * x + whf * h + wcf * c + bf);
    r.i = sigmoid(wxi * x + whi * h + wci * c + bi);
    r.c = r.f * c + r.i * std::max(0.0, wxc * x + whc * h + bc);
    r.o = sigmoid(wxo * x + who * h + wco * r.c + bo);
    r.h = r.o * std::max(0.0, r.c);
    return r;
  }
};

/// Hand-rolled scalar Adam.
struct ScalarAdam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double m = 0, v = 0;
  int t = 0;
  double step(double param, double grad, double lr) {
    ++t;
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad * grad;
    const double mh = m / (1 - std::pow(beta1, t));
    const double vh = v / (1 - std::pow(beta2, t));
    return param - lr * mh / (std::sqrt(vh) + eps);
  }
};

/// Voxel loop confusion counts.
inline mvtt::ConfusionCounts confusion(const std::vector<int>& pred, const std::vector<int>& truth) {
  mvtt::ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && truth[i] == 1) c.tp++;
    if (pred[i] == 1 && truth[i] == 0) c.fp++;
    if (pred[i] == 0 && truth[i] == 1) c.fn++;
    if (pred[i] == 0 && truth[i] == 0) c.tn++;
  }
  return c;
}

/// Pearson r via the raw-moment formula.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (std::sqrt(n * sxx - sx * sx) * std::sqrt(n * syy - sy * sy));
}

/// Offsets reachable by composing one tap from each dilated 3x3 kernel in `rates`.
inline std::set<std::pair<int, int>> hdc_footprint(const std::vector<int>& rates) {
  std::set<std::pair<int, int>> reach{{0, 0}};
  for (int r : rates) {
    std::set<std::pair<int, int>> next;
    for (auto [y, x] : reach)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) next.insert({y + dy * r, x + dx * r});
    reach = std::move(next);
  }
  return reach;
}

/// Brute-force L1 distance from each mask voxel to the nearest non-mask voxel,
/// treating the region past the grid border as non-mask.
inline std::vector<long> depth_to_outside(const mvtt::Volume& m) {
  const long nz = static_cast<long>(m.dims[0]), ny = static_cast<long>(m.dims[1]), nx = static_cast<long>(m.dims[2]);
  std::vector<std::array<long, 3>> outside;
  for (long z = 0; z < nz; ++z)
    for (long y = 0; y < ny; ++y)
      for (long x = 0; x < nx; ++x)
        if (m.at(z, y, x) == 0.0) outside.push_back({z, y, x});
  std::vector<long> depth(m.size(), 0);
  for (long z = 0; z < nz; ++z)
    for (long y = 0; y < ny; ++y)
      for (long x = 0; x < nx; ++x) {
        if (m.at(z, y, x) == 0.0) continue;
        long best = std::min({z + 1, nz - z, y + 1, ny - y, x + 1, nx - x});
        for (const auto& o : outside) best = std::min(best, std::abs(o[0] - z) + std::abs(o[1] - y) + std::abs(o[2] - x));
        depth[m.index(z, y, x)] = best;
      }
  return depth;
}

inline mvtt::Tensor random_tensor(const mvtt::Shape& shape, mvtt::Rng& rng, double lo = -1.0, double hi = 1.0) {
  return mvtt::uniform_tensor(shape, rng, lo, hi);
}

/// Random values that are multiples of 2^-10 with small magnitude, so sums of a
/// few of them are exact in double precision.
inline mvtt::Tensor dyadic_tensor(const mvtt::Shape& shape, mvtt::Rng& rng) {
  mvtt::Tensor t(shape);
  for (double& v : t.data()) v = static_cast<double>(static_cast<long>(rng.below(1u << 20)) - (1L << 19)) / 1024.0;
  return t;
}

}  // namespace oracle
