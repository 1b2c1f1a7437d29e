#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mvtt/tensor.hpp"

namespace mvtt {

enum class NormMode { train, eval };

/// Per-channel batch normalization over the (slice, height, width) axes.
/// Running statistics are plain tensors so they serialize with the weights.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;
  NormMode mode = NormMode::train;

  explicit BatchNormState(std::size_t channels = 1)
      : gamma(Shape{channels}, 1.0, true),
        beta(Shape{channels}, 0.0, true),
        running_mean(Shape{channels}, 0.0),
        running_var(Shape{channels}, 1.0) {}

  std::size_t channels() const { return gamma.numel(); }
};

inline Tensor batch_norm(const Tensor& input, BatchNormState& state) {
  if (input.rank() != 4 || input.dim(1) != state.channels()) {
    throw Error("batch_norm: input shape " + to_string(input.shape()) + " does not carry " +
                std::to_string(state.channels()) + " channels on axis 1");
  }
  if (state.epsilon <= 0.0) throw Error("batch_norm: epsilon must be positive");
  const std::size_t n = input.dim(0);
  const std::size_t channels = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  const std::size_t count = n * plane;
  const auto& x = input.data();
  const auto& gamma = state.gamma.data();
  const auto& beta = state.beta.data();

  std::vector<double> out(x.size());
  std::vector<double> mean(channels), inv_std(channels);
  const bool training = state.mode == NormMode::train;
  if (training && count < 2) {
    throw Error("batch_norm: train mode needs at least 2 values per channel, got " + std::to_string(count));
  }

  for (std::size_t c = 0; c < channels; ++c) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<double>(count);
      auto& rm = state.running_mean.data();
      auto& rv = state.running_var.data();
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mu;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
      if (var < 0.0) throw Error("batch_norm: negative running variance on channel " + std::to_string(c));
    }
    mean[c] = mu;
    inv_std[c] = 1.0 / std::sqrt(var + state.epsilon);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i)
        out[base + i] = gamma[c] * ((x[base + i] - mu) * inv_std[c]) + beta[c];
    }
  }

  return detail::make_result(
      input.shape(), std::move(out), {input, state.gamma, state.beta},
      [n, channels, plane, training, mean = std::move(mean), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        auto* gx = detail::grad_slot(px);
        auto* gg = detail::grad_slot(pg);
        auto* gb = detail::grad_slot(pb);
        const double count = static_cast<double>(n * plane);
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double xhat = (px.data[base + i] - mean[c]) * inv_std[c];
              sum_dy += self.grad[base + i];
              sum_dy_xhat += self.grad[base + i] * xhat;
            }
          }
          if (gg) (*gg)[c] += sum_dy_xhat;
          if (gb) (*gb)[c] += sum_dy;
          if (!gx) continue;
          const double g = pg.data[c];
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double dy = self.grad[base + i];
              if (training) {
                const double xhat = (px.data[base + i] - mean[c]) * inv_std[c];
                (*gx)[base + i] += g * inv_std[c] * (dy - sum_dy / count - xhat * sum_dy_xhat / count);
              } else {
                (*gx)[base + i] += g * inv_std[c] * dy;
              }
            }
          }
        }
      });
}

}  // namespace mvtt
