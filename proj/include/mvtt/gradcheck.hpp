#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mvtt/tensor.hpp"

namespace mvtt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradcheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_abs_error = 0.0;
  double max_relative_error = 0.0;
};

struct GradcheckResult {
  std::vector<GradcheckEntry> entries;
  double max_relative_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_relative_error);
    return m;
  }
  bool passed(double tolerance) const { return max_relative_error() < tolerance; }
};

/// Compares reverse-mode gradients of a scalar objective against central
/// differences. Per tensor, the relative error is
///   max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|, floor)
/// so that near-zero elements of a well-scaled gradient do not dominate.
/// `objective` must rebuild the graph from the current tensor values on each call.
inline GradcheckResult gradcheck(const std::function<Tensor()>& objective, std::vector<NamedTensor> inputs,
                                 double step = 1e-5, double floor = 1e-8) {
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }
  {
    Tensor loss = objective();
    backward(loss);
  }
  GradcheckResult result;
  for (auto& in : inputs) {
    std::vector<double> analytic = in.tensor.grad();
    std::vector<double> numeric(analytic.size());
    auto& values = in.tensor.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      NoGradGuard guard;
      values[i] = saved + step;
      const double up = objective().item();
      values[i] = saved - step;
      const double down = objective().item();
      values[i] = saved;
      numeric[i] = (up - down) / (2.0 * step);
    }
    GradcheckEntry entry{in.name, values.size(), 0.0, 0.0};
    double scale = floor;
    for (std::size_t i = 0; i < values.size(); ++i) {
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(analytic[i] - numeric[i]));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    entry.max_relative_error = entry.max_abs_error / scale;
    result.entries.push_back(entry);
  }
  return result;
}

}  // namespace mvtt
