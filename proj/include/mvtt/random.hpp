#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "mvtt/tensor.hpp"

namespace mvtt {

/// Portable seeded generator. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the real-valued draws below are derived
/// from raw 64-bit outputs with fixed arithmetic (no std distributions, which
/// are implementation-defined), so streams match across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection (unbiased).
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (one draw per call; the pair partner is dropped).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

 private:
  std::mt19937_64 engine_;
};

inline Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
  Tensor t(shape, 0.0, requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// He-uniform fill for (out, in, kh, kw) kernels feeding a ReLU.
inline void he_uniform(Tensor& weights, Rng& rng) {
  const double fan_in = static_cast<double>(weights.numel() / weights.dim(0));
  const double bound = std::sqrt(6.0 / fan_in);
  for (double& v : weights.data()) v = rng.uniform(-bound, bound);
}

/// Xavier-uniform fill for kernels feeding a sigmoid or a gate.
inline void xavier_uniform(Tensor& weights, Rng& rng) {
  const double receptive = static_cast<double>(weights.numel() / (weights.dim(0) * weights.dim(1)));
  const double fan_in = static_cast<double>(weights.dim(1)) * receptive;
  const double fan_out = static_cast<double>(weights.dim(0)) * receptive;
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : weights.data()) v = rng.uniform(-bound, bound);
}

}  // namespace mvtt
