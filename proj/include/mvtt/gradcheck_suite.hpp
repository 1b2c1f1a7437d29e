#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvtt/batch_norm.hpp"
#include "mvtt/conv.hpp"
#include "mvtt/convlstm.hpp"
#include "mvtt/gradcheck.hpp"
#include "mvtt/model.hpp"
#include "mvtt/random.hpp"

namespace mvtt {

struct SuiteCheck {
  std::string name;
  GradcheckResult result;
};

inline constexpr double kGradcheckTolerance = 1e-4;

namespace detail {

inline Tensor probe_sum(const Tensor& y, const Tensor& probe) { return sum(hadamard(y, probe)); }

// Moves values away from the ReLU kink so central differences stay on one side.
inline void avoid_kink(Tensor& t, double margin = 1e-3) {
  for (double& v : t.data())
    if (std::abs(v) < margin) v = v < 0 ? -0.25 : 0.25;
}

}  // namespace detail

/// Finite-difference checks for every op, a 3-step ConvLSTM unroll and the full
/// model at C=2 on a 3x6x6 volume.
inline std::vector<SuiteCheck> run_gradcheck_suite(std::uint64_t seed = 2024) {
  std::vector<SuiteCheck> out;
  Rng rng(seed);
  auto rnd = [&](const Shape& s, double lo = -1.0, double hi = 1.0) { return uniform_tensor(s, rng, lo, hi); };

  {
    auto x = rnd({2, 3, 4});
    detail::avoid_kink(x);
    auto p = rnd({2, 3, 4});
    out.push_back({"relu", gradcheck([&] { return detail::probe_sum(relu(x), p); }, {{"x", x}})});
  }
  {
    auto x = rnd({2, 3, 4}, -3, 3);
    auto p = rnd({2, 3, 4});
    out.push_back({"sigmoid", gradcheck([&] { return detail::probe_sum(sigmoid(x), p); }, {{"x", x}})});
  }
  {
    auto a = rnd({3, 4}), b = rnd({3, 4}), p = rnd({3, 4});
    out.push_back({"add", gradcheck([&] { return detail::probe_sum(add(a, b), p); }, {{"a", a}, {"b", b}})});
    out.push_back(
        {"hadamard", gradcheck([&] { return detail::probe_sum(hadamard(a, b), p); }, {{"a", a}, {"b", b}})});
    out.push_back({"one_plus_gate",
                   gradcheck([&] { return detail::probe_sum(one_plus_gate(a, b), p); }, {{"gate", a}, {"x", b}})});
  }
  {
    auto a = rnd({2, 2, 3, 3}), b = rnd({2, 3, 3, 3});
    auto p = rnd({2, 5, 3, 3});
    out.push_back({"concat_channels", gradcheck([&] { return detail::probe_sum(concat_channels({a, b}), p); },
                                                {{"a", a}, {"b", b}})});
    auto pn = rnd({2, 2, 3, 3});
    out.push_back({"narrow", gradcheck([&] { return detail::probe_sum(narrow(b, 1, 1, 2), pn); }, {{"x", b}})});
    auto pp = rnd({3, 2, 3, 3});
    out.push_back({"permute_axes", gradcheck([&] { return detail::probe_sum(permute_axes(b, {3, 0, 2, 1}), pp); },
                                             {{"x", b}})});
  }
  for (auto mode : {NormMode::train, NormMode::eval}) {
    auto x = rnd({3, 2, 3, 3});
    auto p = rnd({3, 2, 3, 3});
    BatchNormState s(2);
    s.mode = mode;
    s.gamma.data() = {1.2, -0.8};
    s.beta.data() = {0.3, -0.1};
    s.running_mean.data() = {0.1, -0.2};
    s.running_var.data() = {0.7, 1.4};
    auto objective = [&] {
      const auto mean = s.running_mean.data();
      const auto var = s.running_var.data();
      auto y = batch_norm(x, s);
      s.running_mean.data() = mean;
      s.running_var.data() = var;
      return detail::probe_sum(y, p);
    };
    out.push_back({mode == NormMode::train ? "batch_norm[train]" : "batch_norm[eval]",
                   gradcheck(objective, {{"x", x}, {"gamma", s.gamma}, {"beta", s.beta}})});
  }
  for (std::size_t d : {1u, 2u, 5u}) {
    for (auto pad : {Padding::same, Padding::valid}) {
      const std::size_t size = pad == Padding::valid ? 2 * d + 3 : 6;
      auto spec = ConvSpec::square(3, 2, 2, d, pad);
      auto x = rnd({2, 2, size, size});
      auto w = rnd(spec.weight_shape());
      auto b = rnd({2});
      const auto oh = plan_axis(size, 3, 1, d, pad).out;
      auto p = rnd({2, 2, oh, oh});
      out.push_back({"conv2d[d=" + std::to_string(d) + "," + (pad == Padding::same ? "same" : "valid") + "]",
                     gradcheck([&] { return detail::probe_sum(conv2d(x, w, b, spec), p); },
                               {{"input", x}, {"weight", w}, {"bias", b}})});
    }
  }
  {
    auto pred = rnd({2, 1, 3, 3}, 0.05, 0.95);
    Tensor truth({2, 1, 3, 3});
    for (double& v : truth.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    out.push_back({"dice_loss", gradcheck([&] { return dice_loss(pred, truth); }, {{"pred", pred}})});
  }
  {
    auto p = ConvLstmParams::zeros(2, 2, 3, 3, 3);
    for (auto& [name, t] : p.named(""))
      for (double& v : t.data()) v = rng.uniform(-0.6, 0.6);
    for (double& v : p.b_c.data()) v = 0.8;
    auto seq = rnd({3, 2, 3, 3});
    ConvLstmState init{rnd({1, 2, 3, 3}, 0.1, 0.5), rnd({1, 2, 3, 3}, 0.2, 1.0)};
    auto probe = rnd({1, 2, 3, 3});
    auto objective = [&] {
      auto hs = convlstm_run(seq, p, init);
      Tensor total = detail::probe_sum(hs[0], probe);
      for (std::size_t t = 1; t < hs.size(); ++t) total = add(total, detail::probe_sum(hs[t], probe));
      return total;
    };
    auto inputs = p.named("");
    inputs.push_back({"sequence", seq});
    out.push_back({"convlstm[3-step]", gradcheck(objective, inputs)});
  }
  {
    MvttConfig cfg;
    cfg.width_multiplier = 0.125;
    cfg.slice_height = 6;
    cfg.slice_width = 6;
    auto params = MvttParams::initialized(cfg, seed);
    for (Tensor* t : {&params.theta_a.lstm.w_cf, &params.theta_a.lstm.w_ci, &params.theta_a.lstm.w_co})
      for (double& v : t->data()) v = rng.uniform(-0.3, 0.3);
    auto x = rnd({3, 1, 6, 6});
    Tensor gl({3, 1, 6, 6}), gs({3, 1, 6, 6});
    for (double& v : gl.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    for (double& v : gs.data()) v = rng.uniform() < 0.2 ? 1.0 : 0.0;
    auto objective = [&] {
      auto r = forward(x, params);
      return hybrid_loss(r.anatomy_prob, gl, r.scar_prob, gs);
    };
    // Conv biases feeding batch norm have an exactly zero gradient; their difference
    // quotients are pure rounding noise (~1e-11), so the scale floor sits above it.
    out.push_back({"model[C=2,3x6x6]", gradcheck(objective, params.parameters(), 1e-5, 1e-6)});
  }
  return out;
}

}  // namespace mvtt
