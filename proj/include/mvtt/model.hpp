#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvtt/batch_norm.hpp"
#include "mvtt/conv.hpp"
#include "mvtt/convlstm.hpp"
#include "mvtt/gradcheck.hpp"
#include "mvtt/phantom.hpp"
#include "mvtt/random.hpp"
#include "mvtt/tensor.hpp"
#include "mvtt/volume.hpp"

namespace mvtt {

struct MvttConfig {
  std::size_t base_channels = 16;
  std::size_t kernel = 3;
  std::vector<std::size_t> hdc_rates{1, 2, 5};
  std::size_t residual_blocks_per_branch = 2;
  double width_multiplier = 1.0;
  double threshold = 0.5;
  // Axial slice size; the peephole weights are defined per pixel.
  std::size_t slice_height = 32;
  std::size_t slice_width = 32;

  std::size_t channels() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(base_channels) *
                                                                          width_multiplier)));
  }

  void validate() const {
    if (base_channels < 1 || kernel < 1 || slice_height < 1 || slice_width < 1)
      throw Error("MvttConfig: channel, kernel and slice sizes must be >= 1");
    if (!(width_multiplier > 0.0)) throw Error("MvttConfig: width_multiplier must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("MvttConfig: threshold must lie in (0,1)");
    if (hdc_rates.empty()) throw Error("MvttConfig: hdc_rates must be nonempty");
    std::size_t g = 0;
    for (auto r : hdc_rates) {
      if (r == 0) throw Error("MvttConfig: dilation rates must be positive");
      g = std::gcd(g, r);
    }
    if (g > 1) throw Error("MvttConfig: dilation rates share the common factor " + std::to_string(g));
  }
};

template <typename Json>
void to_json(Json& j, const MvttConfig& c) {
  j = Json{{"base_channels", c.base_channels},
                     {"kernel", c.kernel},
                     {"hdc_rates", c.hdc_rates},
                     {"residual_blocks_per_branch", c.residual_blocks_per_branch},
                     {"width_multiplier", c.width_multiplier},
                     {"threshold", c.threshold},
                     {"slice_height", c.slice_height},
                     {"slice_width", c.slice_width}};
}

template <typename Json>
void from_json(const Json& j, MvttConfig& c) {
  j.at("base_channels").get_to(c.base_channels);
  j.at("kernel").get_to(c.kernel);
  j.at("hdc_rates").get_to(c.hdc_rates);
  j.at("residual_blocks_per_branch").get_to(c.residual_blocks_per_branch);
  j.at("width_multiplier").get_to(c.width_multiplier);
  j.at("threshold").get_to(c.threshold);
  j.at("slice_height").get_to(c.slice_height);
  j.at("slice_width").get_to(c.slice_width);
}

// ---------------------------------------------------------------------------
// Layers

struct ConvLayer {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;

  ConvLayer() = default;
  explicit ConvLayer(const ConvSpec& s)
      : spec(s), weight(s.weight_shape(), 0.0, true), bias(Shape{s.out_channels}, 0.0, true) {}

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, spec); }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// conv -> batch norm -> ReLU.
struct ConvBnRelu {
  ConvLayer conv;
  BatchNormState bn;

  ConvBnRelu() = default;
  explicit ConvBnRelu(const ConvSpec& s) : conv(s), bn(s.out_channels) {}

  Tensor pre_activation(const Tensor& x) { return batch_norm(conv(x), bn); }
  Tensor operator()(const Tensor& x) { return relu(pre_activation(x)); }

  void collect(const std::string& conv_name, const std::string& bn_name, std::vector<NamedTensor>& params) const {
    conv.collect(conv_name, params);
    params.push_back({bn_name + ".gamma", bn.gamma});
    params.push_back({bn_name + ".beta", bn.beta});
  }
  void collect_buffers(const std::string& bn_name, std::vector<NamedTensor>& out) const {
    out.push_back({bn_name + ".running_mean", bn.running_mean});
    out.push_back({bn_name + ".running_var", bn.running_var});
  }
};

/// Three dilated 3x3 conv+BN layers with an identity shortcut summed before the last ReLU.
struct HdcBlock {
  std::vector<ConvBnRelu> layers;

  Tensor operator()(const Tensor& x) {
    Tensor y = x;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) y = layers[i](y);
    return relu(add(layers.back().pre_activation(y), x));
  }
};

struct AxialParams {  // theta_a
  std::vector<ConvBnRelu> encoder;
  ConvLstmParams lstm;
};

struct ViewParams {  // theta_s, theta_c
  ConvBnRelu stem;
  std::vector<HdcBlock> blocks;
};

struct AttentionParams {  // theta_am
  std::vector<ConvBnRelu> mask;
  ConvLayer project;  // 1x1 to C channels, feeds the sigmoid
};

struct HeadParams {  // theta_l, theta_as
  ConvBnRelu first;
  ConvBnRelu second;
  ConvLayer out;  // 2C -> 1, feeds the sigmoid
};

/// Every learnable tensor of the model, grouped by subnetwork.
struct MvttParams {
  MvttConfig config;
  AxialParams theta_a;
  ViewParams theta_s;
  ViewParams theta_c;
  AttentionParams theta_am;
  HeadParams theta_l;
  HeadParams theta_as;

  static MvttParams zeros(const MvttConfig& cfg) {
    cfg.validate();
    const std::size_t c = cfg.channels();
    const std::size_t k = cfg.kernel;
    MvttParams p;
    p.config = cfg;
    p.theta_a.encoder = {ConvBnRelu(ConvSpec::square(k, 1, c)), ConvBnRelu(ConvSpec::square(k, c, c))};
    p.theta_a.lstm = ConvLstmParams::zeros(c, c, k, cfg.slice_height, cfg.slice_width);
    for (ViewParams* v : {&p.theta_s, &p.theta_c}) {
      v->stem = ConvBnRelu(ConvSpec::square(k, 1, c));
      v->blocks.resize(cfg.residual_blocks_per_branch);
      for (auto& block : v->blocks)
        for (auto rate : cfg.hdc_rates) block.layers.emplace_back(ConvSpec::square(k, c, c, rate));
    }
    for (std::size_t i = 0; i < cfg.hdc_rates.size(); ++i)
      p.theta_am.mask.emplace_back(ConvSpec::square(k, i == 0 ? 1 : c, c, cfg.hdc_rates[i]));
    p.theta_am.project = ConvLayer(ConvSpec::square(1, c, c));
    p.theta_l = {ConvBnRelu(ConvSpec::square(k, c, c)), ConvBnRelu(ConvSpec::square(k, c, c)),
                 ConvLayer(ConvSpec::square(k, 2 * c, 1))};
    p.theta_as = {ConvBnRelu(ConvSpec::square(k, c, c)), ConvBnRelu(ConvSpec::square(k, c, c)),
                  ConvLayer(ConvSpec::square(1, 2 * c, 1))};
    return p;
  }

  /// He-uniform for layers feeding ReLU, Xavier-uniform for gates and sigmoid outputs.
  static MvttParams initialized(const MvttConfig& cfg, std::uint64_t seed) {
    MvttParams p = zeros(cfg);
    Rng rng(seed);
    auto he = [&](ConvBnRelu& l) { he_uniform(l.conv.weight, rng); };
    for (auto& l : p.theta_a.encoder) he(l);
    p.theta_a.lstm = ConvLstmParams::initialized(cfg.channels(), cfg.channels(), cfg.kernel, cfg.slice_height,
                                                 cfg.slice_width, rng);
    for (ViewParams* v : {&p.theta_s, &p.theta_c}) {
      he(v->stem);
      for (auto& block : v->blocks)
        for (auto& l : block.layers) he(l);
    }
    for (auto& l : p.theta_am.mask) he(l);
    xavier_uniform(p.theta_am.project.weight, rng);
    for (HeadParams* h : {&p.theta_l, &p.theta_as}) {
      he(h->first);
      he(h->second);
      xavier_uniform(h->out.weight, rng);
    }
    p.quantize_state();
    return p;
  }

  std::vector<NamedTensor> parameters() const { return collect(false); }
  std::vector<NamedTensor> buffers() const { return collect(true); }

  /// Parameters followed by buffers: the checkpoint order.
  std::vector<NamedTensor> state() const {
    auto all = parameters();
    auto b = buffers();
    all.insert(all.end(), b.begin(), b.end());
    return all;
  }

  void set_mode(NormMode mode) {
    for_each_bn([mode](BatchNormState& bn) { bn.mode = mode; });
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  /// Deep copy with fresh storage.
  MvttParams clone() const {
    MvttParams copy = zeros(config);
    auto src = state();
    auto dst = copy.state();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.data() = src[i].tensor.data();
    copy.set_mode(theta_l.first.bn.mode);
    return copy;
  }

  /// Rounds every stored value through f32 so checkpoints reproduce the model bitwise.
  void quantize_state() {
    for (auto& t : state()) quantize_to_f32(t.tensor.data());
  }

 private:
  template <typename F>
  void for_each_bn(F&& f) {
    for (auto& l : theta_a.encoder) f(l.bn);
    for (ViewParams* v : {&theta_s, &theta_c}) {
      f(v->stem.bn);
      for (auto& block : v->blocks)
        for (auto& l : block.layers) f(l.bn);
    }
    for (auto& l : theta_am.mask) f(l.bn);
    for (HeadParams* h : {&theta_l, &theta_as}) {
      f(h->first.bn);
      f(h->second.bn);
    }
  }

  std::vector<NamedTensor> collect(bool buffers_only) const {
    std::vector<NamedTensor> out;
    auto add_layer = [&](const ConvBnRelu& l, const std::string& conv_name, const std::string& bn_name) {
      if (buffers_only) {
        l.collect_buffers(bn_name, out);
      } else {
        l.collect(conv_name, bn_name, out);
      }
    };
    for (std::size_t i = 0; i < theta_a.encoder.size(); ++i) {
      const std::string base = "theta_a.encoder" + std::to_string(i);
      add_layer(theta_a.encoder[i], base + ".conv", base + ".bn");
    }
    if (!buffers_only) {
      auto lstm = theta_a.lstm.named("theta_a.lstm.");
      out.insert(out.end(), lstm.begin(), lstm.end());
    }
    const std::pair<const ViewParams*, std::string> views[] = {{&theta_s, "theta_s"}, {&theta_c, "theta_c"}};
    for (const auto& [v, name] : views) {
      add_layer(v->stem, name + ".stem.conv", name + ".stem.bn");
      for (std::size_t b = 0; b < v->blocks.size(); ++b)
        for (std::size_t i = 0; i < v->blocks[b].layers.size(); ++i) {
          const std::string base = name + ".block" + std::to_string(b);
          add_layer(v->blocks[b].layers[i], base + ".conv" + std::to_string(i + 1),
                    base + ".bn" + std::to_string(i + 1));
        }
    }
    for (std::size_t i = 0; i < theta_am.mask.size(); ++i) {
      const std::string base = "theta_am.mask" + std::to_string(i);
      add_layer(theta_am.mask[i], base + ".conv", base + ".bn");
    }
    if (!buffers_only) theta_am.project.collect("theta_am.project", out);
    const std::pair<const HeadParams*, std::string> heads[] = {{&theta_l, "theta_l"}, {&theta_as, "theta_as"}};
    for (const auto& [h, name] : heads) {
      add_layer(h->first, name + ".conv1", name + ".bn1");
      add_layer(h->second, name + ".conv2", name + ".bn2");
      if (!buffers_only) h->out.collect(name + ".out", out);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Forward pieces. Feature volumes are laid out (Z, C, Y, X): axial slice
// index first, matching the (slice, channel, height, width) tensor layout.

/// Per-slice encoder followed by the ConvLSTM over ascending slice order.
inline Tensor axial_branch(const Tensor& axial_slices, AxialParams& theta) {
  if (axial_slices.rank() != 4 || axial_slices.dim(0) == 0 || axial_slices.dim(1) != 1) {
    throw Error("axial_branch: expected (Z,1,Y,X) slices, got " + to_string(axial_slices.shape()));
  }
  Tensor f = axial_slices;
  for (auto& layer : theta.encoder) f = layer(f);
  const auto init = ConvLstmState::zeros(theta.lstm.hidden(), f.dim(2), f.dim(3));
  return concat(convlstm_run(f, theta.lstm, init), 0);
}

/// Dilated residual branch over a stack of view slices; resolution is preserved.
inline Tensor view_branch(const Tensor& view_slices, ViewParams& theta) {
  if (view_slices.rank() != 4 || view_slices.dim(1) != 1) {
    throw Error("view_branch: expected (N,1,H,W) slices, got " + to_string(view_slices.shape()));
  }
  Tensor y = theta.stem(view_slices);
  for (auto& block : theta.blocks) y = block(y);
  return y;
}

/// F_v = F_a + T(F_c) + T(F_s); view features arrive in their own slice layout.
inline Tensor fuse(const Tensor& f_axial, const Tensor& f_sagittal, const Tensor& f_coronal) {
  Tensor c = coronal_to_axial(f_coronal);
  Tensor s = sagittal_to_axial(f_sagittal);
  if (c.shape() != f_axial.shape() || s.shape() != f_axial.shape()) {
    throw Error("fuse: reoriented shapes " + to_string(c.shape()) + " / " + to_string(s.shape()) +
                " do not match axial " + to_string(f_axial.shape()));
  }
  return add(add(f_axial, c), s);
}

struct AttentionOutput {
  Tensor mask;  // AM in (0,1)
  Tensor enhanced;  // O = (1 + AM) * F_v
};

inline Tensor attention_mask(const Tensor& axial_slices, AttentionParams& theta) {
  Tensor m = axial_slices;
  for (auto& layer : theta.mask) m = layer(m);
  return sigmoid(theta.project(m));
}

inline AttentionOutput attention_apply(const Tensor& axial_slices, const Tensor& fused, AttentionParams& theta) {
  Tensor am = attention_mask(axial_slices, theta);
  if (am.shape() != fused.shape()) {
    throw Error("attention_apply: mask shape " + to_string(am.shape()) + " does not match fused features " +
                to_string(fused.shape()));
  }
  return {am, one_plus_gate(am, fused)};
}

/// Two conv+BN+ReLU layers whose outputs are concatenated into a final one-channel conv and sigmoid.
inline Tensor segmentation_head(const Tensor& features, HeadParams& theta) {
  Tensor a = theta.first(features);
  Tensor b = theta.second(a);
  return sigmoid(theta.out(concat_channels({a, b})));
}

inline Tensor anatomy_head(const Tensor& fused, HeadParams& theta_l) { return segmentation_head(fused, theta_l); }
inline Tensor scar_head(const Tensor& enhanced, HeadParams& theta_as) {
  return segmentation_head(enhanced, theta_as);
}

struct ForwardResult {
  Tensor f_axial, f_sagittal, f_coronal, fused;
  Tensor attention, enhanced;
  Tensor anatomy_prob;  // (Z,1,Y,X)
  Tensor scar_prob;     // (Z,1,Y,X)
};

inline ForwardResult forward(const Tensor& axial_slices, MvttParams& params) {
  const auto& cfg = params.config;
  if (axial_slices.rank() != 4 || axial_slices.dim(1) != 1 || axial_slices.dim(2) != cfg.slice_height ||
      axial_slices.dim(3) != cfg.slice_width) {
    throw Error("forward: input " + to_string(axial_slices.shape()) + " incompatible with model slice size " +
                std::to_string(cfg.slice_height) + "x" + std::to_string(cfg.slice_width));
  }
  ForwardResult r;
  r.f_axial = axial_branch(axial_slices, params.theta_a);
  r.f_sagittal = view_branch(permute_axes(axial_slices, kAxialToSagittal), params.theta_s);
  r.f_coronal = view_branch(permute_axes(axial_slices, kAxialToCoronal), params.theta_c);
  r.fused = fuse(r.f_axial, r.f_sagittal, r.f_coronal);
  auto att = attention_apply(axial_slices, r.fused, params.theta_am);
  r.attention = att.mask;
  r.enhanced = att.enhanced;
  r.anatomy_prob = anatomy_head(r.fused, params.theta_l);
  r.scar_prob = scar_head(r.enhanced, params.theta_as);
  return r;
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kDiceSmoothing = 1e-6;

/// Soft Dice loss 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps).
inline Tensor dice_loss(const Tensor& pred, const Tensor& truth, double eps = kDiceSmoothing) {
  detail::require_same_shape(pred, truth, "dice_loss");
  double inter = 0.0, pp = 0.0, gg = 0.0;
  const auto& p = pred.data();
  const auto& g = truth.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    pp += p[i] * p[i];
    gg += g[i] * g[i];
  }
  const double num = 2.0 * inter + eps;
  const double den = pp + gg + eps;
  return detail::make_result(Shape{1}, {1.0 - num / den}, {pred, truth}, [num, den](detail::Node& self) {
    auto& pp = *self.parents[0];
    auto& pg = *self.parents[1];
    const double upstream = self.grad[0];
    const double den2 = den * den;
    if (auto* gp = detail::grad_slot(pp))
      for (std::size_t i = 0; i < gp->size(); ++i)
        (*gp)[i] -= upstream * (2.0 * pg.data[i] * den - num * 2.0 * pp.data[i]) / den2;
    if (auto* gt = detail::grad_slot(pg))
      for (std::size_t i = 0; i < gt->size(); ++i)
        (*gt)[i] -= upstream * (2.0 * pp.data[i] * den - num * 2.0 * pg.data[i]) / den2;
  });
}

inline Tensor hybrid_loss(const Tensor& anatomy_prob, const Tensor& anatomy_truth, const Tensor& scar_prob,
                          const Tensor& scar_truth) {
  return add(dice_loss(anatomy_prob, anatomy_truth), dice_loss(scar_prob, scar_truth));
}

// ---------------------------------------------------------------------------
// Inference

struct SegmentationPair {
  Volume anatomy_prob;
  Volume scar_prob;
  Volume anatomy_mask;
  Volume scar_mask;
};

/// p >= threshold is foreground, so ties at the threshold go to foreground.
inline Volume binarize(const Volume& prob, double threshold) {
  Volume mask(prob.dims, prob.spacing_mm, VolumeKind::label);
  for (std::size_t i = 0; i < prob.size(); ++i) mask.values[i] = prob.values[i] >= threshold ? 1.0 : 0.0;
  return mask;
}

inline Volume tensor_to_volume(const Tensor& t, const Volume& like) {
  if (t.numel() != like.size()) throw Error("tensor_to_volume: size mismatch");
  Volume v(like.dims, like.spacing_mm, VolumeKind::intensity);
  v.values = t.data();
  return v;
}

/// Forward pass with running batch statistics, no tape. Expects a normalized volume.
inline SegmentationPair infer(const Volume& normalized, MvttParams& params) {
  normalized.validate();
  NoGradGuard no_grad;
  params.set_mode(NormMode::eval);
  auto r = forward(normalized.as_axial_tensor(), params);
  SegmentationPair out;
  out.anatomy_prob = tensor_to_volume(r.anatomy_prob, normalized);
  out.scar_prob = tensor_to_volume(r.scar_prob, normalized);
  out.anatomy_mask = binarize(out.anatomy_prob, params.config.threshold);
  out.scar_mask = binarize(out.scar_prob, params.config.threshold);
  return out;
}

}  // namespace mvtt
