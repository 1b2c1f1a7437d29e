#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mvtt {

/// Raised for contract violations: shape mismatches, invalid arguments,
/// malformed files. The message always names the offending values.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

inline std::uint64_t next_node_id() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}

// One recorded value on the tape. Non-leaf nodes hold their parents and a
// closure that pushes this node's gradient into them.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = next_node_id();
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline bool& grad_enabled_flag() {
  static thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables tape recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Dense row-major tensor of doubles with an optional gradient slot.
/// Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->data.assign(mvtt::numel(shape), fill);
    node_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != mvtt::numel(shape)) {
      throw Error("tensor: shape " + to_string(shape) + " needs " + std::to_string(mvtt::numel(shape)) +
                  " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    set_requires_grad(requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{1}, v, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  double item() const {
    if (numel() != 1) throw Error("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
  }
  bool has_grad() const { return node_->requires_grad && node_->grad.size() == node_->data.size(); }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const { return node_->grad; }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), data(), requires_grad); }

  /// Same storage, no history: a leaf that stops gradient flow.
  Tensor detach() const { return Tensor(shape(), data(), false); }

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

// Builds the output of a differentiable op. History is recorded only when
// recording is enabled and at least one input needs a gradient.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  node->parents.reserve(inputs.size());
  for (auto& t : inputs) node->parents.push_back(t.node());
  node->backward_fn = std::move(backward_fn);
  return out;
}

inline std::vector<double>* grad_slot(Node& parent) {
  if (!parent.requires_grad) return nullptr;
  parent.ensure_grad();
  return &parent.grad;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace detail

/// Reverse sweep from a scalar root. Leaf gradients accumulate across calls;
/// intermediate gradients are rebuilt each sweep.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw Error("backward: root must be scalar, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !p->is_leaf && seen.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  // order is post-order: parents before children. Reset interior grads.
  for (auto* n : order) n->grad.assign(n->data.size(), 0.0);
  auto* root = loss.node().get();
  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

enum class ActivationKind { relu, sigmoid };
enum class ElementwiseKind { add, hadamard };

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& in = x.data();
  // Written so that NaN passes through instead of becoming zero.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] < 0.0 ? 0.0 : in[i];
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (auto* g = detail::grad_slot(p)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (p.data[i] > 0.0) (*g)[i] += self.grad[i];
    }
  });
}

/// Logistic function; clamped so that outputs stay strictly inside (0,1).
inline Tensor sigmoid(const Tensor& x) {
  constexpr double lo = 1e-15;
  constexpr double hi = 1.0 - 1e-15;
  std::vector<double> out(x.numel());
  const auto& in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(sigmoid_scalar(in[i]), lo, hi);
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (auto* g = detail::grad_slot(p)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double s = self.data[i];
        (*g)[i] += self.grad[i] * s * (1.0 - s);
      }
    }
  });
}

inline Tensor activation(const Tensor& x, ActivationKind kind) {
  return kind == ActivationKind::relu ? relu(x) : sigmoid(x);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& parent : self.parents) {
      if (auto* g = detail::grad_slot(*parent))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (auto* g = detail::grad_slot(pa))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * pb.data[i];
    if (auto* g = detail::grad_slot(pb))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * pa.data[i];
  });
}

inline Tensor elementwise(const Tensor& a, const Tensor& b, ElementwiseKind kind) {
  return kind == ElementwiseKind::add ? add(a, b) : hadamard(a, b);
}

/// (1 + gate) * x, evaluated as one rounding per element.
inline Tensor one_plus_gate(const Tensor& gate, const Tensor& x) {
  detail::require_same_shape(gate, x, "one_plus_gate");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 + gate[i]) * x[i];
  return detail::make_result(x.shape(), std::move(out), {gate, x}, [](detail::Node& self) {
    auto& pg = *self.parents[0];
    auto& px = *self.parents[1];
    if (auto* g = detail::grad_slot(pg))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * px.data[i];
    if (auto* g = detail::grad_slot(px))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * (1.0 + pg.data[i]);
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result(Shape{1}, {s}, {x}, [](detail::Node& self) {
    if (auto* g = detail::grad_slot(*self.parents[0]))
      for (double& v : *g) v += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Layout ops

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Splits a shape around `axis` into (outer, axis length, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_at(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

/// Concatenates along `axis`; all other axes must agree.
inline Tensor concat(const std::vector<Tensor>& inputs, std::size_t axis) {
  if (inputs.empty()) throw Error("concat: no inputs");
  const Shape& ref = inputs.front().shape();
  if (axis >= ref.size()) throw Error("concat: axis " + std::to_string(axis) + " out of range for " + to_string(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& t : inputs) {
    Shape s = t.shape();
    if (s.size() != ref.size()) throw Error("concat: rank mismatch " + to_string(ref) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
    s[axis] = ref[axis];
    if (s != ref) throw Error("concat: non-concat axes differ " + to_string(ref) + " vs " + to_string(t.shape()));
  }
  auto [outer, total, inner] = detail::split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (const auto& t : inputs) {
    const std::size_t len = t.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.data().begin() + o * len * inner, len * inner, out.begin() + (o * total + offset) * inner);
    }
    offset += len;
  }
  return detail::make_result(out_shape, std::move(out), inputs, [axis](detail::Node& self) {
    auto [outer, total, inner] = detail::split_at(self.shape, axis);
    std::size_t offset = 0;
    for (auto& parent : self.parents) {
      const std::size_t len = parent->shape[axis];
      if (auto* g = detail::grad_slot(*parent)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + (o * total + offset) * inner;
          double* dst = g->data() + o * len * inner;
          for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      }
      offset += len;
    }
  });
}

/// Channel-axis concatenation of (slice, channel, height, width) tensors.
inline Tensor concat_channels(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs)
    if (t.rank() != 4) throw Error("concat_channels: expected rank-4 input, got " + to_string(t.shape()));
  return concat(inputs, 1);
}

/// Contiguous sub-range [start, start+length) of `axis`.
inline Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis) || length == 0) {
    throw Error("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) + ") on axis " +
                std::to_string(axis) + " invalid for " + to_string(x.shape()));
  }
  auto [outer, total, inner] = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().begin() + (o * total + start) * inner, length * inner, out.begin() + o * length * inner);
  }
  return detail::make_result(out_shape, std::move(out), {x}, [axis, start, length](detail::Node& self) {
    auto& p = *self.parents[0];
    if (auto* g = detail::grad_slot(p)) {
      auto [outer, total, inner] = detail::split_at(p.shape, axis);
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = self.grad.data() + o * length * inner;
        double* dst = g->data() + (o * total + start) * inner;
        for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    }
  });
}

inline bool is_permutation_of_axes(const std::vector<std::size_t>& order, std::size_t rank) {
  if (order.size() != rank) return false;
  std::vector<bool> hit(rank, false);
  for (auto a : order) {
    if (a >= rank || hit[a]) return false;
    hit[a] = true;
  }
  return true;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inv[order[i]] = i;
  return inv;
}

/// Output axis i is input axis order[i]: out[j_0..j_n] = in[k] with k[order[i]] = j_i.
inline Tensor permute_axes(const Tensor& x, const std::vector<std::size_t>& order) {
  if (!is_permutation_of_axes(order, x.rank())) {
    std::ostringstream os;
    os << "permute_axes: invalid permutation [";
    for (std::size_t i = 0; i < order.size(); ++i) os << (i ? "," : "") << order[i];
    os << "] for shape " << to_string(x.shape());
    throw Error(os.str());
  }
  const std::size_t rank = x.rank();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(order[i]);
  const auto in_strides = detail::strides_of(x.shape());
  std::vector<std::size_t> gather(rank);  // input stride per output axis
  for (std::size_t i = 0; i < rank; ++i) gather[i] = in_strides[order[i]];

  auto for_each_index = [rank, out_shape, gather](auto&& visit) {
    const std::size_t count = numel(out_shape);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t dst = 0; dst < count; ++dst) {
      visit(dst, src);
      for (std::size_t a = rank; a-- > 0;) {
        src += gather[a];
        if (++idx[a] < out_shape[a]) break;
        src -= gather[a] * out_shape[a];
        idx[a] = 0;
      }
    }
  };

  std::vector<double> out(x.numel());
  const auto& in = x.data();
  for_each_index([&](std::size_t dst, std::size_t src) { out[dst] = in[src]; });
  return detail::make_result(out_shape, std::move(out), {x}, [for_each_index](detail::Node& self) {
    if (auto* g = detail::grad_slot(*self.parents[0]))
      for_each_index([&](std::size_t dst, std::size_t src) { (*g)[src] += self.grad[dst]; });
  });
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mvtt
