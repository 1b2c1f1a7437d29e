#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mvtt/conv.hpp"
#include "mvtt/gradcheck.hpp"
#include "mvtt/random.hpp"
#include "mvtt/tensor.hpp"

namespace mvtt {

/// Convolutional LSTM parameters. Input and recurrent kernels are (hidden, in, k, k)
/// and (hidden, hidden, k, k); peepholes are (1, hidden, H, W) and enter by
/// Hadamard product; biases are per hidden channel.
struct ConvLstmParams {
  Tensor w_xf, w_hf, w_xi, w_hi, w_xc, w_hc, w_xo, w_ho;
  Tensor w_cf, w_ci, w_co;
  Tensor b_f, b_i, b_c, b_o;
  std::size_t kernel = 3;

  static ConvLstmParams zeros(std::size_t in_channels, std::size_t hidden, std::size_t kernel, std::size_t height,
                              std::size_t width) {
    ConvLstmParams p;
    p.kernel = kernel;
    const Shape wx{hidden, in_channels, kernel, kernel};
    const Shape wh{hidden, hidden, kernel, kernel};
    const Shape peep{1, hidden, height, width};
    for (Tensor* t : {&p.w_xf, &p.w_xi, &p.w_xc, &p.w_xo}) *t = Tensor(wx, 0.0, true);
    for (Tensor* t : {&p.w_hf, &p.w_hi, &p.w_hc, &p.w_ho}) *t = Tensor(wh, 0.0, true);
    for (Tensor* t : {&p.w_cf, &p.w_ci, &p.w_co}) *t = Tensor(peep, 0.0, true);
    for (Tensor* t : {&p.b_f, &p.b_i, &p.b_c, &p.b_o}) *t = Tensor(Shape{hidden}, 0.0, true);
    return p;
  }

  /// Xavier-uniform gate kernels, zero peepholes, zero biases except forget = 1.
  static ConvLstmParams initialized(std::size_t in_channels, std::size_t hidden, std::size_t kernel,
                                    std::size_t height, std::size_t width, Rng& rng) {
    ConvLstmParams p = zeros(in_channels, hidden, kernel, height, width);
    for (Tensor* t : {&p.w_xf, &p.w_hf, &p.w_xi, &p.w_hi, &p.w_xc, &p.w_hc, &p.w_xo, &p.w_ho}) xavier_uniform(*t, rng);
    std::fill(p.b_f.data().begin(), p.b_f.data().end(), 1.0);
    return p;
  }

  std::size_t in_channels() const { return w_xf.dim(1); }
  std::size_t hidden() const { return w_xf.dim(0); }

  std::vector<NamedTensor> named(const std::string& prefix) const {
    return {{prefix + "w_xf", w_xf}, {prefix + "w_hf", w_hf}, {prefix + "w_xi", w_xi}, {prefix + "w_hi", w_hi},
            {prefix + "w_xc", w_xc}, {prefix + "w_hc", w_hc}, {prefix + "w_xo", w_xo}, {prefix + "w_ho", w_ho},
            {prefix + "w_cf", w_cf}, {prefix + "w_ci", w_ci}, {prefix + "w_co", w_co}, {prefix + "b_f", b_f},
            {prefix + "b_i", b_i},   {prefix + "b_c", b_c},   {prefix + "b_o", b_o}};
  }
};

struct ConvLstmState {
  Tensor h;
  Tensor c;

  static ConvLstmState zeros(std::size_t hidden, std::size_t height, std::size_t width) {
    return {Tensor(Shape{1, hidden, height, width}), Tensor(Shape{1, hidden, height, width})};
  }
};

/// One step with the gate activations exposed.
struct ConvLstmTrace {
  ConvLstmState state;
  Tensor forget, input, output;
};

namespace detail {

struct GateInputs {
  Tensor f, i, c, o;
};

inline ConvSpec lstm_input_spec(const ConvLstmParams& p) {
  return ConvSpec::square(p.kernel, p.in_channels(), p.hidden());
}
inline ConvSpec lstm_recurrent_spec(const ConvLstmParams& p) {
  return ConvSpec::square(p.kernel, p.hidden(), p.hidden());
}

// Input-to-gate convolutions (bias folded in) for a whole stack of slices.
inline GateInputs project_inputs(const Tensor& x, const ConvLstmParams& p) {
  const auto spec = lstm_input_spec(p);
  return {conv2d(x, p.w_xf, p.b_f, spec), conv2d(x, p.w_xi, p.b_i, spec), conv2d(x, p.w_xc, p.b_c, spec),
          conv2d(x, p.w_xo, p.b_o, spec)};
}

inline ConvLstmTrace step_from_projections(const GateInputs& xp, const ConvLstmState& prev, const ConvLstmParams& p) {
  if (prev.h.shape() != xp.f.shape() || prev.c.shape() != xp.f.shape()) {
    throw Error("convlstm_step: state shapes " + to_string(prev.h.shape()) + "/" + to_string(prev.c.shape()) +
                " do not match gate shape " + to_string(xp.f.shape()));
  }
  if (p.w_cf.shape() != xp.f.shape()) {
    throw Error("convlstm_step: peephole shape " + to_string(p.w_cf.shape()) + " does not match state shape " +
                to_string(xp.f.shape()));
  }
  const auto rec = lstm_recurrent_spec(p);
  const Tensor none;
  Tensor f = sigmoid(add(add(xp.f, conv2d(prev.h, p.w_hf, none, rec)), hadamard(p.w_cf, prev.c)));
  Tensor i = sigmoid(add(add(xp.i, conv2d(prev.h, p.w_hi, none, rec)), hadamard(p.w_ci, prev.c)));
  Tensor candidate = relu(add(xp.c, conv2d(prev.h, p.w_hc, none, rec)));
  Tensor c = add(hadamard(f, prev.c), hadamard(i, candidate));
  Tensor o = sigmoid(add(add(xp.o, conv2d(prev.h, p.w_ho, none, rec)), hadamard(p.w_co, c)));
  Tensor h = hadamard(o, relu(c));
  return {{h, c}, f, i, o};
}

}  // namespace detail

/// Single ConvLSTM step on a (1, in, H, W) slice.
inline ConvLstmTrace convlstm_step_traced(const Tensor& x_t, const ConvLstmState& prev, const ConvLstmParams& p) {
  if (x_t.rank() != 4 || x_t.dim(0) != 1) {
    throw Error("convlstm_step: expected a (1,C,H,W) slice, got " + to_string(x_t.shape()));
  }
  if (prev.h.rank() != 4 || x_t.dim(2) != prev.h.dim(2) || x_t.dim(3) != prev.h.dim(3)) {
    throw Error("convlstm_step: input " + to_string(x_t.shape()) + " and state " + to_string(prev.h.shape()) +
                " differ spatially");
  }
  return detail::step_from_projections(detail::project_inputs(x_t, p), prev, p);
}

inline ConvLstmState convlstm_step(const Tensor& x_t, const ConvLstmState& prev, const ConvLstmParams& p) {
  return convlstm_step_traced(x_t, prev, p).state;
}

/// Runs the recurrence over slices 0..T-1 of a (T, in, H, W) stack and returns h_1..h_T.
inline std::vector<Tensor> convlstm_run(const Tensor& sequence, const ConvLstmParams& p, const ConvLstmState& init) {
  if (sequence.rank() != 4 || sequence.dim(0) == 0) {
    throw Error("convlstm_run: expected a nonempty (T,C,H,W) sequence, got " +
                (sequence.defined() ? to_string(sequence.shape()) : std::string("undefined")));
  }
  const auto projected = detail::project_inputs(sequence, p);
  std::vector<Tensor> hidden;
  hidden.reserve(sequence.dim(0));
  ConvLstmState state = init;
  for (std::size_t t = 0; t < sequence.dim(0); ++t) {
    const detail::GateInputs xp{narrow(projected.f, 0, t, 1), narrow(projected.i, 0, t, 1),
                                narrow(projected.c, 0, t, 1), narrow(projected.o, 0, t, 1)};
    state = detail::step_from_projections(xp, state, p).state;
    hidden.push_back(state.h);
  }
  return hidden;
}

inline std::vector<Tensor> convlstm_run(const std::vector<Tensor>& sequence, const ConvLstmParams& p,
                                        const ConvLstmState& init) {
  if (sequence.empty()) throw Error("convlstm_run: empty sequence");
  return convlstm_run(concat(sequence, 0), p, init);
}

}  // namespace mvtt
