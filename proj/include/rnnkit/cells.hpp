#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "rnnkit/linalg.hpp"
#include "rnnkit/types.hpp"

namespace rnnkit {

// One-timestep forward and analytic backward passes for the three cell
// architectures. Dimensions throughout: x in R^M, hidden state h in R^N,
// class outputs in R^K.
//
// Gradients mirror the parameter structs: a zeroed copy of the params is
// the gradient buffer, and backward passes accumulate into it.

enum class OutputActivation { kSoftmax, kSigmoid };

enum class Squash { kSigmoid, kTanh };

// One gated affine block: pre-activation wx*x + wh*h_prev + b, optionally
// layer-normalized (ln_gain/ln_bias present), then squashed.
template <typename S>
struct Gate {
  MatrixT<S> wx;       // N x M
  MatrixT<S> wh;       // N x N
  VectorT<S> b;        // N
  VectorT<S> ln_gain;  // N when layer norm is enabled, else empty
  VectorT<S> ln_bias;

  Gate() = default;
  Gate(Index n, Index m, bool with_layer_norm)
      : wx(MatrixT<S>::Zero(n, m)), wh(MatrixT<S>::Zero(n, n)), b(VectorT<S>::Zero(n)) {
    if (with_layer_norm) {
      ln_gain = VectorT<S>::Ones(n);
      ln_bias = VectorT<S>::Zero(n);
    }
  }

  bool uses_layer_norm() const { return ln_gain.size() > 0; }
};

template <typename S>
struct Head {
  MatrixT<S> w_out;  // K x N
  VectorT<S> b_out;  // K
  OutputActivation activation = OutputActivation::kSoftmax;

  Head() = default;
  Head(Index k, Index n, OutputActivation act)
      : w_out(MatrixT<S>::Zero(k, n)), b_out(VectorT<S>::Zero(k)), activation(act) {}
};

// Recurrent state threaded between timesteps. c is populated only for
// architectures with a distinct cell state (LSTM).
template <typename S>
struct CellState {
  VectorT<S> h;
  VectorT<S> c;

  bool has_cell() const { return c.size() > 0; }
};

struct CellOptions {
  bool layer_norm = false;
  bool trainable_init_state = false;
  OutputActivation output_activation = OutputActivation::kSoftmax;
};

// ---------------------------------------------------------------------------
// Gate evaluation shared by all cells.

template <typename S>
struct GateEval {
  VectorT<S> pre;  // raw affine output, before any layer norm
  VectorT<S> act;  // squashed output
};

template <typename S>
GateEval<S> eval_gate(const Gate<S>& g, const VectorT<S>& x, const VectorT<S>& h_prev,
                      Squash squash) {
  GateEval<S> e;
  e.pre = matmul(g.wx, x) + matmul(g.wh, h_prev) + g.b;
  VectorT<S> a = g.uses_layer_norm() ? layer_norm(e.pre, g.ln_gain, g.ln_bias) : e.pre;
  e.act = (squash == Squash::kSigmoid) ? sigmoid(a) : tanh_act(a);
  return e;
}

// Backward through one gate. d_act is dL/d(gate output); parameter
// gradients go into `grads` when non-null, and dL/dx, dL/dh_prev are
// accumulated into dx / dh_prev.
template <typename S>
void gate_backward(const Gate<S>& g, const GateEval<S>& e, const VectorT<S>& x,
                   const VectorT<S>& h_prev, const VectorT<S>& d_act, Squash squash,
                   Gate<S>* grads, VectorT<S>& dx, VectorT<S>& dh_prev) {
  VectorT<S> d_a = (squash == Squash::kSigmoid)
                       ? hadamard(d_act, sigmoid_grad_from_output(e.act))
                       : hadamard(d_act, tanh_grad_from_output(e.act));
  VectorT<S> d_pre;
  if (g.uses_layer_norm()) {
    if (grads != nullptr) {
      d_pre = layer_norm_backward(e.pre, g.ln_gain, d_a, grads->ln_gain, grads->ln_bias);
    } else {
      VectorT<S> scratch_gain = VectorT<S>::Zero(g.ln_gain.size());
      VectorT<S> scratch_bias = VectorT<S>::Zero(g.ln_gain.size());
      d_pre = layer_norm_backward(e.pre, g.ln_gain, d_a, scratch_gain, scratch_bias);
    }
  } else {
    d_pre = std::move(d_a);
  }
  if (grads != nullptr) {
    grads->wx.noalias() += d_pre * x.transpose();
    grads->wh.noalias() += d_pre * h_prev.transpose();
    grads->b += d_pre;
  }
  dx.noalias() += g.wx.transpose() * d_pre;
  dh_prev.noalias() += g.wh.transpose() * d_pre;
}

// Visit a gate's tensors in declared order, names prefixed by the gate's
// role. Layer-norm tensors appear only when present.
template <class G, class F>
void gate_enumerate(G& g, const std::string& prefix, F&& f) {
  f(prefix + ".wx", g.wx);
  f(prefix + ".wh", g.wh);
  f(prefix + ".b", g.b);
  if (g.ln_gain.size()) {
    f(prefix + ".ln_gain", g.ln_gain);
    f(prefix + ".ln_bias", g.ln_bias);
  }
}

// ---------------------------------------------------------------------------
// Output head.

template <typename S>
VectorT<S> output_head(const Head<S>& head, const VectorT<S>& h) {
  if (head.w_out.cols() != h.size()) {
    throw ShapeError("output_head: weight " + shape_of(head.w_out) + " vs state " + shape_of(h));
  }
  VectorT<S> logits = matmul(head.w_out, h) + head.b_out;
  return head.activation == OutputActivation::kSoftmax ? softmax(logits) : sigmoid(logits);
}

// dL/dlogits of the cross-entropy step loss at a one-hot target.
template <typename S>
VectorT<S> head_loss_delta(OutputActivation act, const VectorT<S>& yhat, const VectorT<S>& y) {
  if (yhat.size() != y.size()) {
    throw ShapeError("head_loss_delta: " + shape_of(yhat) + " vs " + shape_of(y));
  }
  if (act == OutputActivation::kSoftmax) {
    return yhat - y;
  }
  return (-y.array() * (S(1) - yhat.array())).matrix();
}

// ---------------------------------------------------------------------------
// Vanilla RNN.

template <typename S>
struct RnnParams {
  using Scalar = S;

  Gate<S> cell;  // wx = input weights, wh = recurrent weights
  Head<S> head;
  VectorT<S> h0;  // trainable initial state; empty when disabled

  RnnParams() = default;
  RnnParams(Index input, Index hidden, Index output, CellOptions opts = {})
      : cell(hidden, input, opts.layer_norm),
        head(output, hidden, opts.output_activation) {
    if (opts.trainable_init_state) h0 = VectorT<S>::Zero(hidden);
  }

  Index input_dim() const { return cell.wx.cols(); }
  Index hidden_dim() const { return cell.wx.rows(); }
  Index output_dim() const { return head.w_out.rows(); }

  void validate() const {
    if (cell.wh.rows() != hidden_dim() || cell.wh.cols() != hidden_dim() ||
        cell.b.size() != hidden_dim() || head.w_out.cols() != hidden_dim() ||
        head.b_out.size() != output_dim() ||
        (h0.size() != 0 && h0.size() != hidden_dim())) {
      throw ShapeError("RnnParams: inconsistent tensor shapes");
    }
  }

  template <class Self, class F>
  static void enumerate(Self& self, F&& f) {
    gate_enumerate(self.cell, "cell", f);
    f(std::string("w_out"), self.head.w_out);
    f(std::string("b_out"), self.head.b_out);
    if (self.h0.size()) f(std::string("h0"), self.h0);
  }

  std::vector<TensorView<S>> views();
  std::vector<TensorView<const S>> views() const;
};

template <typename S>
struct RnnCache {
  VectorT<S> x;
  VectorT<S> h_prev;
  GateEval<S> cell;
  VectorT<S> h;  // == cell.act
};

template <typename S>
std::pair<VectorT<S>, RnnCache<S>> rnn_step(const RnnParams<S>& p, const VectorT<S>& x,
                                            const VectorT<S>& h_prev) {
  p.validate();
  if (x.size() != p.input_dim() || h_prev.size() != p.hidden_dim()) {
    throw ShapeError("rnn_step: input " + shape_of(x) + ", state " + shape_of(h_prev) +
                     " vs dims M=" + std::to_string(p.input_dim()) +
                     " N=" + std::to_string(p.hidden_dim()));
  }
  RnnCache<S> cache;
  cache.x = x;
  cache.h_prev = h_prev;
  cache.cell = eval_gate(p.cell, x, h_prev, Squash::kTanh);
  cache.h = cache.cell.act;
  VectorT<S> h_out = cache.h;  // copy before the move: tuple members build back-to-front
  return {std::move(h_out), std::move(cache)};
}

// Gradients flowing out of one backward step: toward the step input and
// the incoming state(s). dc_state is the total cell-state gradient at this
// step (LSTM only) and is what the carousel diagnostics track.
template <typename S>
struct StepGradFlow {
  VectorT<S> dx;
  VectorT<S> dh_prev;
  VectorT<S> dc_prev;   // empty for RNN/GRU
  VectorT<S> dc_state;  // empty for RNN/GRU
};

template <typename S>
StepGradFlow<S> rnn_step_backward(const RnnCache<S>& cache, const RnnParams<S>& p,
                                  const VectorT<S>& dh, RnnParams<S>* grads) {
  if (dh.size() != p.hidden_dim() || cache.h_prev.size() != p.hidden_dim() ||
      cache.x.size() != p.input_dim()) {
    throw ShapeError("rnn_step_backward: cache/params mismatch");
  }
  StepGradFlow<S> flow;
  flow.dx = VectorT<S>::Zero(p.input_dim());
  flow.dh_prev = VectorT<S>::Zero(p.hidden_dim());
  gate_backward(p.cell, cache.cell, cache.x, cache.h_prev, dh, Squash::kTanh,
                grads ? &grads->cell : nullptr, flow.dx, flow.dh_prev);
  return flow;
}

// ---------------------------------------------------------------------------
// LSTM.

template <typename S>
struct LstmParams {
  using Scalar = S;

  Gate<S> forget;
  Gate<S> input;      // input gate (sigmoid)
  Gate<S> candidate;  // proposed cell content (tanh)
  Gate<S> output;     // output gate (sigmoid)
  Head<S> head;
  VectorT<S> h0;
  VectorT<S> c0;

  LstmParams() = default;
  LstmParams(Index in, Index hidden, Index out, CellOptions opts = {})
      : forget(hidden, in, opts.layer_norm),
        input(hidden, in, opts.layer_norm),
        candidate(hidden, in, opts.layer_norm),
        output(hidden, in, opts.layer_norm),
        head(out, hidden, opts.output_activation) {
    if (opts.trainable_init_state) {
      h0 = VectorT<S>::Zero(hidden);
      c0 = VectorT<S>::Zero(hidden);
    }
  }

  Index input_dim() const { return forget.wx.cols(); }
  Index hidden_dim() const { return forget.wx.rows(); }
  Index output_dim() const { return head.w_out.rows(); }

  void validate() const {
    const Index n = hidden_dim();
    const Index m = input_dim();
    for (const Gate<S>* g : {&forget, &input, &candidate, &output}) {
      if (g->wx.rows() != n || g->wx.cols() != m || g->wh.rows() != n || g->wh.cols() != n ||
          g->b.size() != n) {
        throw ShapeError("LstmParams: inconsistent gate shapes");
      }
    }
    if (head.w_out.cols() != n || head.b_out.size() != output_dim()) {
      throw ShapeError("LstmParams: inconsistent head shapes");
    }
  }

  template <class Self, class F>
  static void enumerate(Self& self, F&& f) {
    gate_enumerate(self.forget, "forget", f);
    gate_enumerate(self.input, "input", f);
    gate_enumerate(self.candidate, "candidate", f);
    gate_enumerate(self.output, "output", f);
    f(std::string("w_out"), self.head.w_out);
    f(std::string("b_out"), self.head.b_out);
    if (self.h0.size()) f(std::string("h0"), self.h0);
    if (self.c0.size()) f(std::string("c0"), self.c0);
  }

  std::vector<TensorView<S>> views();
  std::vector<TensorView<const S>> views() const;
};

template <typename S>
struct LstmCache {
  VectorT<S> x;
  VectorT<S> h_prev;
  VectorT<S> c_prev;
  GateEval<S> f, i, g, o;
  VectorT<S> c;
  VectorT<S> tanh_c;
  VectorT<S> h;
};

template <typename S>
std::tuple<VectorT<S>, VectorT<S>, LstmCache<S>> lstm_step(const LstmParams<S>& p,
                                                           const VectorT<S>& x,
                                                           const VectorT<S>& h_prev,
                                                           const VectorT<S>& c_prev) {
  p.validate();
  if (x.size() != p.input_dim() || h_prev.size() != p.hidden_dim() ||
      c_prev.size() != p.hidden_dim()) {
    throw ShapeError("lstm_step: input " + shape_of(x) + ", h " + shape_of(h_prev) + ", c " +
                     shape_of(c_prev) + " vs dims M=" + std::to_string(p.input_dim()) +
                     " N=" + std::to_string(p.hidden_dim()));
  }
  LstmCache<S> cache;
  cache.x = x;
  cache.h_prev = h_prev;
  cache.c_prev = c_prev;
  cache.f = eval_gate(p.forget, x, h_prev, Squash::kSigmoid);
  cache.i = eval_gate(p.input, x, h_prev, Squash::kSigmoid);
  cache.g = eval_gate(p.candidate, x, h_prev, Squash::kTanh);
  cache.o = eval_gate(p.output, x, h_prev, Squash::kSigmoid);
  cache.c = hadamard(cache.f.act, c_prev) + hadamard(cache.i.act, cache.g.act);
  cache.tanh_c = tanh_act(cache.c);
  cache.h = hadamard(cache.o.act, cache.tanh_c);
  VectorT<S> h_out = cache.h;  // copies first: tuple members build back-to-front
  VectorT<S> c_out = cache.c;
  return {std::move(h_out), std::move(c_out), std::move(cache)};
}

template <typename S>
StepGradFlow<S> lstm_step_backward(const LstmCache<S>& cache, const LstmParams<S>& p,
                                   const VectorT<S>& dh, const VectorT<S>& dc_in,
                                   LstmParams<S>* grads) {
  const Index n = p.hidden_dim();
  if (dh.size() != n || cache.h_prev.size() != n || cache.x.size() != p.input_dim()) {
    throw ShapeError("lstm_step_backward: cache/params mismatch");
  }
  if (dc_in.size() != 0 && dc_in.size() != n) {
    throw ShapeError("lstm_step_backward: dc length " + shape_of(dc_in));
  }

  StepGradFlow<S> flow;
  flow.dx = VectorT<S>::Zero(p.input_dim());
  flow.dh_prev = VectorT<S>::Zero(n);

  VectorT<S> d_out_gate = hadamard(dh, cache.tanh_c);
  // Total cell-state gradient: the carried-forward term plus the local
  // path through h = o * tanh(c).
  flow.dc_state =
      (dh.array() * cache.o.act.array() * (S(1) - cache.tanh_c.array().square())).matrix();
  if (dc_in.size() != 0) flow.dc_state += dc_in;

  VectorT<S> d_forget = hadamard(flow.dc_state, cache.c_prev);
  VectorT<S> d_input = hadamard(flow.dc_state, cache.g.act);
  VectorT<S> d_cand = hadamard(flow.dc_state, cache.i.act);
  flow.dc_prev = hadamard(flow.dc_state, cache.f.act);

  Gate<S>* gf = grads ? &grads->forget : nullptr;
  Gate<S>* gi = grads ? &grads->input : nullptr;
  Gate<S>* gg = grads ? &grads->candidate : nullptr;
  Gate<S>* go = grads ? &grads->output : nullptr;
  gate_backward(p.forget, cache.f, cache.x, cache.h_prev, d_forget, Squash::kSigmoid, gf,
                flow.dx, flow.dh_prev);
  gate_backward(p.input, cache.i, cache.x, cache.h_prev, d_input, Squash::kSigmoid, gi, flow.dx,
                flow.dh_prev);
  gate_backward(p.candidate, cache.g, cache.x, cache.h_prev, d_cand, Squash::kTanh, gg, flow.dx,
                flow.dh_prev);
  gate_backward(p.output, cache.o, cache.x, cache.h_prev, d_out_gate, Squash::kSigmoid, go,
                flow.dx, flow.dh_prev);
  return flow;
}

// ---------------------------------------------------------------------------
// GRU.

template <typename S>
struct GruParams {
  using Scalar = S;

  Gate<S> update;     // z: how much of the previous state to copy forward
  Gate<S> reset;      // r: how much of the previous state feeds the candidate
  Gate<S> candidate;  // wh is applied to h_prev before the reset product
  Head<S> head;
  VectorT<S> h0;

  GruParams() = default;
  GruParams(Index in, Index hidden, Index out, CellOptions opts = {})
      : update(hidden, in, opts.layer_norm),
        reset(hidden, in, opts.layer_norm),
        candidate(hidden, in, opts.layer_norm),
        head(out, hidden, opts.output_activation) {
    if (opts.trainable_init_state) h0 = VectorT<S>::Zero(hidden);
  }

  Index input_dim() const { return update.wx.cols(); }
  Index hidden_dim() const { return update.wx.rows(); }
  Index output_dim() const { return head.w_out.rows(); }

  void validate() const {
    const Index n = hidden_dim();
    const Index m = input_dim();
    for (const Gate<S>* g : {&update, &reset, &candidate}) {
      if (g->wx.rows() != n || g->wx.cols() != m || g->wh.rows() != n || g->wh.cols() != n ||
          g->b.size() != n) {
        throw ShapeError("GruParams: inconsistent gate shapes");
      }
    }
    if (head.w_out.cols() != n || head.b_out.size() != output_dim()) {
      throw ShapeError("GruParams: inconsistent head shapes");
    }
  }

  template <class Self, class F>
  static void enumerate(Self& self, F&& f) {
    gate_enumerate(self.update, "update", f);
    gate_enumerate(self.reset, "reset", f);
    gate_enumerate(self.candidate, "candidate", f);
    f(std::string("w_out"), self.head.w_out);
    f(std::string("b_out"), self.head.b_out);
    if (self.h0.size()) f(std::string("h0"), self.h0);
  }

  std::vector<TensorView<S>> views();
  std::vector<TensorView<const S>> views() const;
};

template <typename S>
struct GruCache {
  VectorT<S> x;
  VectorT<S> h_prev;
  GateEval<S> z, r;
  VectorT<S> hh;  // candidate.wh * h_prev, before the reset product
  GateEval<S> cand;
  VectorT<S> h;
};

template <typename S>
std::pair<VectorT<S>, GruCache<S>> gru_step(const GruParams<S>& p, const VectorT<S>& x,
                                            const VectorT<S>& h_prev) {
  p.validate();
  if (x.size() != p.input_dim() || h_prev.size() != p.hidden_dim()) {
    throw ShapeError("gru_step: input " + shape_of(x) + ", state " + shape_of(h_prev) +
                     " vs dims M=" + std::to_string(p.input_dim()) +
                     " N=" + std::to_string(p.hidden_dim()));
  }
  GruCache<S> cache;
  cache.x = x;
  cache.h_prev = h_prev;
  cache.z = eval_gate(p.update, x, h_prev, Squash::kSigmoid);
  cache.r = eval_gate(p.reset, x, h_prev, Squash::kSigmoid);
  cache.hh = matmul(p.candidate.wh, h_prev);
  cache.cand.pre = matmul(p.candidate.wx, x) + hadamard(cache.r.act, cache.hh) + p.candidate.b;
  VectorT<S> a = p.candidate.uses_layer_norm()
                     ? layer_norm(cache.cand.pre, p.candidate.ln_gain, p.candidate.ln_bias)
                     : cache.cand.pre;
  cache.cand.act = tanh_act(a);
  // z near 1 copies the past; 1-z admits the new candidate.
  cache.h = hadamard(cache.z.act, h_prev) +
            hadamard(VectorT<S>((S(1) - cache.z.act.array()).matrix()), cache.cand.act);
  VectorT<S> h_out = cache.h;  // copy before the move: tuple members build back-to-front
  return {std::move(h_out), std::move(cache)};
}

template <typename S>
StepGradFlow<S> gru_step_backward(const GruCache<S>& cache, const GruParams<S>& p,
                                  const VectorT<S>& dh, GruParams<S>* grads) {
  const Index n = p.hidden_dim();
  if (dh.size() != n || cache.h_prev.size() != n || cache.x.size() != p.input_dim()) {
    throw ShapeError("gru_step_backward: cache/params mismatch");
  }
  StepGradFlow<S> flow;
  flow.dx = VectorT<S>::Zero(p.input_dim());
  flow.dh_prev = VectorT<S>::Zero(n);

  VectorT<S> d_update = (dh.array() * (cache.h_prev.array() - cache.cand.act.array())).matrix();
  flow.dh_prev.array() += dh.array() * cache.z.act.array();  // direct copy path
  VectorT<S> d_cand_act = (dh.array() * (S(1) - cache.z.act.array())).matrix();

  VectorT<S> d_a = hadamard(d_cand_act, tanh_grad_from_output(cache.cand.act));
  VectorT<S> d_cand_pre;
  if (p.candidate.uses_layer_norm()) {
    if (grads != nullptr) {
      d_cand_pre = layer_norm_backward(cache.cand.pre, p.candidate.ln_gain, d_a,
                                       grads->candidate.ln_gain, grads->candidate.ln_bias);
    } else {
      VectorT<S> sg = VectorT<S>::Zero(n), sb = VectorT<S>::Zero(n);
      d_cand_pre = layer_norm_backward(cache.cand.pre, p.candidate.ln_gain, d_a, sg, sb);
    }
  } else {
    d_cand_pre = std::move(d_a);
  }

  if (grads != nullptr) {
    grads->candidate.wx.noalias() += d_cand_pre * cache.x.transpose();
    grads->candidate.b += d_cand_pre;
  }
  flow.dx.noalias() += p.candidate.wx.transpose() * d_cand_pre;

  // Both Hadamard paths of the candidate's recurrent term.
  VectorT<S> d_reset = hadamard(d_cand_pre, cache.hh);
  VectorT<S> d_hh = hadamard(d_cand_pre, cache.r.act);
  if (grads != nullptr) {
    grads->candidate.wh.noalias() += d_hh * cache.h_prev.transpose();
  }
  flow.dh_prev.noalias() += p.candidate.wh.transpose() * d_hh;

  gate_backward(p.reset, cache.r, cache.x, cache.h_prev, d_reset, Squash::kSigmoid,
                grads ? &grads->reset : nullptr, flow.dx, flow.dh_prev);
  gate_backward(p.update, cache.z, cache.x, cache.h_prev, d_update, Squash::kSigmoid,
                grads ? &grads->update : nullptr, flow.dx, flow.dh_prev);
  return flow;
}

// ---------------------------------------------------------------------------
// Uniform access for sequence-level code.

namespace detail {

template <typename S, class Self, class P>
std::vector<TensorView<S>> collect_views(Self& self) {
  std::vector<TensorView<S>> out;
  P::enumerate(self, [&out](std::string name, auto& t) {
    out.push_back(TensorView<S>{std::move(name), t.data(), t.rows(), t.cols()});
  });
  return out;
}

}  // namespace detail

template <typename S>
std::vector<TensorView<S>> RnnParams<S>::views() {
  return detail::collect_views<S, RnnParams<S>, RnnParams<S>>(*this);
}
template <typename S>
std::vector<TensorView<const S>> RnnParams<S>::views() const {
  return detail::collect_views<const S, const RnnParams<S>, RnnParams<S>>(*this);
}
template <typename S>
std::vector<TensorView<S>> LstmParams<S>::views() {
  return detail::collect_views<S, LstmParams<S>, LstmParams<S>>(*this);
}
template <typename S>
std::vector<TensorView<const S>> LstmParams<S>::views() const {
  return detail::collect_views<const S, const LstmParams<S>, LstmParams<S>>(*this);
}
template <typename S>
std::vector<TensorView<S>> GruParams<S>::views() {
  return detail::collect_views<S, GruParams<S>, GruParams<S>>(*this);
}
template <typename S>
std::vector<TensorView<const S>> GruParams<S>::views() const {
  return detail::collect_views<const S, const GruParams<S>, GruParams<S>>(*this);
}

// Head application straight from a parameter struct.
template <class P>
VectorT<typename P::Scalar> output_head(const P& p, const VectorT<typename P::Scalar>& h) {
  return output_head(p.head, h);
}

// Zero every tensor, keeping shapes. A zeroed copy of a param struct is
// the canonical gradient buffer.
template <class P>
void zero_params(P& p) {
  using S = typename P::Scalar;
  for (auto v : p.views()) {
    Eigen::Map<VectorT<S>>(v.data, v.size()).setZero();
  }
}

template <class P>
P zero_like(const P& p) {
  P z = p;
  zero_params(z);
  return z;
}

template <class P>
void add_in_place(P& dst, const P& src) {
  using S = typename P::Scalar;
  auto vd = dst.views();
  auto vs = src.views();
  if (vd.size() != vs.size()) throw ShapeError("add_in_place: structure mismatch");
  for (std::size_t i = 0; i < vd.size(); ++i) {
    if (vd[i].size() != vs[i].size()) throw ShapeError("add_in_place: tensor size mismatch");
    Eigen::Map<VectorT<S>>(vd[i].data, vd[i].size()) +=
        Eigen::Map<const VectorT<S>>(vs[i].data, vs[i].size());
  }
}

template <class P>
void scale_in_place(P& p, typename P::Scalar a) {
  using S = typename P::Scalar;
  for (auto v : p.views()) {
    Eigen::Map<VectorT<S>>(v.data, v.size()) *= a;
  }
}

template <class P>
typename P::Scalar max_abs_diff(const P& a, const P& b) {
  using S = typename P::Scalar;
  auto va = a.views();
  auto vb = b.views();
  if (va.size() != vb.size()) throw ShapeError("max_abs_diff: structure mismatch");
  S worst = 0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    if (va[i].size() != vb[i].size()) throw ShapeError("max_abs_diff: tensor size mismatch");
    for (Index j = 0; j < va[i].size(); ++j) {
      worst = std::max(worst, std::abs(va[i].data[j] - vb[i].data[j]));
    }
  }
  return worst;
}

enum class CellKind { kRnn, kLstm, kGru };

inline const char* cell_kind_name(CellKind k) {
  switch (k) {
    case CellKind::kRnn: return "rnn";
    case CellKind::kLstm: return "lstm";
    case CellKind::kGru: return "gru";
  }
  return "?";
}

template <class P>
struct CellTraits;

template <typename S>
struct CellTraits<RnnParams<S>> {
  using Scalar = S;
  using Cache = RnnCache<S>;
  static constexpr bool kHasCellState = false;
  static constexpr CellKind kKind = CellKind::kRnn;

  static CellState<S> step(const RnnParams<S>& p, const VectorT<S>& x, const CellState<S>& prev,
                           Cache& cache) {
    auto [h, c] = rnn_step(p, x, prev.h);
    cache = std::move(c);
    return CellState<S>{h, {}};
  }
  static StepGradFlow<S> backward(const Cache& cache, const RnnParams<S>& p,
                                  const VectorT<S>& dh, const VectorT<S>& /*dc*/,
                                  RnnParams<S>* grads) {
    return rnn_step_backward(cache, p, dh, grads);
  }
};

template <typename S>
struct CellTraits<LstmParams<S>> {
  using Scalar = S;
  using Cache = LstmCache<S>;
  static constexpr bool kHasCellState = true;
  static constexpr CellKind kKind = CellKind::kLstm;

  static CellState<S> step(const LstmParams<S>& p, const VectorT<S>& x, const CellState<S>& prev,
                           Cache& cache) {
    auto [h, c, cc] = lstm_step(p, x, prev.h, prev.c);
    cache = std::move(cc);
    return CellState<S>{h, c};
  }
  static StepGradFlow<S> backward(const Cache& cache, const LstmParams<S>& p,
                                  const VectorT<S>& dh, const VectorT<S>& dc,
                                  LstmParams<S>* grads) {
    return lstm_step_backward(cache, p, dh, dc, grads);
  }
};

template <typename S>
struct CellTraits<GruParams<S>> {
  using Scalar = S;
  using Cache = GruCache<S>;
  static constexpr bool kHasCellState = false;
  static constexpr CellKind kKind = CellKind::kGru;

  static CellState<S> step(const GruParams<S>& p, const VectorT<S>& x, const CellState<S>& prev,
                           Cache& cache) {
    auto [h, c] = gru_step(p, x, prev.h);
    cache = std::move(c);
    return CellState<S>{h, {}};
  }
  static StepGradFlow<S> backward(const Cache& cache, const GruParams<S>& p,
                                  const VectorT<S>& dh, const VectorT<S>& /*dc*/,
                                  GruParams<S>* grads) {
    return gru_step_backward(cache, p, dh, grads);
  }
};

}  // namespace rnnkit
