#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rnnkit/cells.hpp"
#include "rnnkit/training.hpp"

namespace rnnkit {

// Sequence-level machinery: unrolling a cell through time, cross-entropy
// sequence loss, backpropagation through time (full and truncated), and
// stacked multi-layer models.

enum class Topology { kOneToOne, kOneToMany, kManyToOne, kManyToMany };

inline const char* topology_name(Topology t) {
  switch (t) {
    case Topology::kOneToOne: return "one_to_one";
    case Topology::kOneToMany: return "one_to_many";
    case Topology::kManyToOne: return "many_to_one";
    case Topology::kManyToMany: return "many_to_many";
  }
  return "?";
}

// Steps at which the model emits an output and a target is expected.
inline std::vector<Index> loss_steps(Topology topo, Index T) {
  if (T < 1) throw ShapeError("loss_steps: empty sequence");
  switch (topo) {
    case Topology::kOneToOne:
      if (T != 1) throw ConfigError("one_to_one runs on length-1 sequences");
      return {0};
    case Topology::kManyToOne: return {T - 1};
    case Topology::kOneToMany:
    case Topology::kManyToMany: {
      std::vector<Index> all(static_cast<std::size_t>(T));
      for (Index t = 0; t < T; ++t) all[static_cast<std::size_t>(t)] = t;
      return all;
    }
  }
  throw ConfigError("loss_steps: unknown topology");
}

// One supervised sequence: inputs for every step, targets for every loss
// step (in loss-step order).
template <typename S>
struct SequenceSample {
  std::vector<VectorT<S>> inputs;
  std::vector<VectorT<S>> targets;
};

template <typename S>
struct UnrollOptions {
  const Projection<S>* projection = nullptr;
  double dropout_keep = 1.0;  // < 1 draws masks from rng (train_mode only)
  Rng* rng = nullptr;
  bool train_mode = false;
  bool apply_head = true;           // off for non-top stack layers
  bool feed_outputs_back = false;   // one-to-many: previous output becomes next input
  const VectorT<S>* h0 = nullptr;   // initial-state overrides
  const VectorT<S>* c0 = nullptr;
};

template <class P>
struct Trace {
  using S = typename P::Scalar;
  using Cache = typename CellTraits<P>::Cache;

  Topology topology = Topology::kManyToMany;
  Index T = 0;
  const Projection<S>* projection = nullptr;  // must outlive the trace

  std::vector<Cache> caches;
  std::vector<VectorT<S>> raw_inputs;  // pre-projection, pre-mask inputs used
  std::vector<VectorT<S>> proj_outs;   // projection outputs, when enabled
  std::vector<VectorT<S>> in_masks;    // dropout on the cell-input connection
  std::vector<VectorT<S>> out_masks;   // dropout on the state-to-head connection
  std::vector<VectorT<S>> h;           // state after each step
  std::vector<VectorT<S>> c;           // cell state (LSTM)
  VectorT<S> h_init, c_init;

  std::vector<Index> steps_with_loss;
  std::vector<int> loss_index_of_step;  // -1 where no output is emitted
  std::vector<VectorT<S>> outputs;      // yhat at loss steps
  std::vector<VectorT<S>> head_inputs;  // (possibly dropped) state fed to the head

  bool has_dropout() const { return !in_masks.empty(); }
  bool has_projection() const { return projection != nullptr; }
};

template <class P>
Trace<P> unroll_forward(const P& p, const std::vector<VectorT<typename P::Scalar>>& inputs,
                        Topology topo, const UnrollOptions<typename P::Scalar>& opt = {}) {
  using S = typename P::Scalar;
  using Traits = CellTraits<P>;
  p.validate();

  const Index T = static_cast<Index>(inputs.size());
  if (T < 1) throw ShapeError("unroll_forward: empty input sequence");

  const bool dropout_on = opt.train_mode && opt.dropout_keep < 1.0;
  if (dropout_on && opt.rng == nullptr) {
    throw ConfigError("unroll_forward: dropout requires an rng");
  }
  if (opt.feed_outputs_back) {
    if (topo != Topology::kOneToMany) {
      throw ConfigError("feed_outputs_back applies to one_to_many only");
    }
    if (!opt.apply_head) {
      throw ConfigError("feed_outputs_back requires the output head");
    }
    if (p.input_dim() != p.output_dim()) {
      throw ConfigError("feed_outputs_back needs matching input/output dims");
    }
  }

  if (opt.projection && opt.projection->out_dim() != p.input_dim()) {
    throw ShapeError("unroll_forward: projection output dim " +
                     std::to_string(opt.projection->out_dim()) + " vs cell input dim " +
                     std::to_string(p.input_dim()));
  }
  const Index raw_dim = opt.projection ? opt.projection->in_dim() : p.input_dim();

  Trace<P> trace;
  trace.topology = topo;
  trace.T = T;
  trace.projection = opt.projection;
  trace.steps_with_loss = loss_steps(topo, T);
  trace.loss_index_of_step.assign(static_cast<std::size_t>(T), -1);
  for (std::size_t k = 0; k < trace.steps_with_loss.size(); ++k) {
    trace.loss_index_of_step[static_cast<std::size_t>(trace.steps_with_loss[k])] =
        static_cast<int>(k);
  }

  const Index n = p.hidden_dim();
  CellState<S> state;
  if (opt.h0 != nullptr) {
    state.h = *opt.h0;
  } else if (p.h0.size() > 0) {
    state.h = p.h0;
  } else {
    state.h = VectorT<S>::Zero(n);
  }
  if constexpr (Traits::kHasCellState) {
    if (opt.c0 != nullptr) {
      state.c = *opt.c0;
    } else if constexpr (requires { p.c0; }) {
      state.c = p.c0.size() > 0 ? p.c0 : VectorT<S>::Zero(n);
    } else {
      state.c = VectorT<S>::Zero(n);
    }
  }
  if (state.h.size() != n || (Traits::kHasCellState && state.c.size() != n)) {
    throw ShapeError("unroll_forward: initial state has wrong length");
  }
  trace.h_init = state.h;
  trace.c_init = state.c;

  trace.caches.resize(static_cast<std::size_t>(T));
  trace.raw_inputs.reserve(static_cast<std::size_t>(T));
  trace.h.reserve(static_cast<std::size_t>(T));

  for (Index t = 0; t < T; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    VectorT<S> raw;
    if (opt.feed_outputs_back && t > 0) {
      // Previous prediction becomes the next input, treated as data: no
      // gradient flows back through this edge.
      raw = trace.outputs.back();
    } else {
      raw = inputs[ti];
    }
    if (raw.size() != raw_dim) {
      throw ShapeError("unroll_forward: input at step " + std::to_string(t) + " has length " +
                       std::to_string(raw.size()) + ", expected " + std::to_string(raw_dim));
    }
    trace.raw_inputs.push_back(raw);

    VectorT<S> x = opt.projection ? input_projection(*opt.projection, raw) : raw;
    if (opt.projection) trace.proj_outs.push_back(x);

    if (dropout_on) {
      trace.in_masks.push_back(dropout_mask<S>(x.size(), opt.dropout_keep, *opt.rng));
      x = hadamard(trace.in_masks.back(), x);
    }

    state = Traits::step(p, x, state, trace.caches[ti]);
    trace.h.push_back(state.h);
    if constexpr (Traits::kHasCellState) trace.c.push_back(state.c);

    if (opt.apply_head) {
      VectorT<S> head_in = state.h;
      if (dropout_on) {
        trace.out_masks.push_back(dropout_mask<S>(n, opt.dropout_keep, *opt.rng));
        head_in = hadamard(trace.out_masks.back(), head_in);
      }
      if (trace.loss_index_of_step[ti] >= 0) {
        trace.head_inputs.push_back(head_in);
        trace.outputs.push_back(output_head(p.head, head_in));
      }
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Loss.

// Cross-entropy of a predicted distribution against a (usually one-hot)
// target, with the prediction clamped away from zero so the log is finite.
inline constexpr double kLossClamp = 1e-12;

template <typename S>
S step_loss(const VectorT<S>& yhat, const VectorT<S>& y) {
  if (yhat.size() != y.size()) {
    throw ShapeError("step_loss: " + shape_of(yhat) + " vs " + shape_of(y));
  }
  S total = 0;
  for (Index i = 0; i < y.size(); ++i) {
    if (y[i] != S(0)) {
      total -= y[i] * std::log(std::max(yhat[i], static_cast<S>(kLossClamp)));
    }
  }
  return total;
}

template <class P>
typename P::Scalar sequence_loss(const Trace<P>& trace,
                                 const std::vector<VectorT<typename P::Scalar>>& targets) {
  using S = typename P::Scalar;
  if (targets.size() != trace.outputs.size()) {
    throw ShapeError("sequence_loss: " + std::to_string(targets.size()) + " targets vs " +
                     std::to_string(trace.outputs.size()) + " outputs");
  }
  S total = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    total += step_loss(trace.outputs[k], targets[k]);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Backpropagation through time.

template <typename S>
struct BpttOptions {
  // Extra dL/dh_t injected at every step (length T), used by stacked
  // models to push the upper layer's input gradient into the layer below.
  const std::vector<VectorT<S>>* extra_dh = nullptr;
  bool include_head = true;
};

template <class P>
struct BpttResult {
  using S = typename P::Scalar;

  P grads;
  Projection<S> proj_grads;  // zero-sized unless the trace used a projection
  S loss = 0;

  // Norm of the total gradient flowing into h_t (head + future + injected),
  // index t. For cells with a separate memory lane, c_grad_norms[t] is the
  // norm of the total cell-state gradient at step t.
  std::vector<S> h_grad_norms;
  std::vector<S> c_grad_norms;

  std::vector<VectorT<S>> dx;  // dL / d(raw input at step t)
  VectorT<S> dh0;
  VectorT<S> dc0;

  // Per-step parameter contributions when requested via
  // bptt(..., capture_steps=true); grads equals their exact running sum.
  std::vector<P> step_grads;
};

namespace detail {

// Backward through the head at a loss step: accumulates head parameter
// gradients into sink and returns dL/dh_t for that step's output edge.
template <class P>
VectorT<typename P::Scalar> head_backward_at(
    const Trace<P>& trace, const P& p,
    const std::vector<VectorT<typename P::Scalar>>& targets, std::size_t k, Index t, P* sink) {
  using S = typename P::Scalar;
  const VectorT<S>& yhat = trace.outputs[k];
  const VectorT<S>& y = targets[k];
  VectorT<S> du = head_loss_delta(p.head.activation, yhat, y);
  if (sink != nullptr) {
    sink->head.w_out.noalias() += du * trace.head_inputs[k].transpose();
    sink->head.b_out += du;
  }
  VectorT<S> d_head_in = p.head.w_out.transpose() * du;
  if (!trace.out_masks.empty()) {
    d_head_in = hadamard(trace.out_masks[static_cast<std::size_t>(t)], d_head_in);
  }
  return d_head_in;
}

// Backward through the input path (mask, then projection) for one step.
template <class P>
VectorT<typename P::Scalar> input_backward_at(
    const Trace<P>& trace, const VectorT<typename P::Scalar>& d_cell_in, Index t,
    Projection<typename P::Scalar>* proj_sink) {
  using S = typename P::Scalar;
  const auto ti = static_cast<std::size_t>(t);
  VectorT<S> d = d_cell_in;
  if (!trace.in_masks.empty()) {
    d = hadamard(trace.in_masks[ti], d);
  }
  if (trace.projection != nullptr) {
    d = input_projection_backward(*trace.projection, trace.raw_inputs[ti], trace.proj_outs[ti],
                                  d, proj_sink);
  }
  return d;
}

}  // namespace detail

template <class P>
BpttResult<P> bptt(const P& p, const Trace<P>& trace,
                   const std::vector<VectorT<typename P::Scalar>>& targets,
                   const BpttOptions<typename P::Scalar>& opts = {},
                   bool capture_steps = false) {
  using S = typename P::Scalar;
  using Traits = CellTraits<P>;
  const Index T = trace.T;
  const Index n = p.hidden_dim();

  if (opts.include_head && targets.size() != trace.outputs.size()) {
    throw ShapeError("bptt: " + std::to_string(targets.size()) + " targets vs " +
                     std::to_string(trace.outputs.size()) + " outputs");
  }
  if (opts.extra_dh != nullptr && static_cast<Index>(opts.extra_dh->size()) != T) {
    throw ShapeError("bptt: injected gradients must cover every step");
  }

  BpttResult<P> res;
  res.grads = zero_like(p);
  if (trace.projection != nullptr) {
    res.proj_grads = Projection<S>(trace.projection->out_dim(), trace.projection->in_dim());
  }
  res.loss = opts.include_head ? sequence_loss(trace, targets) : S(0);
  res.h_grad_norms.assign(static_cast<std::size_t>(T), S(0));
  if constexpr (Traits::kHasCellState) {
    res.c_grad_norms.assign(static_cast<std::size_t>(T), S(0));
  }
  res.dx.resize(static_cast<std::size_t>(T));

  P scratch = zero_like(p);
  Projection<S> proj_scratch = res.proj_grads;  // zero copy of the right shape

  VectorT<S> dh_next = VectorT<S>::Zero(n);
  VectorT<S> dc_next;
  if constexpr (Traits::kHasCellState) dc_next = VectorT<S>::Zero(n);

  for (Index t = T - 1; t >= 0; --t) {
    const auto ti = static_cast<std::size_t>(t);
    zero_params(scratch);
    if (trace.projection != nullptr) zero_params(proj_scratch);

    VectorT<S> dh_t = dh_next;
    if (opts.include_head && trace.loss_index_of_step[ti] >= 0) {
      const auto k = static_cast<std::size_t>(trace.loss_index_of_step[ti]);
      dh_t += detail::head_backward_at(trace, p, targets, k, t, &scratch);
    }
    if (opts.extra_dh != nullptr) {
      const VectorT<S>& inj = (*opts.extra_dh)[ti];
      if (inj.size() != 0) {
        if (inj.size() != n) throw ShapeError("bptt: injected gradient has wrong length");
        dh_t += inj;
      }
    }
    res.h_grad_norms[ti] = dh_t.norm();

    StepGradFlow<S> flow = Traits::backward(trace.caches[ti], p, dh_t, dc_next, &scratch);
    if constexpr (Traits::kHasCellState) {
      res.c_grad_norms[ti] = flow.dc_state.norm();
    }

    res.dx[ti] = detail::input_backward_at(trace, flow.dx,
                                           t, trace.projection ? &proj_scratch : nullptr);

    dh_next = std::move(flow.dh_prev);
    if constexpr (Traits::kHasCellState) dc_next = std::move(flow.dc_prev);

    add_in_place(res.grads, scratch);
    if (trace.projection != nullptr) add_in_place(res.proj_grads, proj_scratch);
    if (capture_steps) res.step_grads.push_back(scratch);
  }

  res.dh0 = dh_next;
  if constexpr (Traits::kHasCellState) res.dc0 = dc_next;

  // Trainable initial state: its gradient is the state gradient at t=0,
  // provided the run actually started from the stored h0/c0.
  if (p.h0.size() > 0 && res.grads.h0.size() > 0) res.grads.h0 += res.dh0;
  if constexpr (Traits::kHasCellState) {
    if constexpr (requires { res.grads.c0; }) {
      if (res.grads.c0.size() > 0) res.grads.c0 += res.dc0;
    }
  }
  return res;
}

// Truncated BPTT: the gradient born at each loss-bearing step stops
// propagating after k steps, so that step's loss touches parameters at
// steps t, t-1, ..., t-k+1 only. k <= 0 or k >= T reduces exactly to full
// BPTT and is delegated to it.
template <class P>
BpttResult<P> truncated_bptt(const P& p, const Trace<P>& trace,
                             const std::vector<VectorT<typename P::Scalar>>& targets, Index k,
                             const BpttOptions<typename P::Scalar>& opts = {}) {
  using S = typename P::Scalar;
  using Traits = CellTraits<P>;
  const Index T = trace.T;
  if (k <= 0 || k >= T) {
    return bptt(p, trace, targets, opts);
  }

  const Index n = p.hidden_dim();
  if (opts.include_head && targets.size() != trace.outputs.size()) {
    throw ShapeError("truncated_bptt: targets/outputs mismatch");
  }
  if (opts.extra_dh != nullptr && static_cast<Index>(opts.extra_dh->size()) != T) {
    throw ShapeError("truncated_bptt: injected gradients must cover every step");
  }

  BpttResult<P> res;
  res.grads = zero_like(p);
  if (trace.projection != nullptr) {
    res.proj_grads = Projection<S>(trace.projection->out_dim(), trace.projection->in_dim());
  }
  res.loss = opts.include_head ? sequence_loss(trace, targets) : S(0);
  res.h_grad_norms.assign(static_cast<std::size_t>(T), S(0));
  if constexpr (Traits::kHasCellState) {
    res.c_grad_norms.assign(static_cast<std::size_t>(T), S(0));
  }
  res.dx.resize(static_cast<std::size_t>(T));

  // One gradient stream per loss-bearing step, each propagated on its own
  // so it can be retired after k steps. Cell backward passes are linear
  // in the state gradient, so parameter gradients can use the streams'
  // sum while propagation stays per-stream.
  struct Stream {
    Index born;
    VectorT<S> dh;
    VectorT<S> dc;
  };
  std::vector<Stream> streams;

  P scratch = zero_like(p);
  Projection<S> proj_scratch = res.proj_grads;

  for (Index t = T - 1; t >= 0; --t) {
    const auto ti = static_cast<std::size_t>(t);
    zero_params(scratch);
    if (trace.projection != nullptr) zero_params(proj_scratch);

    VectorT<S> born_dh = VectorT<S>::Zero(n);
    bool born_any = false;
    if (opts.include_head && trace.loss_index_of_step[ti] >= 0) {
      const auto kk = static_cast<std::size_t>(trace.loss_index_of_step[ti]);
      born_dh += detail::head_backward_at(trace, p, targets, kk, t, &scratch);
      born_any = true;
    }
    if (opts.extra_dh != nullptr && (*opts.extra_dh)[ti].size() != 0) {
      born_dh += (*opts.extra_dh)[ti];
      born_any = true;
    }
    if (born_any) {
      Stream s;
      s.born = t;
      s.dh = born_dh;
      if constexpr (Traits::kHasCellState) s.dc = VectorT<S>::Zero(n);
      streams.push_back(std::move(s));
    }

    VectorT<S> dh_total = VectorT<S>::Zero(n);
    VectorT<S> dc_total;
    if constexpr (Traits::kHasCellState) dc_total = VectorT<S>::Zero(n);
    for (const Stream& s : streams) {
      dh_total += s.dh;
      if constexpr (Traits::kHasCellState) dc_total += s.dc;
    }
    res.h_grad_norms[ti] = dh_total.norm();

    StepGradFlow<S> flow = Traits::backward(trace.caches[ti], p, dh_total, dc_total, &scratch);
    if constexpr (Traits::kHasCellState) {
      res.c_grad_norms[ti] = flow.dc_state.norm();
    }
    res.dx[ti] = detail::input_backward_at(trace, flow.dx,
                                           t, trace.projection ? &proj_scratch : nullptr);

    add_in_place(res.grads, scratch);
    if (trace.projection != nullptr) add_in_place(res.proj_grads, proj_scratch);

    // Propagate each stream one step and retire the ones that have now
    // covered k steps.
    std::vector<Stream> next;
    next.reserve(streams.size());
    for (Stream& s : streams) {
      if (s.born - (t - 1) >= k) continue;
      StepGradFlow<S> sf = Traits::backward(trace.caches[ti], p, s.dh, s.dc, nullptr);
      s.dh = std::move(sf.dh_prev);
      if constexpr (Traits::kHasCellState) s.dc = std::move(sf.dc_prev);
      next.push_back(std::move(s));
    }
    streams = std::move(next);
  }

  res.dh0 = VectorT<S>::Zero(n);
  if constexpr (Traits::kHasCellState) res.dc0 = VectorT<S>::Zero(n);
  for (const Stream& s : streams) {
    res.dh0 += s.dh;
    if constexpr (Traits::kHasCellState) res.dc0 += s.dc;
  }
  if (p.h0.size() > 0 && res.grads.h0.size() > 0) res.grads.h0 += res.dh0;
  if constexpr (Traits::kHasCellState) {
    if constexpr (requires { res.grads.c0; }) {
      if (res.grads.c0.size() > 0) res.grads.c0 += res.dc0;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Stacked models. Layer 0 is the bottom; each layer's state sequence is
// the next layer's input sequence (through that layer's input dropout).
// Only the top layer's head is used.

template <class P>
void validate_stack(const std::vector<P>& layers) {
  if (layers.empty()) throw ConfigError("stack: no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].validate();
    if (l > 0 && layers[l].input_dim() != layers[l - 1].hidden_dim()) {
      throw ShapeError("stack: layer " + std::to_string(l) + " input dim " +
                       std::to_string(layers[l].input_dim()) + " vs layer " +
                       std::to_string(l - 1) + " hidden dim " +
                       std::to_string(layers[l - 1].hidden_dim()));
    }
  }
}

template <class P>
std::vector<Trace<P>> stack_forward(const std::vector<P>& layers,
                                    const std::vector<VectorT<typename P::Scalar>>& inputs,
                                    Topology topo,
                                    const UnrollOptions<typename P::Scalar>& opt = {}) {
  validate_stack(layers);
  if (opt.feed_outputs_back && layers.size() > 1) {
    throw ConfigError("feed_outputs_back is not supported for stacked models");
  }
  if ((opt.h0 != nullptr || opt.c0 != nullptr) && layers.size() > 1) {
    throw ConfigError("initial-state overrides apply to single-layer models only");
  }

  std::vector<Trace<P>> traces;
  traces.reserve(layers.size());
  const std::vector<VectorT<typename P::Scalar>>* feed = &inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    UnrollOptions<typename P::Scalar> lopt = opt;
    lopt.apply_head = (l + 1 == layers.size()) && opt.apply_head;
    if (l > 0) {
      lopt.projection = nullptr;  // projection acts on the raw inputs only
      lopt.h0 = nullptr;
      lopt.c0 = nullptr;
    }
    traces.push_back(unroll_forward(layers[l], *feed, topo, lopt));
    feed = &traces.back().h;
  }
  return traces;
}

template <class P>
struct StackBpttResult {
  using S = typename P::Scalar;
  std::vector<P> grads;  // one per layer
  Projection<S> proj_grads;
  S loss = 0;
  std::vector<S> h_grad_norms;  // top layer
  std::vector<VectorT<S>> dx;  // w.r.t. the stack's raw inputs
};

template <class P>
StackBpttResult<P> stack_bptt(const std::vector<P>& layers, const std::vector<Trace<P>>& traces,
                              const std::vector<VectorT<typename P::Scalar>>& targets) {
  using S = typename P::Scalar;
  if (layers.size() != traces.size() || layers.empty()) {
    throw ShapeError("stack_bptt: layer/trace count mismatch");
  }
  StackBpttResult<P> res;
  res.grads.reserve(layers.size());
  for (const P& l : layers) res.grads.push_back(zero_like(l));

  std::vector<VectorT<S>> injected;  // dL/dh_t for the layer below
  for (std::size_t li = layers.size(); li-- > 0;) {
    BpttOptions<S> opts;
    opts.include_head = (li + 1 == layers.size());
    opts.extra_dh = (li + 1 == layers.size()) ? nullptr : &injected;
    BpttResult<P> r = bptt(layers[li], traces[li], targets, opts);
    res.grads[li] = std::move(r.grads);
    if (li + 1 == layers.size()) {
      res.loss = r.loss;
      res.h_grad_norms = std::move(r.h_grad_norms);
    }
    if (li == 0) {
      res.dx = std::move(r.dx);
      res.proj_grads = std::move(r.proj_grads);
    } else {
      injected = std::move(r.dx);  // already adjusted for this layer's input mask
    }
  }
  return res;
}

}  // namespace rnnkit
