#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "rnnkit/sequence.hpp"

namespace rnnkit {

// Gradient verification against central finite differences, per-step
// gradient-flow measurement, and a spectral-radius estimate for the
// recurrent weight matrix.

inline constexpr double kFdEpsilon = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-6;

// Resolution limit of the central-difference oracle itself: loss values
// carry ~|L|*eps_machine of roundoff, which the 2*eps divide turns into
// ~1e-10 of absolute noise on each estimate. Differences below this floor
// are scored by absolute size, rescaled to land under the tolerance; the
// relative form would otherwise reject gradient entries whose true
// magnitude sits under the noise.
inline constexpr double kFdNoiseFloor = 1e-9;

// Relative error with an absolute floor so near-zero pairs compare sanely.
template <typename S>
S rel_error(S a, S b) {
  const S denom = std::max({std::abs(a), std::abs(b), static_cast<S>(1e-8)});
  return std::abs(a - b) / denom;
}

// Central-difference gradient of `loss` with respect to every entry
// reachable through `params`. The callable must re-run the full forward
// pass using the (temporarily perturbed) parameter storage.
template <typename S, class LossFn>
std::vector<VectorT<S>> finite_diff(std::vector<TensorView<S>> params, LossFn&& loss,
                                    S eps = static_cast<S>(kFdEpsilon)) {
  std::vector<VectorT<S>> out;
  out.reserve(params.size());
  for (auto& v : params) {
    VectorT<S> g(v.size());
    for (Index i = 0; i < v.size(); ++i) {
      const S saved = v.data[i];
      v.data[i] = saved + eps;
      const S up = loss();
      v.data[i] = saved - eps;
      const S down = loss();
      v.data[i] = saved;
      g[i] = (up - down) / (S(2) * eps);
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <typename S>
struct GradCheckEntry {
  std::string name;
  S max_rel_error = 0;
  Index worst_index = 0;
  S analytic_at_worst = 0;
  S numeric_at_worst = 0;
};

template <typename S>
struct GradCheckReport {
  std::vector<GradCheckEntry<S>> entries;
  S max_rel_error = 0;

  bool pass(S tol = static_cast<S>(kGradCheckTolerance)) const { return max_rel_error <= tol; }
};

// Entry-by-entry comparison of analytic gradients against a reference
// (normally the finite-difference result), reported per tensor.
template <typename S>
GradCheckReport<S> compare_to_reference(std::vector<TensorView<const S>> analytic,
                                        const std::vector<VectorT<S>>& reference) {
  if (analytic.size() != reference.size()) {
    throw ShapeError("compare_to_reference: tensor count mismatch");
  }
  GradCheckReport<S> report;
  report.entries.reserve(analytic.size());
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const auto& v = analytic[k];
    if (v.size() != reference[k].size()) {
      throw ShapeError("compare_to_reference: size mismatch at " + v.name);
    }
    GradCheckEntry<S> e;
    e.name = v.name;
    for (Index i = 0; i < v.size(); ++i) {
      const S diff = std::abs(v.data[i] - reference[k][i]);
      const S r = diff < static_cast<S>(kFdNoiseFloor)
                      ? diff * static_cast<S>(kGradCheckTolerance / kFdNoiseFloor)
                      : rel_error(v.data[i], reference[k][i]);
      if (r >= e.max_rel_error) {
        e.max_rel_error = r;
        e.worst_index = i;
        e.analytic_at_worst = v.data[i];
        e.numeric_at_worst = reference[k][i];
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  return report;
}

// End-to-end check: finite differences over the parameter storage vs the
// caller's analytic gradients.
template <typename S, class LossFn>
GradCheckReport<S> grad_check(std::vector<TensorView<S>> params,
                              std::vector<TensorView<const S>> analytic, LossFn&& loss,
                              S eps = static_cast<S>(kFdEpsilon)) {
  auto reference = finite_diff(std::move(params), loss, eps);
  return compare_to_reference(std::move(analytic), reference);
}

// Analytic gradients + finite differences for one model/sample pair,
// including projection parameters when present. This is the entrance the
// CLI and the acceptance checks use.
template <class P>
GradCheckReport<typename P::Scalar> grad_check_model(
    P& params, Projection<typename P::Scalar>* proj,
    const std::vector<VectorT<typename P::Scalar>>& inputs,
    const std::vector<VectorT<typename P::Scalar>>& targets, Topology topo,
    typename P::Scalar eps = static_cast<typename P::Scalar>(kFdEpsilon)) {
  using S = typename P::Scalar;

  UnrollOptions<S> uopt;
  uopt.projection = proj;
  auto forward_loss = [&]() -> S {
    Trace<P> tr = unroll_forward(params, inputs, topo, uopt);
    return sequence_loss(tr, targets);
  };

  Trace<P> tr = unroll_forward(params, inputs, topo, uopt);
  BpttResult<P> back = bptt(params, tr, targets);

  std::vector<TensorView<S>> param_views = params.views();
  std::vector<TensorView<const S>> analytic_views =
      static_cast<const P&>(back.grads).views();
  if (proj != nullptr) {
    for (auto v : proj->views()) param_views.push_back(v);
    for (auto v : static_cast<const Projection<S>&>(back.proj_grads).views()) {
      analytic_views.push_back(v);
    }
  }
  return grad_check(std::move(param_views), std::move(analytic_views), forward_loss, eps);
}

// ---------------------------------------------------------------------------
// Gradient flow through time.

// Per-step norms of the gradient on the cell's memory lane: the cell
// state for LSTM, the hidden state otherwise. norms[t] is the gradient
// arriving at step t; a healthy long-range learner keeps norms[0]
// comparable to norms[T-1].
template <typename S>
struct FlowTrace {
  CellKind kind = CellKind::kRnn;
  std::vector<S> norms;

  S first() const { return norms.empty() ? S(0) : norms.front(); }
  S last() const { return norms.empty() ? S(0) : norms.back(); }
  // Ratio of the earliest step's gradient to the latest step's: << 1
  // means the signal vanishes on its way back through time.
  S decay_ratio() const {
    if (norms.empty() || norms.back() == S(0)) return S(0);
    return norms.front() / norms.back();
  }
};

template <class P>
FlowTrace<typename P::Scalar> gradient_flow(
    const P& p, const std::vector<VectorT<typename P::Scalar>>& inputs,
    const std::vector<VectorT<typename P::Scalar>>& targets, Topology topo,
    const Projection<typename P::Scalar>* proj = nullptr) {
  using S = typename P::Scalar;
  UnrollOptions<S> uopt;
  uopt.projection = proj;
  Trace<P> tr = unroll_forward(p, inputs, topo, uopt);
  BpttResult<P> back = bptt(p, tr, targets);

  FlowTrace<S> flow;
  flow.kind = CellTraits<P>::kKind;
  flow.norms = CellTraits<P>::kHasCellState ? back.c_grad_norms : back.h_grad_norms;
  return flow;
}

// ---------------------------------------------------------------------------
// Spectral radius of the recurrent weight matrix, the first-order
// predictor of vanishing (< 1) vs exploding (> 1) state gradients.

// Power iteration from an all-ones start; the growth factor is averaged
// geometrically over the tail iterations so complex-pair dominated
// matrices (where single-step growth oscillates) still converge.
template <typename S>
S spectral_radius(const MatrixT<S>& w, int iters = 256) {
  if (w.rows() != w.cols()) {
    throw ShapeError("spectral_radius: matrix must be square, got " + shape_of(w));
  }
  if (w.size() == 0) return S(0);
  VectorT<S> v = VectorT<S>::Ones(w.rows());
  v /= v.norm();

  const int tail_start = iters / 2;
  S log_sum = 0;
  int tail_count = 0;
  for (int it = 0; it < iters; ++it) {
    VectorT<S> next = w * v;
    const S growth = next.norm();
    if (growth == S(0) || !std::isfinite(growth)) {
      return S(0);
    }
    v = next / growth;
    if (it >= tail_start) {
      log_sum += std::log(growth);
      ++tail_count;
    }
  }
  return std::exp(log_sum / static_cast<S>(tail_count));
}

// ---------------------------------------------------------------------------
// CSV output. Floats are printed with enough digits to round-trip.

inline std::string csv_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

template <typename S>
void write_flow_csv(std::ostream& os, const FlowTrace<S>& flow) {
  os << "t,grad_norm\n";
  for (std::size_t t = 0; t < flow.norms.size(); ++t) {
    os << t << "," << csv_number(static_cast<double>(flow.norms[t])) << "\n";
  }
}

template <typename S>
void write_gradcheck_csv(std::ostream& os, const GradCheckReport<S>& report) {
  os << "param_name,rel_error\n";
  for (const auto& e : report.entries) {
    os << e.name << "," << csv_number(static_cast<double>(e.max_rel_error)) << "\n";
  }
}

}  // namespace rnnkit
