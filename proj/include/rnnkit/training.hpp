#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rnnkit/cells.hpp"
#include "rnnkit/rng.hpp"

namespace rnnkit {

// Parameter initialization, gradient clipping, the three update rules, and
// the non-recurrent regularizers (input projection, dropout). Everything
// operates on TensorView lists so any mix of parameter structs can share
// one optimizer invocation.

enum class OptimizerKind { kSgd, kRmsprop, kAdam };
enum class ClipMode { kGlobalNorm, kPerTensorNorm };
enum class InitScheme { kGlorot, kUniform, kNormal };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double rho = 0.9;  // rmsprop decay
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct InitConfig {
  InitScheme scheme = InitScheme::kGlorot;
  double scale = 0.1;       // half-width / stddev for uniform / normal
  double forget_bias = 1.0; // keeps the memory path open early in training
};

// ---------------------------------------------------------------------------
// Initialization. Weight matrices draw from the chosen scheme in view
// order (row-major within each tensor); biases start at zero except the
// forget-gate bias; layer-norm gains start at one.

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

template <typename S>
void init_tensor_views(std::vector<TensorView<S>> views, const InitConfig& cfg, Rng& rng) {
  for (auto& v : views) {
    const bool is_weight = detail::ends_with(v.name, ".wx") || detail::ends_with(v.name, ".wh") ||
                           v.name == "w_out" || v.name == "proj.w";
    if (is_weight) {
      double lo = -cfg.scale, hi = cfg.scale;
      if (cfg.scheme == InitScheme::kGlorot) {
        const double limit = std::sqrt(6.0 / static_cast<double>(v.rows + v.cols));
        lo = -limit;
        hi = limit;
      }
      for (Index i = 0; i < v.size(); ++i) {
        v.data[i] = (cfg.scheme == InitScheme::kNormal)
                        ? static_cast<S>(rng.normal() * cfg.scale)
                        : static_cast<S>(rng.uniform(lo, hi));
      }
    } else if (detail::ends_with(v.name, ".ln_gain")) {
      for (Index i = 0; i < v.size(); ++i) v.data[i] = S(1);
    } else if (v.name == "forget.b") {
      for (Index i = 0; i < v.size(); ++i) v.data[i] = static_cast<S>(cfg.forget_bias);
    } else {
      for (Index i = 0; i < v.size(); ++i) v.data[i] = S(0);
    }
  }
}

template <class P>
void init_params(P& p, const InitConfig& cfg, Rng& rng) {
  init_tensor_views(p.views(), cfg, rng);
}

// ---------------------------------------------------------------------------
// Gradient clipping.

template <typename S>
struct ClipResult {
  S norm_before = 0;
  bool clipped = false;
};

// threshold <= 0 disables rescaling but still reports the norm.
template <typename S>
ClipResult<S> clip_gradients(std::vector<TensorView<S>> grads, S threshold,
                             ClipMode mode = ClipMode::kGlobalNorm) {
  ClipResult<S> res;
  res.norm_before = global_norm(grads);
  if (threshold <= S(0)) return res;
  if (mode == ClipMode::kGlobalNorm) {
    if (res.norm_before > threshold) {
      const S scale = threshold / res.norm_before;
      for (auto& v : grads) {
        Eigen::Map<VectorT<S>>(v.data, v.size()) *= scale;
      }
      res.clipped = true;
    }
    return res;
  }
  for (auto& v : grads) {
    S sq = 0;
    for (Index i = 0; i < v.size(); ++i) sq += v.data[i] * v.data[i];
    const S norm = std::sqrt(sq);
    if (norm > threshold) {
      Eigen::Map<VectorT<S>>(v.data, v.size()) *= threshold / norm;
      res.clipped = true;
    }
  }
  return res;
}

template <class P>
ClipResult<typename P::Scalar> clip_gradients(P& grads, typename P::Scalar threshold,
                                              ClipMode mode = ClipMode::kGlobalNorm) {
  return clip_gradients(grads.views(), threshold, mode);
}

// ---------------------------------------------------------------------------
// Update rules. Moment buffers are flat per-tensor vectors aligned with
// the parameter view order; they are allocated on first use.

template <typename S>
struct OptimizerStateT {
  std::vector<VectorT<S>> m;  // first moments (adam)
  std::vector<VectorT<S>> v;  // second moments (adam, rmsprop)
  std::uint64_t t = 0;        // completed adam steps
};

using OptimizerState = OptimizerStateT<double>;

namespace detail {

template <typename S>
void ensure_moments(std::vector<VectorT<S>>& buf, const std::vector<TensorView<const S>>& grads) {
  if (buf.empty()) {
    buf.reserve(grads.size());
    for (const auto& g : grads) buf.push_back(VectorT<S>::Zero(g.size()));
    return;
  }
  if (buf.size() != grads.size()) {
    throw ShapeError("optimizer state: tensor count mismatch");
  }
  for (std::size_t i = 0; i < buf.size(); ++i) {
    if (buf[i].size() != grads[i].size()) {
      throw ShapeError("optimizer state: tensor size mismatch at " + grads[i].name);
    }
  }
}

template <typename S>
void check_update_shapes(const std::vector<TensorView<S>>& params,
                         const std::vector<TensorView<const S>>& grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer: params/grads tensor count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) {
      throw ShapeError("optimizer: size mismatch at " + params[i].name);
    }
  }
}

}  // namespace detail

template <typename S>
void sgd_step(std::vector<TensorView<S>> params, std::vector<TensorView<const S>> grads,
              const OptimizerConfig& cfg) {
  detail::check_update_shapes(params, grads);
  const S lr = static_cast<S>(cfg.lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Eigen::Map<VectorT<S>>(params[i].data, params[i].size()) -=
        lr * Eigen::Map<const VectorT<S>>(grads[i].data, grads[i].size());
  }
}

template <typename S>
void rmsprop_step(std::vector<TensorView<S>> params, std::vector<TensorView<const S>> grads,
                  OptimizerStateT<S>& state, const OptimizerConfig& cfg) {
  detail::check_update_shapes(params, grads);
  detail::ensure_moments(state.v, grads);
  const S lr = static_cast<S>(cfg.lr);
  const S rho = static_cast<S>(cfg.rho);
  const S eps = static_cast<S>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = Eigen::Map<const VectorT<S>>(grads[i].data, grads[i].size());
    state.v[i] = (rho * state.v[i].array() + (S(1) - rho) * g.array().square()).matrix();
    Eigen::Map<VectorT<S>>(params[i].data, params[i].size()).array() -=
        lr * g.array() / (state.v[i].array().sqrt() + eps);
  }
}

template <typename S>
void adam_step(std::vector<TensorView<S>> params, std::vector<TensorView<const S>> grads,
               OptimizerStateT<S>& state, const OptimizerConfig& cfg) {
  detail::check_update_shapes(params, grads);
  detail::ensure_moments(state.m, grads);
  detail::ensure_moments(state.v, grads);
  state.t += 1;
  const S lr = static_cast<S>(cfg.lr);
  const S b1 = static_cast<S>(cfg.beta1);
  const S b2 = static_cast<S>(cfg.beta2);
  const S eps = static_cast<S>(cfg.eps);
  const S corr1 = S(1) - std::pow(b1, static_cast<S>(state.t));
  const S corr2 = S(1) - std::pow(b2, static_cast<S>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = Eigen::Map<const VectorT<S>>(grads[i].data, grads[i].size());
    state.m[i] = (b1 * state.m[i].array() + (S(1) - b1) * g.array()).matrix();
    state.v[i] = (b2 * state.v[i].array() + (S(1) - b2) * g.array().square()).matrix();
    Eigen::Map<VectorT<S>>(params[i].data, params[i].size()).array() -=
        lr * (state.m[i].array() / corr1) / ((state.v[i].array() / corr2).sqrt() + eps);
  }
}

template <typename S>
void optimizer_step(std::vector<TensorView<S>> params, std::vector<TensorView<const S>> grads,
                    OptimizerStateT<S>& state, const OptimizerConfig& cfg) {
  switch (cfg.kind) {
    case OptimizerKind::kSgd: sgd_step(std::move(params), std::move(grads), cfg); return;
    case OptimizerKind::kRmsprop:
      rmsprop_step(std::move(params), std::move(grads), state, cfg);
      return;
    case OptimizerKind::kAdam: adam_step(std::move(params), std::move(grads), state, cfg); return;
  }
  throw ConfigError("optimizer_step: unknown optimizer");
}

template <class P>
void optimizer_step(P& params, const P& grads, OptimizerStateT<typename P::Scalar>& state,
                    const OptimizerConfig& cfg) {
  optimizer_step(params.views(), grads.views(), state, cfg);
}

// ---------------------------------------------------------------------------
// Input projection: a learned affine + tanh applied to every input before
// the recurrent cell sees it.

template <typename S>
struct Projection {
  using Scalar = S;

  MatrixT<S> w;  // P x M
  VectorT<S> b;  // P

  Projection() = default;
  Projection(Index out, Index in) : w(MatrixT<S>::Zero(out, in)), b(VectorT<S>::Zero(out)) {}

  Index in_dim() const { return w.cols(); }
  Index out_dim() const { return w.rows(); }
  bool enabled() const { return w.size() > 0; }

  template <class Self, class F>
  static void enumerate(Self& self, F&& f) {
    f(std::string("proj.w"), self.w);
    f(std::string("proj.b"), self.b);
  }

  std::vector<TensorView<S>> views() {
    return detail::collect_views<S, Projection<S>, Projection<S>>(*this);
  }
  std::vector<TensorView<const S>> views() const {
    return detail::collect_views<const S, const Projection<S>, Projection<S>>(*this);
  }
};

template <typename S>
VectorT<S> input_projection(const Projection<S>& pr, const VectorT<S>& x) {
  return tanh_act(VectorT<S>(matmul(pr.w, x) + pr.b));
}

// out must be the forward result for this x. Returns dL/dx.
template <typename S>
VectorT<S> input_projection_backward(const Projection<S>& pr, const VectorT<S>& x,
                                     const VectorT<S>& out, const VectorT<S>& d_out,
                                     Projection<S>* grads) {
  VectorT<S> d_pre = hadamard(d_out, tanh_grad_from_output(out));
  if (grads != nullptr) {
    grads->w.noalias() += d_pre * x.transpose();
    grads->b += d_pre;
  }
  return pr.w.transpose() * d_pre;
}

// ---------------------------------------------------------------------------
// Inverted dropout. Masks apply only to non-recurrent connections (cell
// inputs and cell outputs on their way to the head or the next layer),
// never to the state carried between timesteps.

template <typename S>
VectorT<S> dropout_mask(Index n, double keep_prob, Rng& rng) {
  if (!(keep_prob > 0.0) || keep_prob > 1.0) {
    throw ConfigError("dropout: keep probability must be in (0, 1]");
  }
  VectorT<S> mask(n);
  if (keep_prob >= 1.0) {
    mask.setOnes();
    return mask;
  }
  const S inv = static_cast<S>(1.0 / keep_prob);
  for (Index i = 0; i < n; ++i) {
    mask[i] = (rng.uniform() < keep_prob) ? inv : S(0);
  }
  return mask;
}

// Sequence losses are compared across batches by dividing by the longest
// sequence length in the batch.
inline double normalize_loss(double total_loss, Index max_len) {
  return total_loss / static_cast<double>(std::max<Index>(Index(1), max_len));
}

}  // namespace rnnkit
