#pragma once

#include <cmath>

#include "rnnkit/types.hpp"

namespace rnnkit {

// Dense kernels shared by every cell. Eigen does the arithmetic; these
// wrappers add the shape contracts and the numerically stable nonlinearity
// branches the rest of the library relies on.

template <typename S>
MatrixT<S> matmul(const MatrixT<S>& a, const MatrixT<S>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_of(a) + " * " + shape_of(b));
  }
  MatrixT<S> out = a * b;
  check_finite(out, "matmul");
  return out;
}

template <typename S>
VectorT<S> matmul(const MatrixT<S>& a, const VectorT<S>& x) {
  if (a.cols() != x.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_of(a) + " * " + shape_of(x));
  }
  VectorT<S> out = a * x;
  check_finite(out, "matmul");
  return out;
}

template <typename S>
VectorT<S> hadamard(const VectorT<S>& a, const VectorT<S>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("hadamard: length mismatch " + shape_of(a) + " vs " + shape_of(b));
  }
  return a.cwiseProduct(b);
}

template <typename S>
S sigmoid_scalar(S x) {
  // Split on sign so exp() never overflows; saturates to 0/1 instead.
  if (x >= S(0)) {
    return S(1) / (S(1) + std::exp(-x));
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
VectorT<S> sigmoid(const VectorT<S>& x) {
  return x.unaryExpr([](S v) { return sigmoid_scalar(v); });
}

template <typename S>
VectorT<S> tanh_act(const VectorT<S>& x) {
  return x.array().tanh().matrix();
}

// Probabilities over classes; shift-invariant via max subtraction, so the
// largest exponent is exactly 1 and the sum can never be 0 or overflow.
template <typename S>
VectorT<S> softmax(const VectorT<S>& z) {
  if (z.size() == 0) {
    throw ShapeError("softmax: empty input");
  }
  VectorT<S> e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

// Derivatives in terms of the activation's own output.
template <typename S>
VectorT<S> sigmoid_grad_from_output(const VectorT<S>& s) {
  return (s.array() * (S(1) - s.array())).matrix();
}

template <typename S>
VectorT<S> tanh_grad_from_output(const VectorT<S>& t) {
  return (S(1) - t.array().square()).matrix();
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes z to zero mean / unit variance (population variance, epsilon
// guarded), then applies the learned elementwise affine.
template <typename S>
VectorT<S> layer_norm(const VectorT<S>& z, const VectorT<S>& gain, const VectorT<S>& bias) {
  if (z.size() != gain.size() || z.size() != bias.size()) {
    throw ShapeError("layer_norm: length mismatch " + shape_of(z) + " / " + shape_of(gain) +
                     " / " + shape_of(bias));
  }
  if (z.size() < 1) {
    throw ShapeError("layer_norm: empty input");
  }
  const S mean = z.mean();
  const S var = (z.array() - mean).square().mean();
  const S inv_std = S(1) / std::sqrt(var + S(kLayerNormEps));
  return (((z.array() - mean) * inv_std) * gain.array() + bias.array()).matrix();
}

// Backward of layer_norm. d_out is dL/d(output); returns dL/dz and
// accumulates dL/dgain, dL/dbias into the provided buffers.
template <typename S>
VectorT<S> layer_norm_backward(const VectorT<S>& z, const VectorT<S>& gain,
                               const VectorT<S>& d_out, VectorT<S>& d_gain,
                               VectorT<S>& d_bias) {
  const S mean = z.mean();
  const S var = (z.array() - mean).square().mean();
  const S inv_std = S(1) / std::sqrt(var + S(kLayerNormEps));
  VectorT<S> zhat = ((z.array() - mean) * inv_std).matrix();

  d_gain.array() += d_out.array() * zhat.array();
  d_bias += d_out;

  VectorT<S> d_zhat = (d_out.array() * gain.array()).matrix();
  const S m1 = d_zhat.mean();
  const S m2 = (d_zhat.array() * zhat.array()).mean();
  return (inv_std * (d_zhat.array() - m1 - zhat.array() * m2)).matrix();
}

}  // namespace rnnkit
