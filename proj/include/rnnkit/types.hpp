#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rnnkit {

// Dense storage is row-major so that serialized tensors read in the
// natural (row, col) order. Vectors are plain column vectors.
template <typename S>
using MatrixT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VectorT = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Index = Eigen::Index;

// Dimension mismatch between operands; message names both shapes.
class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// File read/write failure or malformed on-disk data.
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf where a finite value is required.
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

#ifdef RNNKIT_CHECKED
inline constexpr bool kChecked = true;
#else
inline constexpr bool kChecked = false;
#endif

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <class Derived>
std::string shape_of(const Eigen::MatrixBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

template <class Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) {
    throw NumericError(std::string(what) + ": non-finite entries");
  }
}

// Enabled only in checked builds (RNNKIT_CHECKED).
template <class Derived>
void check_finite([[maybe_unused]] const Eigen::MatrixBase<Derived>& m,
                  [[maybe_unused]] const char* what) {
  if constexpr (kChecked) {
    require_finite(m, what);
  }
}

// A named window onto one parameter tensor's storage. Parameter structs
// enumerate their tensors as views in a fixed declared order; optimizers,
// clipping, finite differences, and checkpointing all walk that order.
template <typename S>
struct TensorView {
  std::string name;
  S* data;
  Index rows;
  Index cols;

  Index size() const { return rows * cols; }
};

template <typename S>
using ConstTensorView = TensorView<const S>;

template <typename S>
S global_norm(const std::vector<TensorView<S>>& views) {
  using Real = std::remove_const_t<S>;
  Real sq = 0;
  for (const auto& v : views) {
    for (Index i = 0; i < v.size(); ++i) sq += v.data[i] * v.data[i];
  }
  return std::sqrt(sq);
}

}  // namespace rnnkit
