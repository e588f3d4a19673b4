#pragma once

// Dense numeric core: matrix aliases, activations, row softmax, parameters,
// and the padded batch tensor every layer consumes.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "amseg/error.hpp"

namespace amseg {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;

using Rng = std::mt19937_64;

std::string shape_string(Eigen::Index rows, Eigen::Index cols);

template <typename Derived>
std::string shape_of(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

// Checked product; throws DimensionError naming both shapes.
template <typename A, typename B>
auto matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  using Scalar = typename A::Scalar;
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_of(a) + " by " + shape_of(b));
  }
  MatrixX<Scalar> out = a * b;
  return out;
}

enum class Activation { Sigmoid, Tanh, Relu };

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  // Branching keeps exp() argument non-positive so neither side overflows.
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
auto elementwise(const Eigen::MatrixBase<Derived>& a, Activation fn) {
  using Scalar = typename Derived::Scalar;
  switch (fn) {
    case Activation::Sigmoid:
      return MatrixX<Scalar>(a.unaryExpr([](Scalar x) { return sigmoid(x); }));
    case Activation::Tanh:
      return MatrixX<Scalar>(a.array().tanh().matrix());
    case Activation::Relu:
      return MatrixX<Scalar>(a.cwiseMax(Scalar(0)));
  }
  return MatrixX<Scalar>(a);
}

// Row-wise softmax with max subtraction.
template <typename Derived>
auto softmax_rows(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const Scalar peak = a.row(r).maxCoeff();
    out.row(r) = (a.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// Backward of a row softmax: given probabilities P and dL/dP, returns dL/dlogits.
template <typename DP, typename DG>
auto softmax_rows_backward(const Eigen::MatrixBase<DP>& probs, const Eigen::MatrixBase<DG>& grad) {
  using Scalar = typename DP::Scalar;
  const auto dots = (probs.array() * grad.array()).rowwise().sum().eval();
  MatrixX<Scalar> out = (probs.array() * (grad.array().colwise() - dots)).matrix();
  return out;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

void require_finite(const Matrix& m, const std::string& what);

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string param_name, Matrix init)
      : name(std::move(param_name)), value(std::move(init)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

using ParameterRefs = std::vector<Parameter*>;

// Padded batch: row (b * time + t) of `values` holds the features of token t
// of sequence b. Valid tokens form a prefix of each sequence; padding rows are
// zero and mask == 0.
class BatchTensor {
 public:
  BatchTensor() = default;
  BatchTensor(Eigen::Index batch, Eigen::Index time, Eigen::Index features);

  // Pads each (length_i x features) matrix to the longest length.
  static BatchTensor from_sequences(std::span<const Matrix> sequences);

  Eigen::Index batch() const { return batch_; }
  Eigen::Index time() const { return time_; }
  Eigen::Index features() const { return values_.cols(); }

  Matrix& values() { return values_; }
  const Matrix& values() const { return values_; }

  auto sequence(Eigen::Index b) { return values_.middleRows(b * time_, time_); }
  auto sequence(Eigen::Index b) const { return values_.middleRows(b * time_, time_); }
  auto token(Eigen::Index b, Eigen::Index t) { return values_.row(b * time_ + t); }
  auto token(Eigen::Index b, Eigen::Index t) const { return values_.row(b * time_ + t); }

  bool valid(Eigen::Index b, Eigen::Index t) const { return mask_[static_cast<std::size_t>(b * time_ + t)] != 0; }
  void set_valid(Eigen::Index b, Eigen::Index t, bool v) { mask_[static_cast<std::size_t>(b * time_ + t)] = v ? 1 : 0; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }

  // Number of valid tokens in sequence b.
  Eigen::Index length(Eigen::Index b) const;
  Eigen::Index valid_count() const;

  // Throws ContractError unless every sequence's valid tokens form a prefix.
  void require_prefix_mask() const;

  // Same batch/time/mask with a different feature width, zero-filled.
  BatchTensor like(Eigen::Index features) const;

  // Zeroes feature rows at padded positions.
  void zero_padding();

 private:
  Eigen::Index batch_ = 0;
  Eigen::Index time_ = 0;
  Matrix values_;
  std::vector<std::uint8_t> mask_;
};

Matrix glorot_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng);
Matrix random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0);

}  // namespace amseg
