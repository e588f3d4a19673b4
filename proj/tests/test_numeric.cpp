#include <gtest/gtest.h>

#include <cmath>

#include "amseg/gradcheck.hpp"
#include "amseg/layers.hpp"
#include "amseg/selftest.hpp"
#include "amseg/tensor.hpp"

using namespace amseg;

namespace {

Matrix triple_loop(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      for (Eigen::Index k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
    }
  }
  return out;
}

}  // namespace

TEST(Matmul, IdentityAndDot) {
  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  EXPECT_EQ(matmul(Matrix::Identity(2, 2), m), m);
  Matrix row(1, 2);
  row << 1, 2;
  Matrix col(2, 1);
  col << 3, 4;
  EXPECT_DOUBLE_EQ(matmul(row, col)(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(1);
  const Matrix a = random_normal(3, 4, rng);
  const Matrix b = random_normal(4, 2, rng);
  const Matrix ref = triple_loop(a, b);
  const Matrix got = matmul(a, b);
  ASSERT_EQ(got.rows(), 3);
  ASSERT_EQ(got.cols(), 2);
  for (Eigen::Index i = 0; i < ref.size(); ++i) EXPECT_NEAR(got.data()[i], ref.data()[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("2x3"), std::string::npos) << what;
  }
}

TEST(Matmul, Associativity) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_normal(3, 5, rng);
    const Matrix b = random_normal(5, 4, rng);
    const Matrix c = random_normal(4, 2, rng);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    EXPECT_LE((left - right).norm() / left.norm(), 1e-6);
  }
}

TEST(Elementwise, Activations) {
  Matrix zero = Matrix::Zero(1, 1);
  EXPECT_DOUBLE_EQ(elementwise(zero, Activation::Sigmoid)(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(elementwise(zero, Activation::Tanh)(0, 0), 0.0);
  Matrix m(1, 2);
  m << -2.0, 3.0;
  const Matrix relu = elementwise(m, Activation::Relu);
  EXPECT_DOUBLE_EQ(relu(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(relu(0, 1), 3.0);
}

TEST(Elementwise, SigmoidSaturationMatchesHighPrecision) {
  Matrix m(1, 4);
  m << 50.0, -50.0, 800.0, -800.0;
  const Matrix s = elementwise(m, Activation::Sigmoid);
  for (int k = 0; k < 4; ++k) {
    const long double x = m(0, k);
    const long double ref = 1.0L / (1.0L + std::exp(-x));
    EXPECT_TRUE(std::isfinite(s(0, k)));
    EXPECT_NEAR(s(0, k), static_cast<double>(ref), 1e-12);
  }
  EXPECT_NEAR(s(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(s(0, 1), 0.0, 1e-12);
}

TEST(SoftmaxRows, TrivialCases) {
  Matrix zeros = Matrix::Zero(1, 3);
  const Matrix u = softmax_rows(zeros);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(u(0, k), 1.0 / 3.0, 1e-15);
  Matrix big(1, 2);
  big << 1000.0, 1000.0;
  const Matrix h = softmax_rows(big);
  EXPECT_DOUBLE_EQ(h(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(h(0, 1), 0.5);
}

TEST(SoftmaxRows, MatchesExtendedPrecision) {
  Matrix row(1, 3);
  row << 1.0, 2.0, 3.0;
  const Matrix s = softmax_rows(row);
  const long double denom = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(s(0, k), static_cast<double>(std::exp(static_cast<long double>(k + 1)) / denom), 1e-15);
  }
}

TEST(SoftmaxRows, RowsAreDistributions) {
  Rng rng(3);
  const Matrix m = random_normal(50, 7, rng, 30.0);
  const Matrix s = softmax_rows(m);
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-9);
    EXPECT_GE(s.row(r).minCoeff(), 0.0);
  }
}

// Linear map with unit loss: central differences are exact up to rounding.
TEST(GradCheck, LinearLayerIsExact) {
  Rng rng(4);
  Projection layer("linear", 4, 3, rng);
  GradCheckOptions opts;
  opts.unit_projection = true;
  const GradCheckReport r = grad_check(layer, random_batch({3, 2}, 4, rng), opts);
  EXPECT_LT(r.max_relative_error, 1e-10);
  EXPECT_EQ(r.entries_checked, static_cast<std::size_t>(4 * 3 + 3 + 2 * 3 * 4));
}

// A single-token BiLSTM sequence is one cell step in each direction.
TEST(GradCheck, LstmCellExample) {
  Rng rng(1);
  BiLstm layer("cell", 4, 3, rng);
  const GradCheckReport r = grad_check(layer, random_batch({1}, 4, rng));
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_entry;
}

TEST(GradCheck, MultiHeadAttentionExample) {
  Rng rng(1);
  MultiHeadSelfAttention layer("mha", 6, choose_heads(6), rng);
  const GradCheckReport r = grad_check(layer, random_batch({3, 3}, 6, rng));
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_entry;
}

TEST(GradCheck, EpsilonContract) {
  Rng rng(5);
  Projection layer("p", 2, 2, rng);
  const BatchTensor x = random_batch({2}, 2, rng);
  GradCheckOptions opts;
  opts.epsilon = 0.0;
  EXPECT_THROW(grad_check(layer, x, opts), ContractError);
  opts.epsilon = 0.02;
  EXPECT_THROW(grad_check(layer, x, opts), ContractError);
}

TEST(GradCheck, NonFiniteParameterIsNamed) {
  Rng rng(6);
  Projection layer("p", 2, 2, rng);
  layer.W.value(0, 0) = std::nan("");
  try {
    grad_check(layer, random_batch({2}, 2, rng));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("p.W"), std::string::npos) << e.what();
  }
}

TEST(GradCheck, DetectsPerturbedBackward) {
  Rng rng(7);
  PerturbedBackward<Projection> broken{Projection("broken", 4, 3, rng)};
  const GradCheckReport r = grad_check(broken, random_batch({3, 2}, 4, rng));
  EXPECT_GT(r.max_relative_error, 1e-3);
}

// Zeroing grads then running backward twice doubles the accumulated grads.
TEST(Backward, TwiceDoublesGradients) {
  Rng rng(8);
  BiLstm layer("bilstm", 3, 4, rng);
  const BatchTensor x = random_batch({4, 2}, 3, rng);
  BiLstm::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  BatchTensor dy = y.like(y.features());
  dy.values() = random_normal(y.values().rows(), y.values().cols(), rng);
  dy.zero_padding();
  for (Parameter* p : layer.parameters()) p->zero_grad();
  layer.backward(cache, dy);
  std::vector<Matrix> once;
  for (Parameter* p : layer.parameters()) once.push_back(p->grad);
  layer.backward(cache, dy);
  const ParameterRefs params = layer.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) EXPECT_EQ(params[k]->grad, Matrix(2.0 * once[k]));
}

TEST(BatchTensor, PaddingAndMask) {
  std::vector<Matrix> seqs = {Matrix::Ones(3, 2), Matrix::Ones(1, 2)};
  const BatchTensor x = BatchTensor::from_sequences(seqs);
  EXPECT_EQ(x.batch(), 2);
  EXPECT_EQ(x.time(), 3);
  EXPECT_EQ(x.length(0), 3);
  EXPECT_EQ(x.length(1), 1);
  EXPECT_EQ(x.valid_count(), 4);
  EXPECT_TRUE(x.token(1, 2).isZero());
  EXPECT_NO_THROW(x.require_prefix_mask());
  BatchTensor gap = x;
  gap.set_valid(0, 1, false);
  EXPECT_THROW(gap.require_prefix_mask(), ContractError);
}

TEST(Init, GlorotBoundsAndDeterminism) {
  Rng a(9);
  Rng b(9);
  const Matrix w = glorot_uniform(30, 20, a);
  EXPECT_EQ(w, glorot_uniform(30, 20, b));
  EXPECT_LE(w.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 50.0));
}
