#include <gtest/gtest.h>

#include <cmath>

#include "amseg/layers.hpp"
#include "amseg/selftest.hpp"

using namespace amseg;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Gate-by-gate scalar LSTM step written directly from the cell equations.
void reference_step(const LstmCell& cell, const std::vector<double>& x, std::vector<double>& h,
                    std::vector<double>& c) {
  const auto n = static_cast<std::size_t>(cell.hidden());
  const auto in = static_cast<std::size_t>(cell.input_dim());
  auto pre = [&](int gate, std::size_t j) {
    const auto col = static_cast<Eigen::Index>(static_cast<std::size_t>(gate) * n + j);
    double s = cell.b.value(0, col);
    for (std::size_t k = 0; k < in; ++k) s += x[k] * cell.W.value(static_cast<Eigen::Index>(k), col);
    for (std::size_t k = 0; k < n; ++k) s += h[k] * cell.U.value(static_cast<Eigen::Index>(k), col);
    return s;
  };
  std::vector<double> h_next(n);
  std::vector<double> c_next(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double i = sig(pre(0, j));
    const double f = sig(pre(1, j));
    const double g = std::tanh(pre(2, j));
    const double o = sig(pre(3, j));
    c_next[j] = f * c[j] + i * g;
    h_next[j] = o * std::tanh(c_next[j]);
  }
  h = h_next;
  c = c_next;
}

std::vector<double> as_vector(const auto& row) { return std::vector<double>(row.data(), row.data() + row.size()); }

void zero_parameters(auto& layer) {
  for (Parameter* p : layer.parameters()) p->value.setZero();
}

}  // namespace

TEST(LstmCell, ZeroParametersGiveZeroState) {
  Rng rng(1);
  LstmCell cell("c", 3, 4, rng);
  zero_parameters(cell);
  const auto s = cell.step(random_normal(1, 3, rng), RowVector::Zero(4), RowVector::Zero(4));
  EXPECT_TRUE(s.h.isZero());
  EXPECT_TRUE(s.c.isZero());
}

TEST(LstmCell, SaturatedForgetKeepsCell) {
  Rng rng(2);
  LstmCell cell("c", 3, 2, rng);
  zero_parameters(cell);
  cell.gate(cell.b.value, Gate::Forget).setConstant(50.0);
  cell.gate(cell.b.value, Gate::Input).setConstant(-50.0);
  RowVector c_prev(2);
  c_prev << 0.7, -1.3;
  const auto s = cell.step(random_normal(1, 3, rng), RowVector::Zero(2), c_prev);
  EXPECT_NEAR(s.c(0), 0.7, 1e-12);
  EXPECT_NEAR(s.c(1), -1.3, 1e-12);
}

TEST(LstmCell, MatchesScalarLoop) {
  Rng rng(3);
  LstmCell cell("c", 3, 3, rng);
  cell.b.value = random_normal(1, 12, rng);
  const RowVector x = random_normal(1, 3, rng);
  const RowVector h0 = random_normal(1, 3, rng);
  const RowVector c0 = random_normal(1, 3, rng);
  std::vector<double> h = as_vector(h0);
  std::vector<double> c = as_vector(c0);
  reference_step(cell, as_vector(x), h, c);
  const auto s = cell.step(x, h0, c0);
  for (int j = 0; j < 3; ++j) {
    EXPECT_NEAR(s.h(j), h[static_cast<std::size_t>(j)], 1e-14);
    EXPECT_NEAR(s.c(j), c[static_cast<std::size_t>(j)], 1e-14);
  }
}

TEST(LstmCell, InitialForgetBiasIsOne) {
  Rng rng(4);
  LstmCell cell("c", 3, 5, rng);
  EXPECT_TRUE(cell.gate(cell.b.value, Gate::Forget).isConstant(1.0));
  EXPECT_TRUE(cell.gate(cell.b.value, Gate::Input).isZero());
}

TEST(BiLstm, LengthOneIsSingleStepEachWay) {
  Rng rng(5);
  BiLstm layer("b", 3, 2, rng);
  const BatchTensor x = random_batch({1}, 3, rng);
  BiLstm::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  const RowVector zero = RowVector::Zero(2);
  const auto f = layer.forward_cell.step(x.token(0, 0), zero, zero);
  const auto b = layer.backward_cell.step(x.token(0, 0), zero, zero);
  EXPECT_TRUE(y.token(0, 0).head(2).isApprox(f.h, 1e-14));
  EXPECT_TRUE(y.token(0, 0).tail(2).isApprox(b.h, 1e-14));
}

TEST(BiLstm, MatchesUnrolledTwoDirections) {
  Rng rng(6);
  BiLstm layer("b", 3, 2, rng);
  const BatchTensor x = random_batch({3}, 3, rng);
  BiLstm::Cache cache;
  const BatchTensor y = layer.forward(x, cache);

  std::vector<std::vector<double>> fwd(3);
  std::vector<std::vector<double>> bwd(3);
  std::vector<double> h(2, 0.0);
  std::vector<double> c(2, 0.0);
  for (int t = 0; t < 3; ++t) {
    reference_step(layer.forward_cell, as_vector(x.token(0, t)), h, c);
    fwd[static_cast<std::size_t>(t)] = h;
  }
  h.assign(2, 0.0);
  c.assign(2, 0.0);
  for (int t = 2; t >= 0; --t) {
    reference_step(layer.backward_cell, as_vector(x.token(0, t)), h, c);
    bwd[static_cast<std::size_t>(t)] = h;
  }
  for (int t = 0; t < 3; ++t) {
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(y.token(0, t)(j), fwd[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)], 1e-14);
      EXPECT_NEAR(y.token(0, t)(2 + j), bwd[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)], 1e-14);
    }
  }
}

TEST(BiLstm, PalindromeSymmetry) {
  Rng rng(7);
  BiLstm layer("b", 3, 2, rng);
  layer.backward_cell.W = layer.forward_cell.W;
  layer.backward_cell.U = layer.forward_cell.U;
  layer.backward_cell.b = layer.forward_cell.b;
  BatchTensor x = random_batch({5}, 3, rng);
  for (int t = 0; t < 2; ++t) x.token(0, 4 - t) = x.token(0, t);
  BiLstm::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  for (int t = 0; t < 5; ++t) {
    EXPECT_TRUE(y.token(0, t).head(2).isApprox(y.token(0, 4 - t).tail(2), 1e-13));
  }
}

TEST(BiLstm, ZeroParametersGiveZeroOutput) {
  Rng rng(8);
  BiLstm layer("b", 3, 4, rng);
  zero_parameters(layer);
  BiLstm::Cache cache;
  EXPECT_TRUE(layer.forward(random_batch({4, 2}, 3, rng), cache).values().isZero());
}

// Trailing padding neither leaks into outputs nor shifts the backward pass.
TEST(BiLstm, PaddingDoesNotAffectValidPositions) {
  Rng rng(9);
  BiLstm layer("b", 3, 2, rng);
  const BatchTensor batch = random_batch({2, 5}, 3, rng);
  std::vector<Matrix> alone = {Matrix(batch.sequence(0).topRows(2))};
  BiLstm::Cache c1;
  BiLstm::Cache c2;
  const BatchTensor padded = layer.forward(batch, c1);
  const BatchTensor single = layer.forward(BatchTensor::from_sequences(alone), c2);
  EXPECT_TRUE(padded.sequence(0).topRows(2).isApprox(single.values(), 1e-14));
  EXPECT_TRUE(padded.sequence(0).bottomRows(3).isZero());
}

TEST(BiLstm, ShapeMismatch) {
  Rng rng(10);
  BiLstm layer("b", 3, 2, rng);
  BiLstm::Cache cache;
  EXPECT_THROW(layer.forward(random_batch({2}, 4, rng), cache), DimensionError);
}

TEST(AdditiveAttention, IdenticalTokensAreFixedPoint) {
  Rng rng(11);
  AdditiveSelfAttention layer("a", 4, 5, rng);
  const Matrix token = random_normal(1, 4, rng);
  std::vector<Matrix> seqs = {token.replicate(3, 1)};
  AdditiveSelfAttention::Cache cache;
  const BatchTensor y = layer.forward(BatchTensor::from_sequences(seqs), cache);
  for (int t = 0; t < 3; ++t) EXPECT_TRUE(y.token(0, t).isApprox(token, 1e-14));
}

TEST(AdditiveAttention, ZeroScoreVectorAveragesValidTokens) {
  Rng rng(12);
  AdditiveSelfAttention layer("a", 4, 5, rng);
  layer.v_a.value.setZero();
  const BatchTensor x = random_batch({3, 5}, 4, rng);
  AdditiveSelfAttention::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  const RowVector mean = x.sequence(0).topRows(3).colwise().mean();
  for (int t = 0; t < 3; ++t) EXPECT_TRUE(y.token(0, t).isApprox(mean, 1e-14));
}

TEST(AdditiveAttention, MatchesDoubleLoop) {
  Rng rng(13);
  AdditiveSelfAttention layer("a", 3, 4, rng);
  layer.b_h.value = random_normal(1, 4, rng);
  layer.b_v.value(0, 0) = 0.3;
  const BatchTensor x = random_batch({4}, 3, rng);
  AdditiveSelfAttention::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  for (int t = 0; t < 4; ++t) {
    std::vector<double> scores(4);
    for (int s = 0; s < 4; ++s) {
      double e = layer.b_v.value(0, 0);
      for (int a = 0; a < 4; ++a) {
        double z = layer.b_h.value(0, a);
        for (int i = 0; i < 3; ++i) z += x.token(0, t)(i) * layer.W_t.value(i, a) + x.token(0, s)(i) * layer.W_x.value(i, a);
        e += layer.v_a.value(a, 0) * std::tanh(z);
      }
      scores[static_cast<std::size_t>(s)] = e;
    }
    double denom = 0.0;
    for (double e : scores) denom += std::exp(e);
    for (int i = 0; i < 3; ++i) {
      double out = 0.0;
      for (int s = 0; s < 4; ++s) out += std::exp(scores[static_cast<std::size_t>(s)]) / denom * x.token(0, s)(i);
      EXPECT_NEAR(y.token(0, t)(i), out, 1e-13);
    }
  }
}

TEST(AdditiveAttention, AllPaddingSequenceIsContractViolation) {
  Rng rng(14);
  AdditiveSelfAttention layer("a", 3, 4, rng);
  BatchTensor x = random_batch({3, 2}, 3, rng);
  x.set_valid(1, 0, false);
  x.set_valid(1, 1, false);
  x.zero_padding();
  AdditiveSelfAttention::Cache cache;
  EXPECT_THROW(layer.forward(x, cache), ContractError);
  layer.reject_empty_sequences = false;
  const BatchTensor y = layer.forward(x, cache);
  EXPECT_TRUE(y.sequence(1).isZero());
}

TEST(MultiHeadAttention, ZeroQueriesGiveMeanOfValues) {
  Rng rng(15);
  MultiHeadSelfAttention layer("m", 4, 2, rng);
  layer.W_q.value.setZero();
  const BatchTensor x = random_batch({3}, 4, rng);
  MultiHeadSelfAttention::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  const RowVector expected = (x.sequence(0).topRows(3) * layer.W_v.value).colwise().mean() * layer.W_o.value;
  for (int t = 0; t < 3; ++t) EXPECT_TRUE(y.token(0, t).isApprox(expected, 1e-13));
}

TEST(MultiHeadAttention, SingletonIsValueThenOutputProjection) {
  Rng rng(16);
  MultiHeadSelfAttention layer("m", 6, 3, rng);
  const BatchTensor x = random_batch({1}, 6, rng);
  MultiHeadSelfAttention::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  EXPECT_TRUE(y.token(0, 0).isApprox(x.token(0, 0) * layer.W_v.value * layer.W_o.value, 1e-13));
}

TEST(MultiHeadAttention, MatchesPerHeadLoop) {
  Rng rng(17);
  MultiHeadSelfAttention layer("m", 4, 2, rng);
  const BatchTensor x = random_batch({3}, 4, rng);
  MultiHeadSelfAttention::Cache cache;
  const BatchTensor y = layer.forward(x, cache);

  const Matrix X = x.sequence(0);
  const Matrix Q = X * layer.W_q.value;
  const Matrix K = X * layer.W_k.value;
  const Matrix V = X * layer.W_v.value;
  Matrix context = Matrix::Zero(3, 4);
  for (int h = 0; h < 2; ++h) {
    for (int t = 0; t < 3; ++t) {
      double logits[3];
      double denom = 0.0;
      for (int s = 0; s < 3; ++s) {
        double dot = 0.0;
        for (int k = 0; k < 2; ++k) dot += Q(t, h * 2 + k) * K(s, h * 2 + k);
        logits[s] = dot / std::sqrt(2.0);
        denom += std::exp(logits[s]);
      }
      for (int s = 0; s < 3; ++s) {
        for (int k = 0; k < 2; ++k) context(t, h * 2 + k) += std::exp(logits[s]) / denom * V(s, h * 2 + k);
      }
    }
  }
  EXPECT_TRUE(y.sequence(0).isApprox(context * layer.W_o.value, 1e-13));
}

TEST(MultiHeadAttention, OneHeadEqualsUnslicedAttention) {
  Rng rng(18);
  MultiHeadSelfAttention layer("m", 5, 1, rng);
  const BatchTensor x = random_batch({4, 2}, 5, rng);
  MultiHeadSelfAttention::Cache cache;
  const BatchTensor y = layer.forward(x, cache);
  for (Eigen::Index b = 0; b < 2; ++b) {
    const Eigen::Index n = x.length(b);
    const Matrix X = x.sequence(b).topRows(n);
    const Matrix weights = softmax_rows(Matrix((X * layer.W_q.value) * (X * layer.W_k.value).transpose() / std::sqrt(5.0)));
    const Matrix expected = weights * (X * layer.W_v.value) * layer.W_o.value;
    EXPECT_TRUE(y.sequence(b).topRows(n).isApprox(expected, 1e-13));
  }
}

TEST(MultiHeadAttention, HeadsMustDivideDim) {
  Rng rng(19);
  try {
    MultiHeadSelfAttention layer("m", 10, 4, rng);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("10"), std::string::npos) << what;
    EXPECT_NE(what.find("5"), std::string::npos) << what;
  }
}

TEST(ChooseHeads, DivisorRule) {
  EXPECT_EQ(choose_heads(300), 6);
  EXPECT_EQ(choose_heads(3072), 6);
  EXPECT_EQ(choose_heads(4196), 4);
  EXPECT_EQ(choose_heads(4), 4);
  EXPECT_EQ(choose_heads(7), 1);
  EXPECT_EQ(choose_heads(35, 6), 5);
  EXPECT_EQ(choose_heads(12, 3), 3);
}

TEST(DenseSoftmax, ZeroWeightsGiveUniform) {
  Rng rng(20);
  DenseSoftmax layer("d", 4, rng);
  zero_parameters(layer);
  DenseSoftmax::Cache cache;
  const BatchTensor y = layer.forward(random_batch({2, 3}, 4, rng), cache);
  EXPECT_TRUE(y.values().isConstant(1.0 / 3.0, 1e-15));
}

TEST(DenseSoftmax, BiasDominance) {
  Rng rng(21);
  DenseSoftmax layer("d", 4, rng);
  layer.W.value.setZero();
  layer.b.value << 10.0, 0.0, -10.0;
  DenseSoftmax::Cache cache;
  const BatchTensor y = layer.forward(random_batch({2}, 4, rng), cache);
  EXPECT_GT(y.token(0, 0)(0), 0.9999);
}

TEST(DenseSoftmax, RowsSumToOneAndPaddingIsUniform) {
  Rng rng(22);
  DenseSoftmax layer("d", 4, rng);
  DenseSoftmax::Cache cache;
  const BatchTensor y = layer.forward(random_batch({5, 2}, 4, rng, 5.0), cache);
  for (Eigen::Index r = 0; r < y.values().rows(); ++r) EXPECT_NEAR(y.values().row(r).sum(), 1.0, 1e-9);
  EXPECT_TRUE(y.token(1, 4).isConstant(1.0 / 3.0, 1e-15));
}

TEST(AttentionInvariants, EquivarianceAndStochasticity) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const BatchTensor x = random_batch({4, 6, 4}, 6, rng);
    AdditiveSelfAttention additive("a", 6, 8, rng);
    MultiHeadSelfAttention multi("m", 6, 3, rng);
    EXPECT_LE(permutation_equivariance_error(additive, x, rng), 1e-9);
    EXPECT_LE(permutation_equivariance_error(multi, x, rng), 1e-9);
    AdditiveSelfAttention::Cache ca;
    additive.forward(x, ca);
    MultiHeadSelfAttention::Cache cm;
    multi.forward(x, cm);
    for (const StochasticityReport& r : {attention_stochasticity(ca), attention_stochasticity(cm, 3)}) {
      EXPECT_LE(r.max_row_sum_error, 1e-9);
      EXPECT_EQ(r.max_padded_weight, 0.0);
    }
  }
}
