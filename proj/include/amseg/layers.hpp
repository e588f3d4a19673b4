#pragma once

// Layer zoo: LSTM cell, bidirectional LSTM, additive self-attention,
// scaled dot-product multi-head self-attention, time-distributed linear
// projection and dense softmax output.
//
// Every layer follows the same protocol: `forward(x, cache)` is const and
// fills a caller-owned cache; `backward(cache, dy)` accumulates parameter
// gradients and returns dL/dx. Padded positions produce zero outputs (uniform
// distributions for DenseSoftmax) and receive zero input gradients.

#include <string>
#include <vector>

#include "amseg/tensor.hpp"

namespace amseg {

// Largest divisor of `dim` that is <= cap.
int choose_heads(int dim, int cap = 6);

// Gate blocks are stored fused along columns in the order
// input, forget, candidate, output.
enum class Gate : int { Input = 0, Forget = 1, Candidate = 2, Output = 3 };

class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(const std::string& name, Eigen::Index input_dim, Eigen::Index hidden, Rng& rng);

  Eigen::Index input_dim() const { return W.value.rows(); }
  Eigen::Index hidden() const { return U.value.rows(); }

  struct Step {
    RowVector h;
    RowVector c;
  };
  Step step(const RowVector& x, const RowVector& h_prev, const RowVector& c_prev) const;

  // Column block of one gate inside the fused matrices.
  auto gate(Matrix& m, Gate g) const { return m.middleCols(static_cast<int>(g) * hidden(), hidden()); }

  ParameterRefs parameters() { return {&W, &U, &b}; }

  Parameter W;  // input_dim x 4*hidden
  Parameter U;  // hidden x 4*hidden
  Parameter b;  // 1 x 4*hidden
};

class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(const std::string& name, Eigen::Index input_dim, Eigen::Index hidden, Rng& rng);

  struct Direction {
    Matrix gates;   // activated gates per position, (B*T) x 4h
    Matrix cell;    // c_t per position
    Matrix h_prev;  // h_{t-1} seen at each position
    Matrix c_prev;
  };
  struct Cache {
    BatchTensor input;
    std::vector<Eigen::Index> lengths;
    Direction fwd;
    Direction bwd;
  };

  Eigen::Index input_dim() const { return forward_cell.input_dim(); }
  Eigen::Index output_dim() const { return 2 * forward_cell.hidden(); }

  BatchTensor forward(const BatchTensor& x, Cache& cache) const;
  BatchTensor backward(const Cache& cache, const BatchTensor& dy);
  ParameterRefs parameters();

  LstmCell forward_cell;
  LstmCell backward_cell;
};

// y = x W + b per valid token.
class Projection {
 public:
  Projection() = default;
  Projection(const std::string& name, Eigen::Index input_dim, Eigen::Index output_dim, Rng& rng);

  struct Cache {
    BatchTensor input;
  };

  Eigen::Index input_dim() const { return W.value.rows(); }
  Eigen::Index output_dim() const { return W.value.cols(); }

  BatchTensor forward(const BatchTensor& x, Cache& cache) const;
  BatchTensor backward(const Cache& cache, const BatchTensor& dy);
  ParameterRefs parameters() { return {&W, &b}; }

  Parameter W;
  Parameter b;
};

// e[t,s] = v_a . tanh(x_t W_t + x_s W_x + b_h) + b_v over valid s;
// y_t = sum_s softmax_s(e[t,:]) x_s.
class AdditiveSelfAttention {
 public:
  static constexpr Eigen::Index kDefaultAttentionWidth = 32;

  AdditiveSelfAttention() = default;
  AdditiveSelfAttention(const std::string& name, Eigen::Index dim, Eigen::Index attention_width, Rng& rng);

  struct Cache {
    BatchTensor input;
    std::vector<Eigen::Index> lengths;
    Matrix query_proj;        // x W_t, (B*T) x d_a
    Matrix key_proj;          // x W_x
    std::vector<Matrix> weights;  // per sequence, T x T; zero outside the valid block
  };

  Eigen::Index dim() const { return W_t.value.rows(); }
  Eigen::Index attention_width() const { return W_t.value.cols(); }

  BatchTensor forward(const BatchTensor& x, Cache& cache) const;
  BatchTensor backward(const Cache& cache, const BatchTensor& dy);
  ParameterRefs parameters() { return {&W_t, &W_x, &b_h, &v_a, &b_v}; }

  Parameter W_t;
  Parameter W_x;
  Parameter b_h;
  Parameter v_a;  // d_a x 1
  Parameter b_v;  // 1 x 1

  // When false, an all-padding sequence yields zero output instead of a
  // ContractError.
  bool reject_empty_sequences = true;
};

// Q = xW_q, K = xW_k, V = xW_v split into `heads` slices of width d/heads;
// per head softmax(QK^T / sqrt(d_k)) V, concatenated, then times W_o.
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(const std::string& name, Eigen::Index dim, int heads, Rng& rng);

  struct Cache {
    BatchTensor input;
    std::vector<Eigen::Index> lengths;
    Matrix queries;
    Matrix keys;
    Matrix values;
    Matrix context;  // concatenated head outputs before W_o
    // weights[b * heads + h]: T x T, zero outside the valid block.
    std::vector<Matrix> weights;
  };

  Eigen::Index dim() const { return W_q.value.rows(); }
  int heads() const { return heads_; }
  Eigen::Index head_width() const { return dim() / heads_; }

  BatchTensor forward(const BatchTensor& x, Cache& cache) const;
  BatchTensor backward(const Cache& cache, const BatchTensor& dy);
  ParameterRefs parameters() { return {&W_q, &W_k, &W_v, &W_o}; }

  Parameter W_q;
  Parameter W_k;
  Parameter W_v;
  Parameter W_o;

  bool reject_empty_sequences = true;

 private:
  int heads_ = 1;
};

inline constexpr Eigen::Index kNumLabels = 3;

// Per-token distribution over {B, I, O}.
class DenseSoftmax {
 public:
  DenseSoftmax() = default;
  DenseSoftmax(const std::string& name, Eigen::Index input_dim, Rng& rng);

  struct Cache {
    BatchTensor input;
    Matrix probs;
  };

  Eigen::Index input_dim() const { return W.value.rows(); }

  BatchTensor forward(const BatchTensor& x, Cache& cache) const;
  // dy is dL/d(probabilities).
  BatchTensor backward(const Cache& cache, const BatchTensor& dy);
  ParameterRefs parameters() { return {&W, &b}; }

  Parameter W;  // input_dim x 3
  Parameter b;  // 1 x 3
};

}  // namespace amseg
