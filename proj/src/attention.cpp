#include <cmath>

#include "amseg/layers.hpp"

namespace amseg {

namespace {

using Index = Eigen::Index;

constexpr double kMaskedLogit = -1e9;

std::vector<Index> valid_lengths(const BatchTensor& x, bool reject_empty, const char* layer) {
  x.require_prefix_mask();
  std::vector<Index> lengths(static_cast<std::size_t>(x.batch()));
  for (Index b = 0; b < x.batch(); ++b) {
    lengths[static_cast<std::size_t>(b)] = x.length(b);
    if (reject_empty && lengths[static_cast<std::size_t>(b)] == 0) {
      throw ContractError(std::string(layer) + ": sequence " + std::to_string(b) + " is entirely padding");
    }
  }
  return lengths;
}

// Softmax over a T x T logit block whose keys beyond `length` are padding.
// Padded keys are masked with -1e9; Eigen's vectorized exp clamps its input
// near -708 and would leave a denormal, so padded weights are zeroed exactly.
Matrix masked_softmax(const Matrix& logits, Index length) {
  Matrix shifted = logits;
  const Index padded = shifted.cols() - length;
  if (padded > 0) shifted.rightCols(padded).array() += kMaskedLogit;
  Matrix weights = softmax_rows(shifted);
  if (padded > 0 && length > 0) weights.rightCols(padded).setZero();
  return weights;
}

}  // namespace

int choose_heads(int dim, int cap) {
  if (dim < 1 || cap < 1) throw ConfigError("choose_heads: dim and cap must be >= 1");
  for (int h = std::min(dim, cap); h > 1; --h) {
    if (dim % h == 0) return h;
  }
  return 1;
}

AdditiveSelfAttention::AdditiveSelfAttention(const std::string& name, Eigen::Index dim, Eigen::Index attention_width,
                                             Rng& rng) {
  if (dim < 1 || attention_width < 1) {
    throw ConfigError("additive attention " + name + ": dim and attention width must be positive");
  }
  W_t = Parameter(name + ".W_t", glorot_uniform(dim, attention_width, rng));
  W_x = Parameter(name + ".W_x", glorot_uniform(dim, attention_width, rng));
  b_h = Parameter(name + ".b_h", Matrix::Zero(1, attention_width));
  v_a = Parameter(name + ".v_a", glorot_uniform(attention_width, 1, rng));
  b_v = Parameter(name + ".b_v", Matrix::Zero(1, 1));
}

BatchTensor AdditiveSelfAttention::forward(const BatchTensor& x, Cache& cache) const {
  if (x.features() != dim()) {
    throw DimensionError("additive attention: input features " + std::to_string(x.features()) + " != " +
                         std::to_string(dim()));
  }
  cache.lengths = valid_lengths(x, reject_empty_sequences, "additive attention");
  cache.input = x;
  cache.query_proj = x.values() * W_t.value;
  cache.key_proj = x.values() * W_x.value;
  cache.weights.assign(static_cast<std::size_t>(x.batch()), Matrix::Zero(x.time(), x.time()));

  const Index T = x.time();
  const RowVector v = v_a.value.col(0).transpose();
  BatchTensor out = x.like(dim());
  for (Index b = 0; b < x.batch(); ++b) {
    const Index L = cache.lengths[static_cast<std::size_t>(b)];
    if (L == 0) continue;
    const auto keys = cache.key_proj.middleRows(b * T, L);
    Matrix logits = Matrix::Constant(T, T, 0.0);
    for (Index t = 0; t < L; ++t) {
      const RowVector shift = cache.query_proj.row(b * T + t) + b_h.value.row(0);
      const Matrix hidden = (keys.rowwise() + shift).array().tanh().matrix();
      logits.row(t).head(L) = (hidden * v.transpose()).transpose().array() + b_v.value(0, 0);
    }
    Matrix weights = masked_softmax(logits, L);
    weights.bottomRows(T - L).setZero();
    out.sequence(b).topRows(L) = weights.topLeftCorner(L, L) * x.sequence(b).topRows(L);
    cache.weights[static_cast<std::size_t>(b)] = std::move(weights);
  }
  return out;
}

BatchTensor AdditiveSelfAttention::backward(const Cache& cache, const BatchTensor& dy) {
  const BatchTensor& x = cache.input;
  if (dy.values().rows() != x.values().rows() || dy.features() != dim()) {
    throw DimensionError("additive attention backward: upstream " + shape_of(dy.values()) + " does not match");
  }
  const Index T = x.time();
  const Index da = attention_width();
  const RowVector v = v_a.value.col(0).transpose();
  BatchTensor dx = x.like(dim());
  Matrix d_query = Matrix::Zero(x.values().rows(), da);
  Matrix d_key = Matrix::Zero(x.values().rows(), da);

  for (Index b = 0; b < x.batch(); ++b) {
    const Index L = cache.lengths[static_cast<std::size_t>(b)];
    if (L == 0) continue;
    const auto weights = cache.weights[static_cast<std::size_t>(b)].topLeftCorner(L, L);
    const auto xb = x.sequence(b).topRows(L);
    const auto dyb = dy.sequence(b).topRows(L);
    dx.sequence(b).topRows(L) += weights.transpose() * dyb;
    const Matrix d_weights = dyb * xb.transpose();
    const Matrix d_logits = softmax_rows_backward(weights, d_weights);

    const auto keys = cache.key_proj.middleRows(b * T, L);
    for (Index t = 0; t < L; ++t) {
      const RowVector shift = cache.query_proj.row(b * T + t) + b_h.value.row(0);
      const Matrix hidden = (keys.rowwise() + shift).array().tanh().matrix();
      const RowVector de = d_logits.row(t);
      v_a.grad.col(0) += hidden.transpose() * de.transpose();
      b_v.grad(0, 0) += de.sum();
      const Matrix d_pre = ((de.transpose() * v).array() * (1.0 - hidden.array().square())).matrix();
      const RowVector summed = d_pre.colwise().sum();
      d_query.row(b * T + t) += summed;
      d_key.middleRows(b * T, L) += d_pre;
      b_h.grad.row(0) += summed;
    }
  }
  W_t.grad.noalias() += x.values().transpose() * d_query;
  W_x.grad.noalias() += x.values().transpose() * d_key;
  dx.values().noalias() += d_query * W_t.value.transpose();
  dx.values().noalias() += d_key * W_x.value.transpose();
  return dx;
}

MultiHeadSelfAttention::MultiHeadSelfAttention(const std::string& name, Eigen::Index dim, int heads, Rng& rng)
    : heads_(heads) {
  if (heads < 1 || dim < 1 || dim % heads != 0) {
    std::string divisors;
    for (Index h = 1; h <= dim; ++h) {
      if (dim % h == 0) divisors += (divisors.empty() ? "" : ",") + std::to_string(h);
    }
    throw ConfigError("multi-head attention " + name + ": " + std::to_string(heads) + " heads do not divide dim " +
                      std::to_string(dim) + " (divisors: " + divisors + ")");
  }
  W_q = Parameter(name + ".W_q", glorot_uniform(dim, dim, rng));
  W_k = Parameter(name + ".W_k", glorot_uniform(dim, dim, rng));
  W_v = Parameter(name + ".W_v", glorot_uniform(dim, dim, rng));
  W_o = Parameter(name + ".W_o", glorot_uniform(dim, dim, rng));
}

BatchTensor MultiHeadSelfAttention::forward(const BatchTensor& x, Cache& cache) const {
  if (x.features() != dim()) {
    throw DimensionError("multi-head attention: input features " + std::to_string(x.features()) + " != " +
                         std::to_string(dim()));
  }
  cache.lengths = valid_lengths(x, reject_empty_sequences, "multi-head attention");
  cache.input = x;
  cache.queries = x.values() * W_q.value;
  cache.keys = x.values() * W_k.value;
  cache.values = x.values() * W_v.value;
  cache.context = Matrix::Zero(x.values().rows(), dim());
  cache.weights.assign(static_cast<std::size_t>(x.batch() * heads_), Matrix::Zero(x.time(), x.time()));

  const Index T = x.time();
  const Index dk = head_width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (Index b = 0; b < x.batch(); ++b) {
    const Index L = cache.lengths[static_cast<std::size_t>(b)];
    if (L == 0) continue;
    for (int h = 0; h < heads_; ++h) {
      const auto q = cache.queries.block(b * T, h * dk, L, dk);
      const auto k = cache.keys.block(b * T, h * dk, L, dk);
      const auto v = cache.values.block(b * T, h * dk, L, dk);
      Matrix logits = Matrix::Zero(L, T);
      logits.leftCols(L) = (q * k.transpose()) * scale;
      const Matrix weights = masked_softmax(logits, L);
      cache.context.block(b * T, h * dk, L, dk) = weights.leftCols(L) * v;
      cache.weights[static_cast<std::size_t>(b * heads_ + h)].topRows(L) = weights;
    }
  }
  BatchTensor out = x.like(dim());
  out.values() = cache.context * W_o.value;
  return out;
}

BatchTensor MultiHeadSelfAttention::backward(const Cache& cache, const BatchTensor& dy) {
  const BatchTensor& x = cache.input;
  if (dy.values().rows() != x.values().rows() || dy.features() != dim()) {
    throw DimensionError("multi-head attention backward: upstream " + shape_of(dy.values()) + " does not match");
  }
  const Index T = x.time();
  const Index dk = head_width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  BatchTensor upstream = dy;
  upstream.zero_padding();
  W_o.grad.noalias() += cache.context.transpose() * upstream.values();
  const Matrix d_context = upstream.values() * W_o.value.transpose();

  Matrix d_queries = Matrix::Zero(x.values().rows(), dim());
  Matrix d_keys = Matrix::Zero(x.values().rows(), dim());
  Matrix d_values = Matrix::Zero(x.values().rows(), dim());
  for (Index b = 0; b < x.batch(); ++b) {
    const Index L = cache.lengths[static_cast<std::size_t>(b)];
    if (L == 0) continue;
    for (int h = 0; h < heads_; ++h) {
      const auto weights = cache.weights[static_cast<std::size_t>(b * heads_ + h)].topLeftCorner(L, L);
      const auto q = cache.queries.block(b * T, h * dk, L, dk);
      const auto k = cache.keys.block(b * T, h * dk, L, dk);
      const auto v = cache.values.block(b * T, h * dk, L, dk);
      const auto dc = d_context.block(b * T, h * dk, L, dk);
      d_values.block(b * T, h * dk, L, dk) = weights.transpose() * dc;
      const Matrix d_weights = dc * v.transpose();
      const Matrix d_logits = softmax_rows_backward(weights, d_weights) * scale;
      d_queries.block(b * T, h * dk, L, dk) = d_logits * k;
      d_keys.block(b * T, h * dk, L, dk) = d_logits.transpose() * q;
    }
  }
  W_q.grad.noalias() += x.values().transpose() * d_queries;
  W_k.grad.noalias() += x.values().transpose() * d_keys;
  W_v.grad.noalias() += x.values().transpose() * d_values;

  BatchTensor dx = x.like(dim());
  dx.values().noalias() = d_queries * W_q.value.transpose();
  dx.values().noalias() += d_keys * W_k.value.transpose();
  dx.values().noalias() += d_values * W_v.value.transpose();
  return dx;
}

}  // namespace amseg
