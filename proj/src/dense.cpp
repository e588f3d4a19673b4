#include "amseg/layers.hpp"

namespace amseg {

Projection::Projection(const std::string& name, Eigen::Index input_dim, Eigen::Index output_dim, Rng& rng)
    : W(name + ".W", glorot_uniform(input_dim, output_dim, rng)), b(name + ".b", Matrix::Zero(1, output_dim)) {}

BatchTensor Projection::forward(const BatchTensor& x, Cache& cache) const {
  if (x.features() != input_dim()) {
    throw DimensionError("projection: input features " + std::to_string(x.features()) + " != " +
                         std::to_string(input_dim()));
  }
  cache.input = x;
  BatchTensor out = x.like(output_dim());
  out.values() = (x.values() * W.value).rowwise() + b.value.row(0);
  out.zero_padding();
  return out;
}

BatchTensor Projection::backward(const Cache& cache, const BatchTensor& dy) {
  if (dy.features() != output_dim() || dy.values().rows() != cache.input.values().rows()) {
    throw DimensionError("projection backward: upstream " + shape_of(dy.values()) + " does not match");
  }
  BatchTensor upstream = dy;
  upstream.zero_padding();
  W.grad.noalias() += cache.input.values().transpose() * upstream.values();
  b.grad += upstream.values().colwise().sum();
  BatchTensor dx = cache.input.like(input_dim());
  dx.values() = upstream.values() * W.value.transpose();
  return dx;
}

DenseSoftmax::DenseSoftmax(const std::string& name, Eigen::Index input_dim, Rng& rng)
    : W(name + ".W", glorot_uniform(input_dim, kNumLabels, rng)), b(name + ".b", Matrix::Zero(1, kNumLabels)) {}

BatchTensor DenseSoftmax::forward(const BatchTensor& x, Cache& cache) const {
  if (x.features() != input_dim()) {
    throw DimensionError("dense softmax: input features " + std::to_string(x.features()) + " != " +
                         std::to_string(input_dim()));
  }
  cache.input = x;
  const Matrix logits = (x.values() * W.value).rowwise() + b.value.row(0);
  cache.probs = softmax_rows(logits);
  for (Eigen::Index r = 0; r < cache.probs.rows(); ++r) {
    if (!x.mask()[static_cast<std::size_t>(r)]) cache.probs.row(r).setConstant(1.0 / kNumLabels);
  }
  BatchTensor out = x.like(kNumLabels);
  out.values() = cache.probs;
  return out;
}

BatchTensor DenseSoftmax::backward(const Cache& cache, const BatchTensor& dy) {
  if (dy.features() != kNumLabels || dy.values().rows() != cache.probs.rows()) {
    throw DimensionError("dense softmax backward: upstream " + shape_of(dy.values()) + " does not match");
  }
  BatchTensor upstream = dy;
  upstream.zero_padding();
  const Matrix d_logits = softmax_rows_backward(cache.probs, upstream.values());
  W.grad.noalias() += cache.input.values().transpose() * d_logits;
  b.grad += d_logits.colwise().sum();
  BatchTensor dx = cache.input.like(input_dim());
  dx.values() = d_logits * W.value.transpose();
  return dx;
}

}  // namespace amseg
