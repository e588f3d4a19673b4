#pragma once

// Central finite-difference verification for anything exposing the layer
// protocol: forward(input, cache), backward(cache, upstream), parameters().

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <string>

#include "amseg/tensor.hpp"

namespace amseg {

template <typename T>
concept Differentiable = requires(T& layer, const BatchTensor& x, typename T::Cache& cache) {
  { layer.forward(x, cache) } -> std::same_as<BatchTensor>;
  { layer.backward(cache, x) } -> std::same_as<BatchTensor>;
  { layer.parameters() } -> std::same_as<ParameterRefs>;
};

struct GradCheckOptions {
  double epsilon = 1e-3;
  std::uint64_t seed = 0;
  // Loss is sum(R .* y) over valid tokens; R is all ones when set, otherwise
  // standard normal drawn from `seed`.
  bool unit_projection = false;
  bool check_inputs = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_entry;
  std::size_t entries_checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

namespace detail {

inline double projected_loss(const BatchTensor& y, const Matrix& projection) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < y.values().rows(); ++r) {
    if (y.mask()[static_cast<std::size_t>(r)]) total += y.values().row(r).dot(projection.row(r));
  }
  return total;
}

}  // namespace detail

template <Differentiable Layer>
GradCheckReport grad_check(Layer& layer, const BatchTensor& input, const GradCheckOptions& opts = {}) {
  if (!(opts.epsilon > 0.0 && opts.epsilon <= 1e-2)) {
    throw ContractError("grad_check: epsilon must lie in (0, 1e-2]");
  }
  const ParameterRefs params = layer.parameters();
  for (const Parameter* p : params) require_finite(p->value, "parameter " + p->name);

  typename Layer::Cache cache;
  const BatchTensor probe = layer.forward(input, cache);
  Matrix projection;
  if (opts.unit_projection) {
    projection = Matrix::Ones(probe.values().rows(), probe.values().cols());
  } else {
    Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
    projection = random_normal(probe.values().rows(), probe.values().cols(), rng);
  }
  BatchTensor upstream = probe.like(probe.features());
  upstream.values() = projection;
  upstream.zero_padding();

  for (Parameter* p : params) p->zero_grad();
  const BatchTensor input_grad = layer.backward(cache, upstream);

  auto loss_at = [&](const BatchTensor& x, const std::string& what) {
    typename Layer::Cache scratch;
    const double value = detail::projected_loss(layer.forward(x, scratch), projection);
    if (!std::isfinite(value)) throw NumericError("grad_check: non-finite loss while probing " + what);
    return value;
  };

  GradCheckReport report;
  auto record = [&](double analytic, double numeric, const std::string& what) {
    const double err = relative_error(analytic, numeric);
    ++report.entries_checked;
    if (err > report.max_relative_error || report.worst_entry.empty()) {
      report.max_relative_error = err;
      report.worst_entry = what;
    }
  };

  for (Parameter* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& slot = p->value.data()[i];
      const double saved = slot;
      slot = saved + opts.epsilon;
      const double up = loss_at(input, p->name);
      slot = saved - opts.epsilon;
      const double down = loss_at(input, p->name);
      slot = saved;
      record(p->grad.data()[i], (up - down) / (2.0 * opts.epsilon), p->name + "[" + std::to_string(i) + "]");
    }
  }

  if (opts.check_inputs) {
    BatchTensor x = input;
    for (Eigen::Index i = 0; i < x.values().size(); ++i) {
      double& slot = x.values().data()[i];
      const double saved = slot;
      slot = saved + opts.epsilon;
      const double up = loss_at(x, "input");
      slot = saved - opts.epsilon;
      const double down = loss_at(x, "input");
      slot = saved;
      record(input_grad.values().data()[i], (up - down) / (2.0 * opts.epsilon),
             "input[" + std::to_string(i) + "]");
    }
  }
  return report;
}

}  // namespace amseg
