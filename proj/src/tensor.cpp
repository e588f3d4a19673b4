#include "amseg/tensor.hpp"

#include <algorithm>

namespace amseg {

std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError("non-finite value in " + what);
}

BatchTensor::BatchTensor(Eigen::Index batch, Eigen::Index time, Eigen::Index features)
    : batch_(batch),
      time_(time),
      values_(Matrix::Zero(batch * time, features)),
      mask_(static_cast<std::size_t>(batch * time), 0) {}

BatchTensor BatchTensor::from_sequences(std::span<const Matrix> sequences) {
  if (sequences.empty()) return {};
  const Eigen::Index features = sequences.front().cols();
  Eigen::Index longest = 0;
  for (const auto& s : sequences) {
    if (s.cols() != features) {
      throw DimensionError("from_sequences: feature width " + std::to_string(s.cols()) + " != " +
                           std::to_string(features));
    }
    longest = std::max(longest, s.rows());
  }
  BatchTensor out(static_cast<Eigen::Index>(sequences.size()), longest, features);
  for (Eigen::Index b = 0; b < out.batch(); ++b) {
    const Matrix& s = sequences[static_cast<std::size_t>(b)];
    out.sequence(b).topRows(s.rows()) = s;
    for (Eigen::Index t = 0; t < s.rows(); ++t) out.set_valid(b, t, true);
  }
  return out;
}

Eigen::Index BatchTensor::length(Eigen::Index b) const {
  Eigen::Index n = 0;
  for (Eigen::Index t = 0; t < time_; ++t) n += valid(b, t) ? 1 : 0;
  return n;
}

Eigen::Index BatchTensor::valid_count() const {
  return static_cast<Eigen::Index>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

void BatchTensor::require_prefix_mask() const {
  for (Eigen::Index b = 0; b < batch_; ++b) {
    bool seen_pad = false;
    for (Eigen::Index t = 0; t < time_; ++t) {
      if (!valid(b, t)) {
        seen_pad = true;
      } else if (seen_pad) {
        throw ContractError("sequence " + std::to_string(b) + " has a valid token after padding at t=" +
                            std::to_string(t));
      }
    }
  }
}

BatchTensor BatchTensor::like(Eigen::Index features) const {
  BatchTensor out(batch_, time_, features);
  out.mask_ = mask_;
  return out;
}

void BatchTensor::zero_padding() {
  for (std::size_t i = 0; i < mask_.size(); ++i) {
    if (!mask_[i]) values_.row(static_cast<Eigen::Index>(i)).setZero();
  }
}

Matrix glorot_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace amseg
