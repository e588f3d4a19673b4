#include <algorithm>

#include "amseg/layers.hpp"

namespace amseg {

namespace {

using Index = Eigen::Index;

std::vector<Index> sequence_lengths(const BatchTensor& x) {
  std::vector<Index> lengths(static_cast<std::size_t>(x.batch()));
  for (Index b = 0; b < x.batch(); ++b) lengths[static_cast<std::size_t>(b)] = x.length(b);
  return lengths;
}

struct ActiveRows {
  std::vector<Index> seq;  // batch index
  std::vector<Index> row;  // row in the (B*T) layout
};

// Sequences still running at step k; the reversed direction walks each
// sequence from its last valid token, so trailing padding is never visited.
ActiveRows active_at(const std::vector<Index>& lengths, Index time, Index k, bool reversed) {
  ActiveRows active;
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const Index len = lengths[b];
    if (len <= k) continue;
    const Index pos = reversed ? len - 1 - k : k;
    active.seq.push_back(static_cast<Index>(b));
    active.row.push_back(static_cast<Index>(b) * time + pos);
  }
  return active;
}

void run_direction(const LstmCell& cell, const BatchTensor& x, const std::vector<Index>& lengths, bool reversed,
                   BiLstm::Direction& dir, BatchTensor& out, Index col_offset) {
  const Index H = cell.hidden();
  const Index rows = x.values().rows();
  const Matrix pre = (x.values() * cell.W.value).rowwise() + cell.b.value.row(0);

  dir.gates = Matrix::Zero(rows, 4 * H);
  dir.cell = Matrix::Zero(rows, H);
  dir.h_prev = Matrix::Zero(rows, H);
  dir.c_prev = Matrix::Zero(rows, H);

  Matrix h = Matrix::Zero(x.batch(), H);
  Matrix c = Matrix::Zero(x.batch(), H);
  const Index steps = lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());

  for (Index k = 0; k < steps; ++k) {
    const ActiveRows active = active_at(lengths, x.time(), k, reversed);
    const auto n = static_cast<Index>(active.seq.size());
    Matrix h_in(n, H);
    Matrix z(n, 4 * H);
    for (Index a = 0; a < n; ++a) {
      h_in.row(a) = h.row(active.seq[a]);
      z.row(a) = pre.row(active.row[a]);
    }
    z.noalias() += h_in * cell.U.value;

    for (Index a = 0; a < n; ++a) {
      const Index b = active.seq[a];
      const Index r = active.row[a];
      RowVector g(4 * H);
      g.segment(0, H) = z.row(a).segment(0, H).unaryExpr([](double v) { return sigmoid(v); });
      g.segment(H, H) = z.row(a).segment(H, H).unaryExpr([](double v) { return sigmoid(v); });
      g.segment(2 * H, H) = z.row(a).segment(2 * H, H).array().tanh().matrix();
      g.segment(3 * H, H) = z.row(a).segment(3 * H, H).unaryExpr([](double v) { return sigmoid(v); });

      dir.h_prev.row(r) = h.row(b);
      dir.c_prev.row(r) = c.row(b);
      const RowVector c_new =
          (g.segment(H, H).array() * c.row(b).array() + g.segment(0, H).array() * g.segment(2 * H, H).array())
              .matrix();
      const RowVector h_new = (g.segment(3 * H, H).array() * c_new.array().tanh()).matrix();
      dir.gates.row(r) = g;
      dir.cell.row(r) = c_new;
      c.row(b) = c_new;
      h.row(b) = h_new;
      out.values().row(r).segment(col_offset, H) = h_new;
    }
  }
}

Matrix backprop_direction(LstmCell& cell, const BatchTensor& x, const std::vector<Index>& lengths, bool reversed,
                          const BiLstm::Direction& dir, const BatchTensor& dy, Index col_offset) {
  const Index H = cell.hidden();
  const Index rows = x.values().rows();
  Matrix dz_all = Matrix::Zero(rows, 4 * H);
  Matrix dh = Matrix::Zero(x.batch(), H);
  Matrix dc = Matrix::Zero(x.batch(), H);
  const Index steps = lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());

  for (Index k = steps - 1; k >= 0; --k) {
    const ActiveRows active = active_at(lengths, x.time(), k, reversed);
    const auto n = static_cast<Index>(active.seq.size());
    Matrix dz(n, 4 * H);
    for (Index a = 0; a < n; ++a) {
      const Index b = active.seq[a];
      const Index r = active.row[a];
      const auto gates = dir.gates.row(r);
      const auto i = gates.segment(0, H).array();
      const auto f = gates.segment(H, H).array();
      const auto g = gates.segment(2 * H, H).array();
      const auto o = gates.segment(3 * H, H).array();
      const Eigen::ArrayXXd tc = dir.cell.row(r).array().tanh();

      const Eigen::ArrayXXd dh_total = dy.values().row(r).segment(col_offset, H).array() + dh.row(b).array();
      const Eigen::ArrayXXd d_o = dh_total * tc;
      const Eigen::ArrayXXd d_c = dh_total * o * (1.0 - tc.square()) + dc.row(b).array();
      const Eigen::ArrayXXd d_i = d_c * g;
      const Eigen::ArrayXXd d_f = d_c * dir.c_prev.row(r).array();
      const Eigen::ArrayXXd d_g = d_c * i;

      dz.row(a).segment(0, H) = (d_i * i * (1.0 - i)).matrix();
      dz.row(a).segment(H, H) = (d_f * f * (1.0 - f)).matrix();
      dz.row(a).segment(2 * H, H) = (d_g * (1.0 - g.square())).matrix();
      dz.row(a).segment(3 * H, H) = (d_o * o * (1.0 - o)).matrix();
      dc.row(b) = (d_c * f).matrix();
      dz_all.row(r) = dz.row(a);
    }
    const Matrix dh_prev = dz * cell.U.value.transpose();
    for (Index a = 0; a < n; ++a) dh.row(active.seq[a]) = dh_prev.row(a);
  }

  cell.W.grad.noalias() += x.values().transpose() * dz_all;
  cell.U.grad.noalias() += dir.h_prev.transpose() * dz_all;
  cell.b.grad += dz_all.colwise().sum();
  return dz_all * cell.W.value.transpose();
}

}  // namespace

LstmCell::LstmCell(const std::string& name, Eigen::Index input_dim, Eigen::Index hidden, Rng& rng) {
  if (input_dim < 1 || hidden < 1) throw ConfigError("LstmCell " + name + ": dimensions must be positive");
  Matrix w(input_dim, 4 * hidden);
  Matrix u(hidden, 4 * hidden);
  for (int g = 0; g < 4; ++g) {
    w.middleCols(g * hidden, hidden) = glorot_uniform(input_dim, hidden, rng);
    u.middleCols(g * hidden, hidden) = glorot_uniform(hidden, hidden, rng);
  }
  Matrix bias = Matrix::Zero(1, 4 * hidden);
  bias.middleCols(static_cast<int>(Gate::Forget) * hidden, hidden).setOnes();
  W = Parameter(name + ".W", std::move(w));
  U = Parameter(name + ".U", std::move(u));
  b = Parameter(name + ".b", std::move(bias));
}

LstmCell::Step LstmCell::step(const RowVector& x, const RowVector& h_prev, const RowVector& c_prev) const {
  const Index H = hidden();
  if (x.size() != input_dim() || h_prev.size() != H || c_prev.size() != H) {
    throw DimensionError("lstm step: x " + shape_of(x) + ", h " + shape_of(h_prev) + ", c " + shape_of(c_prev) +
                         " do not fit cell (" + std::to_string(input_dim()) + " -> " + std::to_string(H) + ")");
  }
  const RowVector z = x * W.value + h_prev * U.value + b.value.row(0);
  const RowVector i = elementwise(z.segment(0, H), Activation::Sigmoid);
  const RowVector f = elementwise(z.segment(H, H), Activation::Sigmoid);
  const RowVector g = elementwise(z.segment(2 * H, H), Activation::Tanh);
  const RowVector o = elementwise(z.segment(3 * H, H), Activation::Sigmoid);
  Step out;
  out.c = (f.array() * c_prev.array() + i.array() * g.array()).matrix();
  out.h = (o.array() * out.c.array().tanh()).matrix();
  return out;
}

BiLstm::BiLstm(const std::string& name, Eigen::Index input_dim, Eigen::Index hidden, Rng& rng)
    : forward_cell(name + ".fwd", input_dim, hidden, rng), backward_cell(name + ".bwd", input_dim, hidden, rng) {}

BatchTensor BiLstm::forward(const BatchTensor& x, Cache& cache) const {
  if (x.features() != input_dim()) {
    throw DimensionError("bilstm: input features " + std::to_string(x.features()) + " != input_dim " +
                         std::to_string(input_dim()));
  }
  x.require_prefix_mask();
  cache.input = x;
  cache.lengths = sequence_lengths(x);
  BatchTensor out = x.like(output_dim());
  run_direction(forward_cell, x, cache.lengths, false, cache.fwd, out, 0);
  run_direction(backward_cell, x, cache.lengths, true, cache.bwd, out, forward_cell.hidden());
  return out;
}

BatchTensor BiLstm::backward(const Cache& cache, const BatchTensor& dy) {
  if (dy.features() != output_dim() || dy.values().rows() != cache.input.values().rows()) {
    throw DimensionError("bilstm backward: upstream " + shape_of(dy.values()) + " does not match output");
  }
  BatchTensor dx = cache.input.like(input_dim());
  dx.values() = backprop_direction(forward_cell, cache.input, cache.lengths, false, cache.fwd, dy, 0);
  dx.values() += backprop_direction(backward_cell, cache.input, cache.lengths, true, cache.bwd, dy,
                                    forward_cell.hidden());
  return dx;
}

ParameterRefs BiLstm::parameters() {
  ParameterRefs refs = forward_cell.parameters();
  for (Parameter* p : backward_cell.parameters()) refs.push_back(p);
  return refs;
}

}  // namespace amseg
