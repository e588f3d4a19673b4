#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "amseg/train.hpp"

namespace amseg {

namespace {

std::vector<Matrix> snapshot(const Model& model) {
  std::vector<Matrix> values;
  for (const Parameter* p : model.parameters()) values.push_back(p->value);
  return values;
}

void restore(Model& model, const std::vector<Matrix>& values) {
  const ParameterRefs params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

std::vector<const Example*> pointers(std::span<const Example> examples) {
  std::vector<const Example*> out;
  out.reserve(examples.size());
  for (const Example& e : examples) out.push_back(&e);
  return out;
}

}  // namespace

std::vector<Example> make_examples(const Embedder& embedder, std::span<const LabeledSequence> sequences,
                                   LookupStats* stats) {
  std::vector<Example> out;
  out.reserve(sequences.size());
  for (const LabeledSequence& seq : sequences) {
    out.push_back(Example{embedder.vectorize(seq, stats), seq.labels, seq.essay_id});
  }
  return out;
}

Batch make_batch(std::span<const Example* const> members) {
  std::vector<Matrix> features;
  Batch batch;
  features.reserve(members.size());
  for (const Example* e : members) {
    if (static_cast<std::size_t>(e->features.rows()) != e->labels.size()) {
      throw DimensionError("example from " + e->essay_id + " has " + std::to_string(e->features.rows()) +
                           " feature rows and " + std::to_string(e->labels.size()) + " labels");
    }
    features.push_back(e->features);
    batch.gold.push_back(e->labels);
  }
  batch.inputs = BatchTensor::from_sequences(features);
  return batch;
}

LossAndGradient masked_cross_entropy(const BatchTensor& probs, const std::vector<std::vector<Label>>& gold) {
  if (probs.features() != kNumLabels || static_cast<Eigen::Index>(gold.size()) != probs.batch()) {
    throw DimensionError("cross entropy: predictions " + shape_of(probs.values()) + " for " +
                         std::to_string(gold.size()) + " gold sequences");
  }
  std::size_t valid = 0;
  for (Eigen::Index b = 0; b < probs.batch(); ++b) {
    const auto len = static_cast<std::size_t>(probs.length(b));
    if (gold[static_cast<std::size_t>(b)].size() != len) {
      throw DimensionError("cross entropy: sequence " + std::to_string(b) + " has " + std::to_string(len) +
                           " valid tokens but " + std::to_string(gold[static_cast<std::size_t>(b)].size()) +
                           " labels");
    }
    valid += len;
  }
  if (valid == 0) throw ContractError("cross entropy: batch has no valid tokens");

  LossAndGradient out;
  out.gradient = probs.like(kNumLabels);
  const double scale = 1.0 / static_cast<double>(valid);
  double total = 0.0;
  for (Eigen::Index b = 0; b < probs.batch(); ++b) {
    const auto& labels = gold[static_cast<std::size_t>(b)];
    for (std::size_t t = 0; t < labels.size(); ++t) {
      const int k = label_index(labels[t]);
      const double p = probs.token(b, static_cast<Eigen::Index>(t))(k);
      total -= std::log(p);
      out.gradient.token(b, static_cast<Eigen::Index>(t))(k) = -scale / p;
    }
  }
  out.loss = total * scale;
  return out;
}

AdamState::AdamState(const ParameterRefs& params) {
  for (const Parameter* p : params) {
    first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void adam_step(const ParameterRefs& params, AdamState& state, double learning_rate) {
  if (params.size() != state.first_moment.size()) {
    throw DimensionError("adam: state tracks " + std::to_string(state.first_moment.size()) + " parameters, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->grad.rows() != state.first_moment[i].rows() ||
        params[i]->grad.cols() != state.first_moment[i].cols()) {
      throw DimensionError("adam: moment shape mismatch for " + params[i]->name);
    }
    if (!params[i]->grad.allFinite()) throw NumericError("adam: non-finite gradient in " + params[i]->name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double correction2 = 1.0 - std::pow(AdamState::kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    const Matrix& g = params[i]->grad;
    m = AdamState::kBeta1 * m + (1.0 - AdamState::kBeta1) * g;
    v = AdamState::kBeta2 * v + (1.0 - AdamState::kBeta2) * g.cwiseAbs2();
    params[i]->value.array() -=
        learning_rate * (m.array() / correction1) / ((v.array() / correction2).sqrt() + AdamState::kEpsilon);
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 0) throw ConfigError("train: patience must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be > 0");
  if (!(val_fraction > 0.0 && val_fraction < 0.5)) throw ConfigError("train: val_fraction must lie in (0, 0.5)");
}

EssaySplit split_by_essay(std::vector<Example> examples, double val_fraction, std::uint64_t seed) {
  std::vector<std::string> essays;
  {
    std::set<std::string> seen;
    for (const Example& e : examples) {
      if (seen.insert(e.essay_id).second) essays.push_back(e.essay_id);
    }
  }
  if (essays.size() < 2) throw ContractError("split_by_essay: need at least two essays to hold one out");
  std::sort(essays.begin(), essays.end());
  Rng rng(seed);
  std::shuffle(essays.begin(), essays.end(), rng);
  auto held = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(essays.size())));
  held = std::clamp<std::size_t>(held, 1, essays.size() - 1);
  const std::set<std::string> validation_ids(essays.begin(), essays.begin() + static_cast<std::ptrdiff_t>(held));

  EssaySplit split;
  for (Example& e : examples) {
    (validation_ids.contains(e.essay_id) ? split.validation : split.train).push_back(std::move(e));
  }
  return split;
}

double dataset_loss(const Model& model, std::span<const Example> examples, int batch_size) {
  const auto ptrs = pointers(examples);
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < ptrs.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ptrs.size(), start + static_cast<std::size_t>(batch_size));
    const Batch batch = make_batch(std::span(ptrs).subspan(start, end - start));
    const auto n = static_cast<std::size_t>(batch.inputs.valid_count());
    if (n == 0) continue;
    weighted += masked_cross_entropy(model.forward(batch.inputs), batch.gold).loss * static_cast<double>(n);
    tokens += n;
  }
  if (tokens == 0) throw ContractError("dataset_loss: no valid tokens");
  return weighted / static_cast<double>(tokens);
}

TrainResult train(Model& model, std::span<const Example> train_set, std::span<const Example> validation_set,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");
  if (validation_set.empty()) throw ContractError("train: empty validation set");

  const ParameterRefs params = model.parameters();
  AdamState adam(params);
  Rng rng(cfg.seed);
  std::vector<const Example*> order = pointers(train_set);

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best = snapshot(model);
  int epochs_without_improvement = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double weighted = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const Batch batch = make_batch(std::span(order).subspan(start, end - start));
      const auto n = static_cast<std::size_t>(batch.inputs.valid_count());
      if (n == 0) continue;

      const std::vector<Matrix> last_finite = snapshot(model);
      Model::Cache cache;
      const BatchTensor probs = model.forward(batch.inputs, cache);
      const LossAndGradient lg = masked_cross_entropy(probs, batch.gold);
      model.zero_grad();
      try {
        if (!std::isfinite(lg.loss)) throw NumericError("loss is not finite");
        model.backward(cache, lg.gradient);
        adam_step(params, adam, cfg.learning_rate);
        for (const Parameter* p : params) require_finite(p->value, p->name);
      } catch (const NumericError& e) {
        restore(model, last_finite);
        throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": " + e.what(), result.curve);
      }
      weighted += lg.loss * static_cast<double>(n);
      tokens += n;
    }

    const double val_loss = dataset_loss(model, validation_set, cfg.batch_size);
    result.curve.push_back(LossRecord{epoch, weighted / static_cast<double>(tokens), val_loss});
    if (!std::isfinite(val_loss)) {
      restore(model, best);
      throw TrainingDiverged("validation loss diverged in epoch " + std::to_string(epoch), result.curve);
    }
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      best = snapshot(model);
      epochs_without_improvement = 0;
    } else if (cfg.early_stopping && ++epochs_without_improvement > cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model, best);
  return result;
}

TrainResult train(Model& model, std::vector<Example> examples, const TrainConfig& cfg) {
  cfg.validate();
  EssaySplit split = split_by_essay(std::move(examples), cfg.val_fraction, cfg.seed);
  return train(model, split.train, split.validation, cfg);
}

MetricsReport metrics_from_labels(std::span<const std::vector<Label>> gold,
                                  std::span<const std::vector<Label>> predicted) {
  if (gold.size() != predicted.size()) throw DimensionError("metrics: gold and predicted sequence counts differ");
  MetricsReport r;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (gold[s].size() != predicted[s].size()) {
      throw DimensionError("metrics: sequence " + std::to_string(s) + " lengths differ");
    }
    for (std::size_t t = 0; t < gold[s].size(); ++t) {
      ++r.confusion[static_cast<std::size_t>(label_index(gold[s][t]))]
                   [static_cast<std::size_t>(label_index(predicted[s][t]))];
      ++r.tokens;
    }
  }
  std::size_t correct = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t tp = r.confusion[c][c];
    std::size_t support = 0;
    std::size_t predicted_count = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      support += r.confusion[c][k];
      predicted_count += r.confusion[k][c];
    }
    ClassScores& s = r.per_class[c];
    s.support = support;
    s.precision = predicted_count == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted_count);
    s.recall = support == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(support);
    s.f1 = (s.precision + s.recall) == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    correct += tp;
  }
  if (r.tokens > 0) {
    for (const ClassScores& s : r.per_class) {
      r.weighted_f1 += static_cast<double>(s.support) / static_cast<double>(r.tokens) * s.f1;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.tokens);
  }
  return r;
}

MetricsReport evaluate(const Model& model, std::span<const Example> examples, int batch_size) {
  std::vector<std::vector<Label>> gold;
  std::vector<std::vector<Label>> predicted;
  const auto ptrs = pointers(examples);
  for (std::size_t start = 0; start < ptrs.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ptrs.size(), start + static_cast<std::size_t>(batch_size));
    const Batch batch = make_batch(std::span(ptrs).subspan(start, end - start));
    auto labels = predict_labels(model, batch.inputs);
    for (std::size_t b = 0; b < labels.size(); ++b) {
      gold.push_back(batch.gold[b]);
      predicted.push_back(std::move(labels[b]));
    }
  }
  return metrics_from_labels(gold, predicted);
}

double generalization_gap(const LossCurve& curve) {
  if (curve.empty()) throw ContractError("generalization_gap: empty loss curve");
  return curve.back().val_loss - curve.back().train_loss;
}

double sample_learning_rate(Rng& rng, double low, double high) {
  if (!(low > 0.0 && low < high)) throw ConfigError("lr range must satisfy 0 < low < high");
  std::uniform_real_distribution<double> exponent(std::log10(low), std::log10(high));
  return std::clamp(std::pow(10.0, exponent(rng)), low, high);
}

LrSearchResult lr_search(const ModelSpec& spec, std::span<const Example> train_set,
                         std::span<const Example> validation_set, const TrainConfig& base, int trials, double low,
                         double high) {
  if (trials < 1) throw ConfigError("lr_search: trials must be >= 1");
  LrSearchResult result;
  Rng rng(base.seed ^ 0x5deece66dULL);
  std::optional<std::size_t> best;
  for (int trial = 0; trial < trials; ++trial) {
    LrTrial t;
    t.learning_rate = sample_learning_rate(rng, low, high);
    t.seed = base.seed + 7919ULL * static_cast<std::uint64_t>(trial + 1);
    ModelSpec trial_spec = spec;
    trial_spec.seed = t.seed;
    Model model(trial_spec);
    TrainConfig cfg = base;
    cfg.learning_rate = t.learning_rate;
    cfg.seed = t.seed;
    try {
      t.best_val_loss = train(model, train_set, validation_set, cfg).best_val_loss;
    } catch (const TrainingDiverged& e) {
      t.diverged = true;
      t.best_val_loss = std::numeric_limits<double>::quiet_NaN();
      t.note = e.what();
    }
    result.trials.push_back(t);
    if (!t.diverged && (!best || t.best_val_loss < result.trials[*best].best_val_loss)) {
      best = result.trials.size() - 1;
    }
  }
  if (!best) {
    std::string outcomes;
    for (const LrTrial& t : result.trials) outcomes += "\n  lr=" + std::to_string(t.learning_rate) + ": " + t.note;
    throw NumericError("lr_search: every trial diverged" + outcomes);
  }
  result.best = base;
  result.best.learning_rate = result.trials[*best].learning_rate;
  result.best.seed = result.trials[*best].seed;
  return result;
}

std::string format_metrics_row(const MetricsRow& row) {
  std::ostringstream out;
  out << row.arch << ',' << row.embedding << ',' << row.seed << ',' << std::setprecision(6) << row.learning_rate
      << ',' << std::fixed << std::setprecision(4) << row.report.weighted_f1 << ',' << row.report.accuracy << ','
      << row.report.per_class[0].f1 << ',' << row.report.per_class[1].f1 << ',' << row.report.per_class[2].f1 << ','
      << row.gap;
  return out.str();
}

void append_metrics_csv(const std::filesystem::path& path, const MetricsRow& row) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open " + path.string() + " for appending");
  if (fresh) out << kMetricsCsvHeader << '\n';
  out << format_metrics_row(row) << '\n';
}

void write_loss_curve(std::ostream& out, const LossCurve& curve) {
  out << "epoch,train_loss,val_loss\n";
  out << std::setprecision(17);
  for (const LossRecord& r : curve) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << '\n';
}

void save_loss_curve(const std::filesystem::path& path, const LossCurve& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_loss_curve(out, curve);
}

LossCurve read_loss_curve(std::istream& in) {
  LossCurve curve;
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_loss") throw FormatError("loss curve: bad header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    LossRecord r;
    char c1 = 0;
    char c2 = 0;
    if (!(fields >> r.epoch >> c1 >> r.train_loss >> c2 >> r.val_loss) || c1 != ',' || c2 != ',') {
      throw FormatError("loss curve: bad row '" + line + "'");
    }
    curve.push_back(r);
  }
  return curve;
}

}  // namespace amseg
