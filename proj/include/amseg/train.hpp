#pragma once

// Masked cross-entropy, Adam, batching, early-stopped training, learning-rate
// search and the weighted-F1 evaluation protocol.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amseg/corpus.hpp"
#include "amseg/embeddings.hpp"
#include "amseg/model.hpp"

namespace amseg {

struct Example {
  Matrix features;  // tokens x input_dim
  std::vector<Label> labels;
  std::string essay_id;
};

std::vector<Example> make_examples(const Embedder& embedder, std::span<const LabeledSequence> sequences,
                                   LookupStats* stats = nullptr);

struct Batch {
  BatchTensor inputs;
  std::vector<std::vector<Label>> gold;
};

// Pads to the longest member of this batch only.
Batch make_batch(std::span<const Example* const> members);

struct LossAndGradient {
  double loss = 0.0;
  BatchTensor gradient;  // dL/d(probabilities); zero at padding
};

// Mean over valid tokens of -log p(gold).
LossAndGradient masked_cross_entropy(const BatchTensor& probs, const std::vector<std::vector<Label>>& gold);

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t step = 0;

  explicit AdamState(const ParameterRefs& params);
};

// Bias-corrected Adam update; throws NumericError naming the first parameter
// with a non-finite gradient, before touching any value.
void adam_step(const ParameterRefs& params, AdamState& state, double learning_rate);

struct TrainConfig {
  int batch_size = 64;
  int max_epochs = 100;
  int patience = 10;
  double learning_rate = 1e-3;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  bool early_stopping = true;

  void validate() const;
};

struct LossRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

using LossCurve = std::vector<LossRecord>;

struct TrainResult {
  LossCurve curve;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

// Raised when a loss or gradient turns non-finite; the model has already
// been restored to the last finite parameters.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, LossCurve curve) : NumericError(what), curve(std::move(curve)) {}
  LossCurve curve;
};

struct EssaySplit {
  std::vector<Example> train;
  std::vector<Example> validation;
};

// Holds out round(val_fraction * essays) whole essays (at least one, and at
// least one essay stays in training), chosen by a seeded shuffle.
EssaySplit split_by_essay(std::vector<Example> examples, double val_fraction, std::uint64_t seed);

TrainResult train(Model& model, std::span<const Example> train_set, std::span<const Example> validation_set,
                  const TrainConfig& cfg);
// Splits validation essays off `examples` first.
TrainResult train(Model& model, std::vector<Example> examples, const TrainConfig& cfg);

// Mean masked cross-entropy over a data set, batched.
double dataset_loss(const Model& model, std::span<const Example> examples, int batch_size = 64);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
  bool operator==(const ClassScores&) const = default;
};

struct MetricsReport {
  // confusion[gold][predicted], indexed by label_index.
  std::array<std::array<std::size_t, 3>, 3> confusion{};
  std::array<ClassScores, 3> per_class{};
  double weighted_f1 = 0.0;
  double accuracy = 0.0;
  std::size_t tokens = 0;

  bool operator==(const MetricsReport&) const = default;
};

MetricsReport metrics_from_labels(std::span<const std::vector<Label>> gold, std::span<const std::vector<Label>> predicted);
MetricsReport evaluate(const Model& model, std::span<const Example> examples, int batch_size = 64);

double generalization_gap(const LossCurve& curve);

double sample_learning_rate(Rng& rng, double low = 1e-4, double high = 1e-2);

struct LrTrial {
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
  double best_val_loss = 0.0;
  bool diverged = false;
  std::string note;
};

struct LrSearchResult {
  TrainConfig best;
  std::vector<LrTrial> trials;
};

// Random search over a log-uniform learning-rate range; each trial builds a
// fresh model from `spec` with its own seed and trains it with `base`.
LrSearchResult lr_search(const ModelSpec& spec, std::span<const Example> train_set,
                         std::span<const Example> validation_set, const TrainConfig& base, int trials = 4,
                         double low = 1e-4, double high = 1e-2);

inline constexpr std::string_view kMetricsCsvHeader = "arch,embedding,seed,lr,weighted_f1,accuracy,f1_B,f1_I,f1_O,gap";

struct MetricsRow {
  std::string arch;
  std::string embedding;
  std::uint64_t seed = 0;
  double learning_rate = 0.0;
  MetricsReport report;
  double gap = 0.0;
};

std::string format_metrics_row(const MetricsRow& row);
// Appends one row, writing the header first when the file is new or empty.
void append_metrics_csv(const std::filesystem::path& path, const MetricsRow& row);
void write_loss_curve(std::ostream& out, const LossCurve& curve);
void save_loss_curve(const std::filesystem::path& path, const LossCurve& curve);
LossCurve read_loss_curve(std::istream& in);

}  // namespace amseg
