// amseg: argumentative unit segmentation toolkit.
//
//   amseg convert  --corpus DIR --split CSV [--granularity paragraph|sentence] --out DIR
//   amseg train    --arch sb --embeddings SPEC --train FILE [--lr X | --lr-search N] --out DIR
//   amseg evaluate --checkpoint FILE --test FILE --embeddings SPEC --out DIR
//   amseg predict  --checkpoint FILE --input FILE --embeddings SPEC --output FILE
//   amseg selftest
//
// Exit codes: 0 ok, 1 runtime or I/O failure, 2 usage error.

#include <zlib.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "amseg/corpus.hpp"
#include "amseg/embeddings.hpp"
#include "amseg/model.hpp"
#include "amseg/selftest.hpp"
#include "amseg/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string hex32(std::uint32_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(8) << std::setfill('0') << v;
  return s.str();
}

std::string exact(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::uint32_t crc_of(std::string_view bytes, std::uint32_t seed = 0) {
  uLong crc = seed;
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw amseg::IoError("cannot open " + path.string());
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || in.gcount() > 0) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(in.gcount()));
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t directory_checksum(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint32_t crc = 0;
  for (const fs::path& f : files) {
    crc = crc_of(f.filename().string(), crc);
    crc = crc_of(hex32(file_checksum(f)), crc);
  }
  return crc;
}

// One manifest per run; the id hashes everything that determines outputs.
class RunManifest {
 public:
  explicit RunManifest(std::string command) {
    doc_["command"] = std::move(command);
    doc_["started_at"] = utc_now();
    doc_["inputs"] = json::object();
    doc_["artifacts"] = json::array();
  }
  json& config() { return doc_["config"]; }
  void input(const std::string& role, const fs::path& path, std::uint32_t checksum) {
    doc_["inputs"][role] = {{"path", path.string()}, {"crc32", hex32(checksum)}};
  }
  void set(const std::string& key, json value) { doc_[key] = std::move(value); }
  void artifact(const fs::path& path) { doc_["artifacts"].push_back(path.string()); }

  std::string id() const {
    const json keyed = {{"command", doc_["command"]}, {"config", doc_.value("config", json())},
                        {"inputs", doc_["inputs"]}};
    return hex32(crc_of(keyed.dump()));
  }

  void write(const fs::path& path) {
    doc_["id"] = id();
    doc_["finished_at"] = utc_now();
    std::ofstream out(path);
    if (!out) throw amseg::IoError("cannot write manifest " + path.string());
    out << doc_.dump(2) << '\n';
  }

 private:
  json doc_;
};

void record_embeddings(RunManifest& manifest, const amseg::EmbeddingSpec& spec, const fs::path& spec_path) {
  manifest.input("embedding_spec", spec_path, file_checksum(spec_path));
  json sources = json::array();
  for (const auto& s : spec.sources) {
    sources.push_back({{"type", s.kind == amseg::EmbeddingSource::Kind::Glove ? "glove" : "precomputed"},
                       {"path", s.path.string()}});
  }
  manifest.set("embedding_spec", {{"name", spec.name}, {"dim", spec.expected_dim}, {"sources", sources}});
}

struct Options {
  // convert
  std::string corpus_dir;
  std::string split_csv;
  std::string granularity = "paragraph";
  // train / evaluate / predict
  std::string arch;
  std::string embeddings;
  std::string train_file;
  std::string test_file;
  std::string input_file;
  std::string output_file;
  std::string checkpoint;
  std::string results;
  int batch_size = 64;
  double lr = 1e-3;
  int lr_search = 0;
  std::uint64_t seed = 0;
  int max_epochs = 100;
  int patience = 10;
  double val_fraction = 0.1;
  long hidden = 64;
  long inter_stage_dim = 4;
  int heads_cap = 6;
  std::string out = ".";
};

int cmd_convert(const Options& o) {
  const fs::path corpus(o.corpus_dir);
  const auto granularity =
      o.granularity == "sentence" ? amseg::Granularity::Sentence : amseg::Granularity::Paragraph;

  // Everything is loaded and validated before any output file is created.
  const auto essays = amseg::load_corpus_dir(corpus);
  const amseg::SplitSpec split = amseg::load_split(amseg::read_file(o.split_csv));
  std::vector<std::string> ids;
  for (const auto& e : essays) ids.push_back(e.essay.id);
  amseg::validate_split(split, ids);

  std::vector<amseg::LabeledSequence> train;
  std::vector<amseg::LabeledSequence> test;
  std::size_t relabeled = 0;
  for (const auto& ce : essays) {
    amseg::SequenceBuild build;
    try {
      build = amseg::build_sequences(ce.essay, ce.spans, granularity);
    } catch (const amseg::CorpusError& e) {
      throw amseg::CorpusError(ce.essay.id + ": " + e.what());
    }
    relabeled += build.relabeled_boundaries;
    auto& target = split.assignment.at(ce.essay.id) == amseg::Subset::Train ? train : test;
    for (auto& s : build.sequences) target.push_back(std::move(s));
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  amseg::save_sequences(out / "train.seq", train);
  amseg::save_sequences(out / "test.seq", test);

  auto token_count = [](const auto& seqs) {
    std::size_t n = 0;
    for (const auto& s : seqs) n += s.size();
    return n;
  };
  auto hist_json = [](const amseg::LabelHistogram& h) { return json{{"B", h.b}, {"I", h.i}, {"O", h.o}}; };
  const std::size_t train_tokens = token_count(train);
  const std::size_t test_tokens = token_count(test);
  const json report = {
      {"essays", essays.size()},
      {"train_essays", split.ids(amseg::Subset::Train).size()},
      {"test_essays", split.ids(amseg::Subset::Test).size()},
      {"granularity", o.granularity},
      {"train_sequences", train.size()},
      {"test_sequences", test.size()},
      {"train_tokens", train_tokens},
      {"test_tokens", test_tokens},
      {"train_test_token_ratio",
       test_tokens == 0 ? 0.0 : static_cast<double>(train_tokens) / static_cast<double>(test_tokens)},
      {"train_labels", hist_json(amseg::histogram(train))},
      {"test_labels", hist_json(amseg::histogram(test))},
      {"boundary_relabels", relabeled},
  };
  {
    std::ofstream r(out / "conversion_report.json");
    r << report.dump(2) << '\n';
  }

  RunManifest manifest("convert");
  manifest.config() = {{"granularity", o.granularity}};
  manifest.input("corpus", corpus, directory_checksum(corpus));
  manifest.input("split", o.split_csv, file_checksum(o.split_csv));
  manifest.set("corpus_checksum", hex32(directory_checksum(corpus)));
  for (const char* f : {"train.seq", "test.seq", "conversion_report.json"}) manifest.artifact(out / f);
  manifest.write(out / "manifest.json");

  std::cout << "converted " << essays.size() << " essays: " << train.size() << " train / " << test.size()
            << " test sequences, " << relabeled << " boundary relabels\n";
  return 0;
}

amseg::Embedder load_embedder(const std::string& spec_path, std::span<const amseg::LabeledSequence> sequences,
                              amseg::EmbeddingSpec& spec) {
  spec = amseg::load_embedding_spec(spec_path);
  const auto vocab = amseg::vocabulary_of(sequences);
  return amseg::Embedder::load(spec, &vocab);
}

int cmd_train(const Options& o) {
  const auto arch = amseg::parse_architecture(o.arch);
  if (!arch) {
    std::cerr << "unknown architecture '" << o.arch << "'\n";
    return kExitUsage;
  }
  const auto sequences = amseg::load_sequences(o.train_file);
  amseg::EmbeddingSpec emb_spec;
  const amseg::Embedder embedder = load_embedder(o.embeddings, sequences, emb_spec);
  amseg::LookupStats stats;
  auto examples = amseg::make_examples(embedder, sequences, &stats);

  amseg::TrainConfig cfg;
  cfg.batch_size = o.batch_size;
  cfg.max_epochs = o.max_epochs;
  cfg.patience = o.patience;
  cfg.learning_rate = o.lr;
  cfg.val_fraction = o.val_fraction;
  cfg.seed = o.seed;
  cfg.validate();

  amseg::ModelSpec spec = amseg::ModelSpec::for_architecture(*arch, embedder.dim(), o.seed);
  spec.hidden = o.hidden;
  spec.inter_stage_dim = o.inter_stage_dim;
  spec.heads_cap = o.heads_cap;

  amseg::EssaySplit split = amseg::split_by_essay(std::move(examples), cfg.val_fraction, cfg.seed);

  const fs::path out(o.out);
  fs::create_directories(out);
  RunManifest manifest("train");
  manifest.input("train", o.train_file, file_checksum(o.train_file));
  record_embeddings(manifest, emb_spec, o.embeddings);
  manifest.set("seed", o.seed);
  manifest.set("oov_rate", stats.oov_rate());

  if (o.lr_search > 0) {
    const amseg::LrSearchResult search = amseg::lr_search(spec, split.train, split.validation, cfg, o.lr_search);
    std::ofstream log(out / "lr_search.csv");
    log << "trial,lr,seed,best_val_loss,diverged\n" << std::setprecision(10);
    for (std::size_t k = 0; k < search.trials.size(); ++k) {
      const auto& t = search.trials[k];
      log << k << ',' << t.learning_rate << ',' << t.seed << ',' << t.best_val_loss << ',' << t.diverged << '\n';
    }
    cfg = search.best;
    spec.seed = cfg.seed;
    manifest.artifact(out / "lr_search.csv");
    std::cout << "lr search: " << search.trials.size() << " trials, best lr " << cfg.learning_rate << '\n';
  }

  manifest.config() = {{"arch", amseg::to_string(*arch)}, {"batch_size", cfg.batch_size},
                       {"max_epochs", cfg.max_epochs}, {"patience", cfg.patience},
                       {"lr", cfg.learning_rate},      {"lr_search", o.lr_search},
                       {"val_fraction", cfg.val_fraction}, {"seed", cfg.seed},
                       {"hidden", spec.hidden},        {"inter_stage_dim", spec.inter_stage_dim},
                       {"heads_cap", spec.heads_cap}};

  amseg::Model model(spec);
  amseg::CheckpointMetadata meta = {{"embedding", emb_spec.name},
                                    {"lr", exact(cfg.learning_rate)},
                                    {"train_seed", std::to_string(cfg.seed)}};
  amseg::TrainResult result;
  try {
    result = amseg::train(model, split.train, split.validation, cfg);
  } catch (const amseg::TrainingDiverged& e) {
    meta["status"] = "diverged";
    amseg::save_checkpoint((out / "last_finite.ckpt").string(), model, meta);
    amseg::save_loss_curve(out / "loss_curve.csv", e.curve);
    throw;
  }
  const double gap = amseg::generalization_gap(result.curve);
  meta["gap"] = exact(gap);
  meta["best_epoch"] = std::to_string(result.best_epoch);

  amseg::save_checkpoint((out / "model.ckpt").string(), model, meta);
  amseg::save_loss_curve(out / "loss_curve.csv", result.curve);
  manifest.artifact(out / "model.ckpt");
  manifest.artifact(out / "loss_curve.csv");
  manifest.set("result", {{"epochs", result.curve.size()},
                          {"best_epoch", result.best_epoch},
                          {"best_val_loss", result.best_val_loss},
                          {"stopped_early", result.stopped_early},
                          {"generalization_gap", gap}});
  manifest.write(out / "manifest.json");

  std::cout << "trained " << amseg::display_name(*arch) << " on " << split.train.size() << " sequences ("
            << split.validation.size() << " validation), " << result.curve.size() << " epochs, best epoch "
            << result.best_epoch << ", best val loss " << result.best_val_loss << ", gap " << gap << ", OOV rate "
            << stats.oov_rate() << '\n';
  return 0;
}

int cmd_evaluate(const Options& o) {
  if (!fs::exists(o.checkpoint)) throw amseg::IoError("checkpoint " + o.checkpoint + " does not exist");
  const amseg::Checkpoint ckpt = amseg::load_checkpoint(o.checkpoint);
  const auto sequences = amseg::load_sequences(o.test_file);
  amseg::EmbeddingSpec emb_spec;
  const amseg::Embedder embedder = load_embedder(o.embeddings, sequences, emb_spec);
  if (embedder.dim() != ckpt.model.spec().input_dim) {
    throw amseg::ConfigError("checkpoint expects " + std::to_string(ckpt.model.spec().input_dim) +
                             "-dim inputs, embedding spec provides " + std::to_string(embedder.dim()));
  }
  amseg::LookupStats stats;
  const auto examples = amseg::make_examples(embedder, sequences, &stats);
  const amseg::MetricsReport report = amseg::evaluate(ckpt.model, examples, o.batch_size);

  auto meta_double = [&](const std::string& key) {
    const auto it = ckpt.metadata.find(key);
    return it == ckpt.metadata.end() ? 0.0 : std::stod(it->second);
  };
  amseg::MetricsRow row;
  row.arch = std::string(amseg::display_name(ckpt.model.spec().arch));
  row.embedding = ckpt.metadata.contains("embedding") ? ckpt.metadata.at("embedding") : emb_spec.name;
  row.seed = ckpt.model.spec().seed;
  row.learning_rate = meta_double("lr");
  row.report = report;
  row.gap = meta_double("gap");

  const fs::path out(o.out);
  fs::create_directories(out);
  const fs::path results = o.results.empty() ? out / "results.csv" : fs::path(o.results);
  amseg::append_metrics_csv(results, row);

  RunManifest manifest("evaluate");
  manifest.input("checkpoint", o.checkpoint, file_checksum(o.checkpoint));
  manifest.input("test", o.test_file, file_checksum(o.test_file));
  record_embeddings(manifest, emb_spec, o.embeddings);
  manifest.config() = {{"batch_size", o.batch_size}};
  manifest.set("seed", row.seed);
  manifest.set("oov_rate", stats.oov_rate());
  manifest.set("results_row", amseg::format_metrics_row(row));
  manifest.artifact(results);
  const fs::path manifest_path = out / ("manifest-evaluate-" + manifest.id() + ".json");
  manifest.write(manifest_path);

  std::cout << std::fixed << std::setprecision(4) << "weighted F1 " << report.weighted_f1 << "  accuracy "
            << report.accuracy << "  (" << report.tokens << " tokens)\n";
  for (amseg::Label l : amseg::kAllLabels) {
    const auto& s = report.per_class[static_cast<std::size_t>(amseg::label_index(l))];
    std::cout << "  " << amseg::label_name(l) << ": P " << s.precision << "  R " << s.recall << "  F1 " << s.f1
              << "  support " << s.support << '\n';
  }
  return 0;
}

int cmd_predict(const Options& o) {
  if (!fs::exists(o.checkpoint)) throw amseg::IoError("checkpoint " + o.checkpoint + " does not exist");
  const amseg::Checkpoint ckpt = amseg::load_checkpoint(o.checkpoint);
  auto sequences = amseg::load_sequences(o.input_file);
  amseg::EmbeddingSpec emb_spec;
  const amseg::Embedder embedder = load_embedder(o.embeddings, sequences, emb_spec);
  if (embedder.dim() != ckpt.model.spec().input_dim) {
    throw amseg::ConfigError("checkpoint expects " + std::to_string(ckpt.model.spec().input_dim) +
                             "-dim inputs, embedding spec provides " + std::to_string(embedder.dim()));
  }
  const auto examples = amseg::make_examples(embedder, sequences);
  for (std::size_t start = 0; start < examples.size(); start += static_cast<std::size_t>(o.batch_size)) {
    const std::size_t end = std::min(examples.size(), start + static_cast<std::size_t>(o.batch_size));
    std::vector<const amseg::Example*> members;
    for (std::size_t k = start; k < end; ++k) members.push_back(&examples[k]);
    const auto labels = amseg::predict_labels(ckpt.model, amseg::make_batch(members).inputs);
    for (std::size_t k = start; k < end; ++k) sequences[k].labels = labels[k - start];
  }
  amseg::save_sequences(o.output_file, sequences);
  std::cout << "labeled " << sequences.size() << " sequences -> " << o.output_file << '\n';
  return 0;
}

int cmd_selftest() {
  const auto started = std::chrono::steady_clock::now();
  const amseg::SelfTestReport report = amseg::run_selftest(7, [](const amseg::SelfTestCheck& c) {
    std::cout << (c.passed ? "PASS  " : "FAIL  ") << c.name << "  (" << c.detail << ")\n";
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  std::size_t failed = 0;
  for (const auto& c : report.checks) failed += c.passed ? 0 : 1;
  std::cout << report.checks.size() - failed << "/" << report.checks.size() << " checks passed in " << seconds
            << " s\n";
  return report.passed() ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Argumentative unit segmentation: corpus conversion, training, evaluation"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::string> arch_names = {"bl", "bl-i", "bl-e", "sb", "sb-i"};

  auto* convert = app.add_subcommand("convert", "Convert a brat corpus into train/test sequence files");
  convert->add_option("--corpus", o.corpus_dir, "Directory of .txt/.ann pairs")->required();
  convert->add_option("--split", o.split_csv, "Train/test split CSV (ID;SET)")->required();
  convert->add_option("--granularity", o.granularity)->check(CLI::IsMember({"paragraph", "sentence"}));
  convert->add_option("--out", o.out, "Output directory");

  auto add_training_flags = [&](CLI::App* cmd) {
    cmd->add_option("--batch-size", o.batch_size)->check(CLI::PositiveNumber);
    cmd->add_option("--lr", o.lr)->check(CLI::PositiveNumber);
    cmd->add_option("--lr-search", o.lr_search, "Random-search trials over [1e-4, 1e-2]")->check(CLI::NonNegativeNumber);
    cmd->add_option("--seed", o.seed);
    cmd->add_option("--max-epochs", o.max_epochs)->check(CLI::PositiveNumber);
    cmd->add_option("--patience", o.patience)->check(CLI::NonNegativeNumber);
    cmd->add_option("--val-fraction", o.val_fraction);
    cmd->add_option("--hidden", o.hidden)->check(CLI::PositiveNumber);
    cmd->add_option("--inter-stage-dim", o.inter_stage_dim)->check(CLI::PositiveNumber);
    cmd->add_option("--heads-cap", o.heads_cap)->check(CLI::PositiveNumber);
  };

  auto* train = app.add_subcommand("train", "Train one architecture");
  train->add_option("--arch", o.arch)->required()->check(CLI::IsMember(arch_names, CLI::ignore_case));
  train->add_option("--embeddings", o.embeddings, "Embedding spec (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--train", o.train_file, "Training sequence file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "Output directory");
  add_training_flags(train);

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint and append a results row");
  evaluate->add_option("--checkpoint", o.checkpoint)->required();
  evaluate->add_option("--test", o.test_file)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--embeddings", o.embeddings)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--out", o.out, "Output directory for results.csv and manifest");
  evaluate->add_option("--results", o.results, "Results CSV (default <out>/results.csv)");
  evaluate->add_option("--batch-size", o.batch_size)->check(CLI::PositiveNumber);

  auto* predict = app.add_subcommand("predict", "Label a sequence file with a checkpoint");
  predict->add_option("--checkpoint", o.checkpoint)->required();
  predict->add_option("--input", o.input_file)->required()->check(CLI::ExistingFile);
  predict->add_option("--embeddings", o.embeddings)->required()->check(CLI::ExistingFile);
  predict->add_option("--output", o.output_file)->required();
  predict->add_option("--batch-size", o.batch_size)->check(CLI::PositiveNumber);

  auto* selftest = app.add_subcommand("selftest", "Gradient checks, BIO round trip and attention invariants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (convert->parsed()) return cmd_convert(o);
    if (train->parsed()) return cmd_train(o);
    if (evaluate->parsed()) return cmd_evaluate(o);
    if (predict->parsed()) return cmd_predict(o);
    if (selftest->parsed()) return cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
