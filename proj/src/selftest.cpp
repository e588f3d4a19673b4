#include "amseg/selftest.hpp"

#include <map>
#include <sstream>

namespace amseg {

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kInvariantTolerance = 1e-9;

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace

BatchTensor random_batch(const std::vector<Eigen::Index>& lengths, Eigen::Index features, Rng& rng, double stddev) {
  std::vector<Matrix> seqs;
  for (Eigen::Index len : lengths) seqs.push_back(random_normal(len, features, rng, stddev));
  return BatchTensor::from_sequences(seqs);
}

BatchTensor permute_tokens(const BatchTensor& x, const std::vector<Eigen::Index>& perm) {
  BatchTensor out = x;
  for (Eigen::Index b = 0; b < x.batch(); ++b) {
    for (std::size_t t = 0; t < perm.size(); ++t) out.token(b, static_cast<Eigen::Index>(t)) = x.token(b, perm[t]);
  }
  return out;
}

namespace {

void accumulate_stochasticity(StochasticityReport& r, const Matrix& weights, Eigen::Index length) {
  for (Eigen::Index t = 0; t < length; ++t) {
    r.max_row_sum_error = std::max(r.max_row_sum_error, std::abs(weights.row(t).sum() - 1.0));
    if (weights.row(t).minCoeff() < 0.0) r.max_row_sum_error = std::max(r.max_row_sum_error, 1.0);
    if (length < weights.cols()) {
      r.max_padded_weight =
          std::max(r.max_padded_weight, weights.row(t).tail(weights.cols() - length).cwiseAbs().maxCoeff());
    }
  }
}

}  // namespace

StochasticityReport attention_stochasticity(const AdditiveSelfAttention::Cache& cache) {
  StochasticityReport r;
  for (std::size_t b = 0; b < cache.weights.size(); ++b) accumulate_stochasticity(r, cache.weights[b], cache.lengths[b]);
  return r;
}

StochasticityReport attention_stochasticity(const MultiHeadSelfAttention::Cache& cache, int heads) {
  StochasticityReport r;
  for (std::size_t k = 0; k < cache.weights.size(); ++k) {
    accumulate_stochasticity(r, cache.weights[k], cache.lengths[k / static_cast<std::size_t>(heads)]);
  }
  return r;
}

const std::vector<FixtureEssay>& bundled_fixture() {
  static const std::vector<FixtureEssay> fixture = {
      {Essay{"fixture001",
             "Cloning is wrong\n\nSome people believe state-of-the-art science will save us. However, cloning "
             "humans is wrong, because it violates the dignity of every person!\nMoreover, the technology "
             "isn’t safe yet. Thus governments should ban it.\n"},
       "T1\tClaim 86 109\tcloning humans is wrong\n"
       "T2\tPremise 119 158\tit violates the dignity of every person\n"
       "T3\tPremise 170 199\tthe technology isn’t safe yet\n"
       "T4\tMajorClaim 206 231\tgovernments should ban it\n"
       "A1\tStance T2 For\n"
       "R1\tsupports Arg1:T3 Arg2:T2\n"},
      {Essay{"fixture002",
             "Does tourism help local communities?\n\nTourism brings money. It also brings jobs to remote regions, "
             "which is why I support it.\nCritics argue otherwise. They say it damages the environment; for "
             "example, coastal reefs suffer from crowds.\n"},
       "T1\tMajorClaim 38 97\tTourism brings money. It also brings jobs to remote regions\n"
       "T2\tClaim 151 186\tThey say it damages the environment\n"
       "T3\tPremise 188 233\tfor example, coastal reefs suffer from crowds\n"},
  };
  return fixture;
}

bool bio_round_trip_exact(std::span<const Token> tokens, std::span<const AnnotationSpan> spans) {
  const std::vector<Label> labels = bio_label(tokens, spans);
  std::vector<std::pair<std::size_t, std::size_t>> expected;
  for (const AnnotationSpan& s : spans) {
    std::size_t first = tokens.size();
    std::size_t last = 0;
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      if (tokens[k].start < s.end && s.start < tokens[k].end) {
        first = std::min(first, k);
        last = k + 1;
      }
    }
    if (first < last) expected.emplace_back(first, last);
  }
  return units_from_labels(labels) == expected;
}

std::string reconstruct_text(std::string_view text, std::span<const Token> tokens) {
  const std::u32string chars = decode_utf8(text);
  std::string rebuilt;
  std::size_t cp = 0;
  for (const Token& t : tokens) {
    rebuilt += encode_utf8(std::u32string_view(chars).substr(cp, t.start - cp));
    rebuilt += t.text;
    cp = t.end;
  }
  rebuilt += encode_utf8(std::u32string_view(chars).substr(cp));
  return rebuilt;
}

bool SelfTestReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const SelfTestCheck& c) { return c.passed; });
}

ModelSpec tiny_spec(ArchitectureId arch, Eigen::Index input_dim, std::uint64_t seed) {
  ModelSpec spec = ModelSpec::for_architecture(arch, input_dim, seed);
  spec.hidden = 3;
  spec.inter_stage_dim = 4;
  spec.attention_width = 4;
  return spec;
}

SelfTestReport run_selftest(std::uint64_t seed, const SelfTestLog& log) {
  SelfTestReport report;
  auto add = [&](std::string name, bool passed, std::string detail) {
    report.checks.push_back(SelfTestCheck{std::move(name), passed, std::move(detail)});
    if (log) log(report.checks.back());
  };
  Rng rng(seed);
  const std::vector<Eigen::Index> lengths = {3, 2};

  auto grad_entry = [&](const std::string& name, auto& layer, const BatchTensor& x) {
    GradCheckOptions opts;
    opts.seed = seed;
    try {
      const GradCheckReport r = grad_check(layer, x, opts);
      add("grad_check " + name, r.max_relative_error < kGradTolerance,
          "max rel err " + fmt(r.max_relative_error) + " at " + r.worst_entry);
    } catch (const Error& e) {
      add("grad_check " + name, false, e.what());
    }
  };

  {
    BiLstm layer("bilstm", 4, 3, rng);
    const BatchTensor x = random_batch(lengths, 4, rng);
    grad_entry("bilstm", layer, x);
  }
  {
    Projection layer("projection", 4, 3, rng);
    const BatchTensor x = random_batch(lengths, 4, rng);
    grad_entry("projection", layer, x);
  }
  {
    AdditiveSelfAttention layer("additive", 4, 5, rng);
    const BatchTensor x = random_batch(lengths, 4, rng);
    grad_entry("additive_attention", layer, x);
  }
  {
    MultiHeadSelfAttention layer("mha", 6, 2, rng);
    const BatchTensor x = random_batch(lengths, 6, rng);
    grad_entry("multi_head_attention", layer, x);
  }
  {
    DenseSoftmax layer("dense", 4, rng);
    const BatchTensor x = random_batch(lengths, 4, rng);
    grad_entry("dense_softmax", layer, x);
  }
  for (ArchitectureId arch : kAllArchitectures) {
    Model model(tiny_spec(arch, 6, seed));
    const BatchTensor x = random_batch(lengths, 6, rng);
    grad_entry("model " + std::string(to_string(arch)), model, x);
  }

  {
    PerturbedBackward<Projection> broken{Projection("broken", 4, 3, rng)};
    const BatchTensor x = random_batch(lengths, 4, rng);
    GradCheckOptions opts;
    opts.seed = seed;
    const GradCheckReport r = grad_check(broken, x, opts);
    add("harness detects perturbed backward", r.max_relative_error > kGradTolerance,
        "max rel err " + fmt(r.max_relative_error));
  }

  for (const FixtureEssay& f : bundled_fixture()) {
    try {
      const auto spans = parse_brat(f.ann, f.essay.text);
      const auto tokens = tokenize(f.essay.text);
      add("bio round trip " + f.essay.id, bio_round_trip_exact(tokens, spans),
          std::to_string(spans.size()) + " spans over " + std::to_string(tokens.size()) + " tokens");
      const std::string rebuilt = reconstruct_text(f.essay.text, tokens);
      std::size_t byte = 0;
      for (const Token& t : tokens) byte += t.text.size();
      add("tokenization reconstructs " + f.essay.id, rebuilt == f.essay.text,
          std::to_string(byte) + " token bytes");
    } catch (const Error& e) {
      add("bio round trip " + f.essay.id, false, e.what());
    }
  }

  {
    const BatchTensor x = random_batch({5, 4}, 6, rng);
    AdditiveSelfAttention additive("additive", 6, 8, rng);
    MultiHeadSelfAttention multi("mha", 6, 3, rng);
    const double e1 = permutation_equivariance_error(additive, x, rng);
    const double e2 = permutation_equivariance_error(multi, x, rng);
    add("additive attention permutation equivariance", e1 <= kInvariantTolerance, "max abs err " + fmt(e1));
    add("multi-head attention permutation equivariance", e2 <= kInvariantTolerance, "max abs err " + fmt(e2));

    AdditiveSelfAttention::Cache ca;
    additive.forward(x, ca);
    MultiHeadSelfAttention::Cache cm;
    multi.forward(x, cm);
    const StochasticityReport s1 = attention_stochasticity(ca);
    const StochasticityReport s2 = attention_stochasticity(cm, multi.heads());
    add("additive attention row-stochastic", s1.max_row_sum_error <= kInvariantTolerance && s1.max_padded_weight == 0.0,
        "row sum err " + fmt(s1.max_row_sum_error) + ", padded weight " + fmt(s1.max_padded_weight));
    add("multi-head attention row-stochastic",
        s2.max_row_sum_error <= kInvariantTolerance && s2.max_padded_weight == 0.0,
        "row sum err " + fmt(s2.max_row_sum_error) + ", padded weight " + fmt(s2.max_padded_weight));
  }
  return report;
}

}  // namespace amseg
