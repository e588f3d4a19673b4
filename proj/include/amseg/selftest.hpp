#pragma once

// Verification helpers shared by the `selftest` command and the test suites:
// random padded batches, attention invariant probes, and the bundled
// round-trip fixture.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "amseg/corpus.hpp"
#include "amseg/gradcheck.hpp"
#include "amseg/layers.hpp"
#include "amseg/model.hpp"

namespace amseg {

// Standard-normal features; sequence b has lengths[b] valid tokens and the
// batch is padded to the longest.
BatchTensor random_batch(const std::vector<Eigen::Index>& lengths, Eigen::Index features, Rng& rng,
                         double stddev = 1.0);

// Reorders the first `perm.size()` tokens of every sequence: out[t] = in[perm[t]].
BatchTensor permute_tokens(const BatchTensor& x, const std::vector<Eigen::Index>& perm);

// max |layer(perm(x)) - perm(layer(x))| for a random permutation of the
// shortest sequence's valid prefix.
template <Differentiable Layer>
double permutation_equivariance_error(const Layer& layer, const BatchTensor& x, Rng& rng);

// Worst deviation from 1 of valid attention rows, and the largest weight on a
// padded key (should be exactly 0).
struct StochasticityReport {
  double max_row_sum_error = 0.0;
  double max_padded_weight = 0.0;
};
StochasticityReport attention_stochasticity(const AdditiveSelfAttention::Cache& cache);
StochasticityReport attention_stochasticity(const MultiHeadSelfAttention::Cache& cache, int heads);

// Layer wrapper whose backward scales every gradient by `factor`, used to
// confirm that grad_check notices a broken backward pass.
template <Differentiable Inner>
struct PerturbedBackward {
  using Cache = typename Inner::Cache;
  Inner inner;
  double factor = 1.01;

  BatchTensor forward(const BatchTensor& x, Cache& cache) const { return inner.forward(x, cache); }
  BatchTensor backward(const Cache& cache, const BatchTensor& dy) {
    BatchTensor dx = inner.backward(cache, dy);
    dx.values() *= factor;
    for (Parameter* p : inner.parameters()) p->grad *= factor;
    return dx;
  }
  ParameterRefs parameters() { return inner.parameters(); }
};

// Bundled brat fixture used by the self-test BIO round trip.
struct FixtureEssay {
  Essay essay;
  std::string ann;
};
const std::vector<FixtureEssay>& bundled_fixture();

// True when the BIO labels of `tokens` reproduce exactly the token coverage of
// every span.
bool bio_round_trip_exact(std::span<const Token> tokens, std::span<const AnnotationSpan> spans);

// Rebuilds `text` from its tokens plus the inter-token gaps; equals `text`
// exactly when token offsets and surfaces are consistent.
std::string reconstruct_text(std::string_view text, std::span<const Token> tokens);

struct SelfTestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfTestReport {
  std::vector<SelfTestCheck> checks;
  bool passed() const;
};

using SelfTestLog = std::function<void(const SelfTestCheck&)>;

SelfTestReport run_selftest(std::uint64_t seed = 7, const SelfTestLog& log = {});

// Small model specs used for full-architecture gradient checks.
ModelSpec tiny_spec(ArchitectureId arch, Eigen::Index input_dim, std::uint64_t seed);

template <Differentiable Layer>
double permutation_equivariance_error(const Layer& layer, const BatchTensor& x, Rng& rng) {
  Eigen::Index shortest = x.time();
  for (Eigen::Index b = 0; b < x.batch(); ++b) shortest = std::min(shortest, x.length(b));
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(shortest));
  for (Eigen::Index t = 0; t < shortest; ++t) perm[static_cast<std::size_t>(t)] = t;
  std::shuffle(perm.begin(), perm.end(), rng);

  // Only the common valid prefix is permuted, so every sequence must be
  // exactly `shortest` long for the identity to hold; trim longer ones.
  BatchTensor trimmed(x.batch(), x.time(), x.features());
  for (Eigen::Index b = 0; b < x.batch(); ++b) {
    for (Eigen::Index t = 0; t < shortest; ++t) {
      trimmed.token(b, t) = x.token(b, t);
      trimmed.set_valid(b, t, true);
    }
  }
  typename Layer::Cache c1;
  typename Layer::Cache c2;
  const BatchTensor direct = permute_tokens(layer.forward(trimmed, c1), perm);
  const BatchTensor permuted = layer.forward(permute_tokens(trimmed, perm), c2);
  return (direct.values() - permuted.values()).cwiseAbs().maxCoeff();
}

}  // namespace amseg
