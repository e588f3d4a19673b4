#pragma once

// Per-token input vectors: GloVe tables, precomputed contextual vectors keyed
// by sentence coordinates, and ordered stacking of both.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "amseg/corpus.hpp"
#include "amseg/tensor.hpp"

namespace amseg {

inline constexpr Eigen::Index kGloveDim = 300;
inline constexpr Eigen::Index kBertDim = 3072;
inline constexpr Eigen::Index kFlairDim = 4196;

// "GloVe", "BERT" or "Flair" for the published input widths, empty otherwise.
std::string_view known_embedding_name(Eigen::Index dim);

std::string ascii_lower(std::string_view s);

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(Eigen::Index dim, bool lowercase_keys) : dim_(dim), lowercase_keys_(lowercase_keys) {}

  Eigen::Index dim() const { return dim_; }
  std::size_t size() const { return index_.size(); }
  bool lowercase_keys() const { return lowercase_keys_; }
  std::size_t duplicate_words() const { return duplicates_; }

  // Returns false (and counts a duplicate) when the word is already present.
  bool insert(const std::string& word, const RowVector& vector);
  bool contains(std::string_view word) const;
  // Case-folded lookup; out-of-vocabulary words map to the zero vector.
  RowVector lookup(std::string_view word) const;
  RowVector lookup(const Token& token) const { return lookup(token.text); }

 private:
  Eigen::Index dim_ = 0;
  bool lowercase_keys_ = true;
  std::size_t duplicates_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<RowVector> rows_;
};

// When `vocabulary` is given, only those (lowercased) words are kept.
EmbeddingTable load_glove(std::istream& in, const std::unordered_set<std::string>* vocabulary = nullptr);
EmbeddingTable load_glove(std::string_view content, const std::unordered_set<std::string>* vocabulary = nullptr);
EmbeddingTable load_glove_file(const std::filesystem::path& path,
                               const std::unordered_set<std::string>* vocabulary = nullptr);

struct SentenceKey {
  std::string essay_id;
  std::uint32_t sentence = 0;
  std::uint32_t token = 0;
  auto operator<=>(const SentenceKey&) const = default;
};

class PrecomputedStore {
 public:
  PrecomputedStore() = default;
  explicit PrecomputedStore(Eigen::Index dim) : dim_(dim) {}

  Eigen::Index dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  void insert(const SentenceKey& key, const RowVector& vector);
  const RowVector* find(const SentenceKey& key) const;
  const std::map<SentenceKey, RowVector>& entries() const { return vectors_; }

 private:
  Eigen::Index dim_ = 0;
  std::map<SentenceKey, RowVector> vectors_;
};

// Binary layout, little-endian: magic "AMSEGVEC", version u32, dim u32,
// count u64, then per record: id length u32 + UTF-8 id, sentence u32,
// token u32, dim x float64; finally CRC32 (u32) over the record bytes.
void write_precomputed(std::ostream& out, const PrecomputedStore& store);
PrecomputedStore read_precomputed(std::istream& in);
PrecomputedStore load_precomputed(std::string_view content);
void save_precomputed(const std::filesystem::path& path, const PrecomputedStore& store);
PrecomputedStore load_precomputed_file(const std::filesystem::path& path);

struct EmbeddingSource {
  enum class Kind { Glove, Precomputed };
  Kind kind = Kind::Glove;
  std::filesystem::path path;
};

struct EmbeddingSpec {
  std::string name;
  std::vector<EmbeddingSource> sources;
  Eigen::Index expected_dim = 0;
};

// JSON: {"name": "...", "dim": N, "sources": [{"type": "glove"|"precomputed",
// "path": "..."}]}. Relative paths resolve against `base_dir`.
EmbeddingSpec parse_embedding_spec(std::string_view json_text, const std::filesystem::path& base_dir = {});
EmbeddingSpec load_embedding_spec(const std::filesystem::path& path);

using LoadedSource = std::variant<EmbeddingTable, PrecomputedStore>;

struct LookupStats {
  std::size_t lookups = 0;
  std::size_t misses = 0;
  double oov_rate() const { return lookups == 0 ? 0.0 : static_cast<double>(misses) / static_cast<double>(lookups); }
};

class Embedder {
 public:
  // Throws ConfigError unless the source dims sum exactly to expected_dim.
  Embedder(EmbeddingSpec spec, std::vector<LoadedSource> sources);

  // Loads every source from disk; GloVe tables are filtered to `vocabulary`
  // when one is supplied.
  static Embedder load(const EmbeddingSpec& spec, const std::unordered_set<std::string>* vocabulary = nullptr);

  const EmbeddingSpec& spec() const { return spec_; }
  Eigen::Index dim() const { return spec_.expected_dim; }
  const std::vector<LoadedSource>& sources() const { return sources_; }

  // (tokens x dim) concatenation of source vectors in declared order.
  Matrix vectorize(const LabeledSequence& seq, LookupStats* stats = nullptr) const;

 private:
  EmbeddingSpec spec_;
  std::vector<LoadedSource> sources_;
};

std::unordered_set<std::string> vocabulary_of(std::span<const LabeledSequence> sequences);

}  // namespace amseg
