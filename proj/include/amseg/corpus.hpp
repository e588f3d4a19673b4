#pragma once

// Persuasive-essay corpus ingestion: brat standoff spans, tokenization,
// BIO labeling, sequence building and the train/test split.
//
// All character offsets count Unicode code points of the UTF-8 essay text,
// matching brat's offset convention.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amseg/labels.hpp"

namespace amseg {

struct Essay {
  std::string id;
  std::string text;
};

enum class UnitType { MajorClaim, Claim, Premise };

struct AnnotationSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  UnitType type = UnitType::Claim;
  bool operator==(const AnnotationSpan&) const = default;
};

struct Token {
  std::string text;
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const Token&) const = default;
};

struct LabeledSequence {
  std::string essay_id;
  std::size_t sequence_index = 0;
  std::vector<Token> tokens;
  std::vector<Label> labels;
  // Sentence coordinates per token, used to address precomputed vectors.
  std::vector<std::uint32_t> sentence_index;
  std::vector<std::uint32_t> token_in_sentence;

  std::size_t size() const { return tokens.size(); }
};

enum class Granularity { Paragraph, Sentence };
enum class Subset { Train, Test };

struct SplitSpec {
  std::map<std::string, Subset> assignment;

  std::vector<std::string> ids(Subset subset) const;
  bool contains(const std::string& id) const { return assignment.contains(id); }
};

std::u32string decode_utf8(std::string_view text);
std::string encode_utf8(std::u32string_view text);

std::vector<AnnotationSpan> parse_brat(std::string_view ann_content, std::string_view text);

std::vector<Token> tokenize(std::string_view text);

std::vector<Label> bio_label(std::span<const Token> tokens, std::span<const AnnotationSpan> spans);

// Token-index ranges [first, last) of the units encoded by a BIO sequence.
std::vector<std::pair<std::size_t, std::size_t>> units_from_labels(std::span<const Label> labels);

struct SequenceBuild {
  std::vector<LabeledSequence> sequences;
  // Sequence-initial I labels rewritten to B because a boundary cut a unit.
  std::size_t relabeled_boundaries = 0;
};

SequenceBuild build_sequences(const Essay& essay, std::span<const AnnotationSpan> spans, Granularity granularity);

// Recomputes sentence coordinates for the ordered sequences of one essay.
// A sentence starts at every sequence start and after ".", "!" or "?" when
// whitespace and an uppercase token follow, unless the next token is I.
void assign_sentence_coordinates(std::span<LabeledSequence> essay_sequences);

SplitSpec load_split(std::string_view csv_content);
// Throws SplitError for ids absent from the corpus or essays absent from the split.
void validate_split(const SplitSpec& split, std::span<const std::string> essay_ids);

struct CorpusEssay {
  Essay essay;
  std::vector<AnnotationSpan> spans;
};

// Loads every <id>.txt / <id>.ann pair in a directory, ordered by id.
std::vector<CorpusEssay> load_corpus_dir(const std::filesystem::path& dir);

// CoNLL-style sequence file: token, essay_id, seq_idx, start, end, label per
// line; blank line between sequences.
void write_sequences(std::ostream& out, std::span<const LabeledSequence> sequences);
std::vector<LabeledSequence> read_sequences(std::istream& in);
void save_sequences(const std::filesystem::path& path, std::span<const LabeledSequence> sequences);
std::vector<LabeledSequence> load_sequences(const std::filesystem::path& path);

struct LabelHistogram {
  std::size_t b = 0;
  std::size_t i = 0;
  std::size_t o = 0;
  std::size_t total() const { return b + i + o; }
  bool operator==(const LabelHistogram&) const = default;
};
LabelHistogram histogram(std::span<const LabeledSequence> sequences);

std::string read_file(const std::filesystem::path& path);

}  // namespace amseg
