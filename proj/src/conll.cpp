#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>

#include "amseg/corpus.hpp"
#include "amseg/error.hpp"

namespace amseg {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t pos = 0;
  while (true) {
    const auto tab = line.find('\t', pos);
    fields.push_back(line.substr(pos, tab == std::string_view::npos ? std::string_view::npos : tab - pos));
    if (tab == std::string_view::npos) break;
    pos = tab + 1;
  }
  return fields;
}

std::size_t field_number(std::string_view s, std::size_t line_no, const char* what) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("sequence file line " + std::to_string(line_no) + ": bad " + what + " '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

void write_sequences(std::ostream& out, std::span<const LabeledSequence> sequences) {
  bool first = true;
  for (const LabeledSequence& seq : sequences) {
    if (!first) out << '\n';
    first = false;
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const Token& t = seq.tokens[k];
      out << t.text << '\t' << seq.essay_id << '\t' << seq.sequence_index << '\t' << t.start << '\t' << t.end << '\t'
          << label_name(seq.labels[k]) << '\n';
    }
  }
}

std::vector<LabeledSequence> read_sequences(std::istream& in) {
  std::vector<LabeledSequence> sequences;
  LabeledSequence current;
  auto flush = [&] {
    if (!current.tokens.empty()) sequences.push_back(std::move(current));
    current = LabeledSequence{};
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    const auto fields = split_tabs(line);
    if (fields.size() != 6) {
      throw FormatError("sequence file line " + std::to_string(line_no) + ": expected 6 tab-separated fields, got " +
                        std::to_string(fields.size()));
    }
    const std::string essay_id(fields[1]);
    const std::size_t seq_idx = field_number(fields[2], line_no, "sequence index");
    if (current.tokens.empty()) {
      current.essay_id = essay_id;
      current.sequence_index = seq_idx;
    } else if (current.essay_id != essay_id || current.sequence_index != seq_idx) {
      throw FormatError("sequence file line " + std::to_string(line_no) +
                        ": sequence changes without a separating blank line");
    }
    const auto label = parse_label(fields[5]);
    if (!label) {
      throw FormatError("sequence file line " + std::to_string(line_no) + ": unknown label '" + std::string(fields[5]) +
                        "'");
    }
    current.tokens.push_back(Token{std::string(fields[0]), field_number(fields[3], line_no, "start"),
                                   field_number(fields[4], line_no, "end")});
    current.labels.push_back(*label);
  }
  flush();

  // Sentence coordinates are derived per essay from its ordered sequences.
  std::size_t begin = 0;
  while (begin < sequences.size()) {
    std::size_t end = begin + 1;
    while (end < sequences.size() && sequences[end].essay_id == sequences[begin].essay_id) ++end;
    assign_sentence_coordinates(std::span(sequences).subspan(begin, end - begin));
    begin = end;
  }
  return sequences;
}

void save_sequences(const std::filesystem::path& path, std::span<const LabeledSequence> sequences) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_sequences(out, sequences);
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<LabeledSequence> load_sequences(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open sequence file " + path.string());
  return read_sequences(in);
}

}  // namespace amseg
