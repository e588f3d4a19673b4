#include "amseg/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "amseg/error.hpp"

namespace amseg {

namespace {

constexpr char32_t kReplacement = 0xFFFD;

// Code points plus the byte offset where each one starts; one trailing entry
// holds the total byte length.
struct DecodedText {
  std::u32string chars;
  std::vector<std::size_t> byte_offset;
};

DecodedText decode_with_offsets(std::string_view text) {
  DecodedText out;
  out.chars.reserve(text.size());
  out.byte_offset.reserve(text.size() + 1);
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    int extra = 0;
    char32_t cp = 0;
    if (lead < 0x80) {
      cp = lead;
    } else if ((lead & 0xE0) == 0xC0) {
      extra = 1;
      cp = lead & 0x1F;
    } else if ((lead & 0xF0) == 0xE0) {
      extra = 2;
      cp = lead & 0x0F;
    } else if ((lead & 0xF8) == 0xF0) {
      extra = 3;
      cp = lead & 0x07;
    } else {
      extra = -1;
    }
    bool ok = extra >= 0 && i + static_cast<std::size_t>(extra) < text.size();
    for (int k = 1; ok && k <= extra; ++k) {
      const auto cont = static_cast<unsigned char>(text[i + static_cast<std::size_t>(k)]);
      if ((cont & 0xC0) != 0x80) {
        ok = false;
      } else {
        cp = (cp << 6) | (cont & 0x3F);
      }
    }
    out.byte_offset.push_back(i);
    if (ok) {
      out.chars.push_back(cp);
      i += static_cast<std::size_t>(extra) + 1;
    } else {
      out.chars.push_back(kReplacement);
      i += 1;
    }
  }
  out.byte_offset.push_back(text.size());
  return out;
}

bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\v' || c == U'\f' || c == 0x00A0 ||
         (c >= 0x2000 && c <= 0x200B) || c == 0x202F || c == 0x205F || c == 0x3000 || c == 0xFEFF;
}

bool is_word_char(char32_t c) {
  if (c < 0x80) {
    return (c >= U'0' && c <= U'9') || (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z');
  }
  if (is_space(c)) return false;
  if (c >= 0x00A1 && c <= 0x00BF) return false;  // Latin-1 punctuation and symbols
  if (c == 0x00D7 || c == 0x00F7) return false;
  if (c >= 0x2010 && c <= 0x206F) return false;  // general punctuation
  if (c >= 0x3000 && c <= 0x303F) return false;
  if (c == kReplacement) return false;
  return true;
}

bool is_joiner(char32_t c) { return c == U'\'' || c == U'-' || c == 0x2019; }

bool is_upper(char32_t c) { return (c >= U'A' && c <= U'Z') || (c >= 0x00C0 && c <= 0x00DE && c != 0x00D7); }

bool is_terminal_punct(const std::string& token) { return token == "." || token == "!" || token == "?"; }

bool starts_upper(const std::string& token) {
  const DecodedText d = decode_with_offsets(token);
  return !d.chars.empty() && is_upper(d.chars.front());
}

bool sentence_break(const Token& prev, const Token& next, Label next_label) {
  return is_terminal_punct(prev.text) && next.start > prev.end && starts_upper(next.text) && next_label != Label::I;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string unquote(std::string_view s) {
  std::string t = trim(s);
  if (t.size() >= 2 && t.front() == '"' && t.back() == '"') t = t.substr(1, t.size() - 2);
  return t;
}

std::size_t parse_offset(std::string_view s, std::size_t line_no) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw CorpusError("brat line " + std::to_string(line_no) + ": bad offset '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

std::u32string decode_utf8(std::string_view text) { return decode_with_offsets(text).chars; }

std::string encode_utf8(std::u32string_view text) {
  std::string out;
  for (char32_t c : text) {
    if (c < 0x80) {
      out += static_cast<char>(c);
    } else if (c < 0x800) {
      out += static_cast<char>(0xC0 | (c >> 6));
      out += static_cast<char>(0x80 | (c & 0x3F));
    } else if (c < 0x10000) {
      out += static_cast<char>(0xE0 | (c >> 12));
      out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (c & 0x3F));
    } else {
      out += static_cast<char>(0xF0 | (c >> 18));
      out += static_cast<char>(0x80 | ((c >> 12) & 0x3F));
      out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (c & 0x3F));
    }
  }
  return out;
}

std::vector<std::string> SplitSpec::ids(Subset subset) const {
  std::vector<std::string> out;
  for (const auto& [id, s] : assignment) {
    if (s == subset) out.push_back(id);
  }
  return out;
}

std::vector<AnnotationSpan> parse_brat(std::string_view ann_content, std::string_view text) {
  const DecodedText decoded = decode_with_offsets(text);
  const std::size_t length = decoded.chars.size();
  std::vector<AnnotationSpan> spans;

  std::istringstream in{std::string(ann_content)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() != 'T') continue;

    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) {
      throw CorpusError("brat line " + std::to_string(line_no) + ": expected three tab-separated fields");
    }
    const std::string_view body = std::string_view(line).substr(tab1 + 1, tab2 - tab1 - 1);
    const std::string_view surface = std::string_view(line).substr(tab2 + 1);

    const auto sp1 = body.find(' ');
    const std::string_view type_name = body.substr(0, sp1);
    UnitType type;
    if (type_name == "MajorClaim") {
      type = UnitType::MajorClaim;
    } else if (type_name == "Claim") {
      type = UnitType::Claim;
    } else if (type_name == "Premise") {
      type = UnitType::Premise;
    } else {
      continue;
    }
    if (sp1 == std::string_view::npos) {
      throw CorpusError("brat line " + std::to_string(line_no) + ": missing offsets");
    }
    const std::string_view offsets = body.substr(sp1 + 1);
    if (offsets.find(';') != std::string_view::npos) {
      throw CorpusError("brat line " + std::to_string(line_no) + ": discontinuous spans are not supported");
    }
    const auto sp2 = offsets.find(' ');
    if (sp2 == std::string_view::npos) {
      throw CorpusError("brat line " + std::to_string(line_no) + ": expected start and end offsets");
    }
    AnnotationSpan span{parse_offset(offsets.substr(0, sp2), line_no), parse_offset(offsets.substr(sp2 + 1), line_no),
                        type};
    if (!(span.start < span.end) || span.end > length) {
      throw CorpusError("brat line " + std::to_string(line_no) + ": offsets " + std::to_string(span.start) + ".." +
                        std::to_string(span.end) + " out of range for text of length " + std::to_string(length));
    }
    const std::size_t b0 = decoded.byte_offset[span.start];
    const std::size_t b1 = decoded.byte_offset[span.end];
    if (text.substr(b0, b1 - b0) != surface) {
      throw CorpusError("brat line " + std::to_string(line_no) + ": surface '" + std::string(surface) +
                        "' does not match text '" + std::string(text.substr(b0, b1 - b0)) + "'");
    }
    spans.push_back(span);
  }

  std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  for (std::size_t k = 1; k < spans.size(); ++k) {
    if (spans[k].start < spans[k - 1].end) {
      throw CorpusError("brat: overlapping spans " + std::to_string(spans[k - 1].start) + ".." +
                        std::to_string(spans[k - 1].end) + " and " + std::to_string(spans[k].start) + ".." +
                        std::to_string(spans[k].end));
    }
  }
  return spans;
}

std::vector<Token> tokenize(std::string_view text) {
  const DecodedText d = decode_with_offsets(text);
  const std::size_t n = d.chars.size();
  std::vector<Token> tokens;
  auto emit = [&](std::size_t start, std::size_t end) {
    const std::size_t b0 = d.byte_offset[start];
    tokens.push_back(Token{std::string(text.substr(b0, d.byte_offset[end] - b0)), start, end});
  };

  std::size_t i = 0;
  while (i < n) {
    const char32_t c = d.chars[i];
    if (is_space(c)) {
      ++i;
    } else if (is_word_char(c)) {
      std::size_t j = i + 1;
      while (j < n) {
        if (is_word_char(d.chars[j])) {
          ++j;
        } else if (is_joiner(d.chars[j]) && j + 1 < n && is_word_char(d.chars[j + 1])) {
          j += 2;
        } else {
          break;
        }
      }
      emit(i, j);
      i = j;
    } else {
      emit(i, i + 1);
      ++i;
    }
  }
  return tokens;
}

std::vector<Label> bio_label(std::span<const Token> tokens, std::span<const AnnotationSpan> spans) {
  std::vector<Label> labels(tokens.size(), Label::O);
  std::vector<std::ptrdiff_t> owner(tokens.size(), -1);
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const AnnotationSpan& span = spans[s];
    // First token whose end lies past the span start.
    auto it = std::partition_point(tokens.begin(), tokens.end(), [&](const Token& t) { return t.end <= span.start; });
    bool first = true;
    for (; it != tokens.end() && it->start < span.end; ++it) {
      const auto k = static_cast<std::size_t>(it - tokens.begin());
      if (owner[k] >= 0) {
        throw CorpusError("token '" + it->text + "' at " + std::to_string(it->start) + " overlaps two spans");
      }
      owner[k] = static_cast<std::ptrdiff_t>(s);
      labels[k] = first ? Label::B : Label::I;
      first = false;
    }
  }
  return labels;
}

std::vector<std::pair<std::size_t, std::size_t>> units_from_labels(std::span<const Label> labels) {
  std::vector<std::pair<std::size_t, std::size_t>> units;
  std::size_t k = 0;
  while (k < labels.size()) {
    if (labels[k] == Label::O) {
      ++k;
      continue;
    }
    std::size_t end = k + 1;
    while (end < labels.size() && labels[end] == Label::I) ++end;
    units.emplace_back(k, end);
    k = end;
  }
  return units;
}

SequenceBuild build_sequences(const Essay& essay, std::span<const AnnotationSpan> spans, Granularity granularity) {
  const std::vector<Token> tokens = tokenize(essay.text);
  const std::vector<Label> labels = bio_label(tokens, spans);
  const DecodedText d = decode_with_offsets(essay.text);

  auto newline_between = [&](const Token& a, const Token& b) {
    for (std::size_t c = a.end; c < b.start; ++c) {
      if (d.chars[c] == U'\n') return true;
    }
    return false;
  };

  SequenceBuild build;
  LabeledSequence current;
  auto flush = [&] {
    if (current.tokens.empty()) return;
    current.essay_id = essay.id;
    current.sequence_index = build.sequences.size();
    if (current.labels.front() == Label::I) {
      current.labels.front() = Label::B;
      ++build.relabeled_boundaries;
    }
    build.sequences.push_back(std::move(current));
    current = LabeledSequence{};
  };

  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (k > 0) {
      const bool paragraph_break = newline_between(tokens[k - 1], tokens[k]);
      const bool sentence =
          granularity == Granularity::Sentence && sentence_break(tokens[k - 1], tokens[k], labels[k]);
      if (paragraph_break || sentence) flush();
    }
    current.tokens.push_back(tokens[k]);
    current.labels.push_back(labels[k]);
  }
  flush();
  assign_sentence_coordinates(build.sequences);
  return build;
}

void assign_sentence_coordinates(std::span<LabeledSequence> essay_sequences) {
  std::uint32_t sentence = 0;
  bool any = false;
  for (LabeledSequence& seq : essay_sequences) {
    seq.sentence_index.assign(seq.size(), 0);
    seq.token_in_sentence.assign(seq.size(), 0);
    std::uint32_t position = 0;
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const bool starts = k == 0 ? true : sentence_break(seq.tokens[k - 1], seq.tokens[k], seq.labels[k]);
      if (starts) {
        if (any) ++sentence;
        any = true;
        position = 0;
      }
      seq.sentence_index[k] = sentence;
      seq.token_in_sentence[k] = position++;
    }
  }
}

SplitSpec load_split(std::string_view csv_content) {
  SplitSpec split;
  std::istringstream in{std::string(csv_content)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto sep = line.find(';');
    if (sep == std::string::npos) {
      throw SplitError("split line " + std::to_string(line_no) + ": expected 'ID;SET'");
    }
    const std::string id = unquote(std::string_view(line).substr(0, sep));
    std::string set = unquote(std::string_view(line).substr(sep + 1));
    std::transform(set.begin(), set.end(), set.begin(), [](unsigned char c) { return std::toupper(c); });
    if (line_no == 1 && id == "ID" && set == "SET") continue;
    if (id.empty()) throw SplitError("split line " + std::to_string(line_no) + ": empty essay id");
    Subset subset;
    if (set == "TRAIN") {
      subset = Subset::Train;
    } else if (set == "TEST") {
      subset = Subset::Test;
    } else {
      throw SplitError("split line " + std::to_string(line_no) + ": unknown set '" + set + "'");
    }
    if (!split.assignment.emplace(id, subset).second) {
      throw SplitError("split line " + std::to_string(line_no) + ": duplicate essay id " + id);
    }
  }
  return split;
}

void validate_split(const SplitSpec& split, std::span<const std::string> essay_ids) {
  std::vector<std::string> sorted(essay_ids.begin(), essay_ids.end());
  std::sort(sorted.begin(), sorted.end());
  for (const auto& [id, subset] : split.assignment) {
    if (!std::binary_search(sorted.begin(), sorted.end(), id)) {
      throw SplitError("split names unknown essay " + id);
    }
  }
  for (const std::string& id : sorted) {
    if (!split.contains(id)) throw SplitError("essay " + id + " is missing from the split");
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<CorpusEssay> load_corpus_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("corpus directory " + dir.string() + " does not exist");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ann") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw CorpusError("no .ann files in " + dir.string());

  std::vector<CorpusEssay> essays;
  essays.reserve(ids.size());
  for (const std::string& id : ids) {
    const fs::path txt = dir / (id + ".txt");
    const fs::path ann = dir / (id + ".ann");
    if (!fs::exists(txt)) throw CorpusError("missing text file " + txt.string() + " for " + ann.string());
    CorpusEssay ce;
    ce.essay = Essay{id, read_file(txt)};
    if (ce.essay.text.empty()) throw CorpusError("empty essay text " + txt.string());
    try {
      ce.spans = parse_brat(read_file(ann), ce.essay.text);
    } catch (const CorpusError& e) {
      throw CorpusError(ann.string() + ": " + e.what());
    }
    essays.push_back(std::move(ce));
  }
  return essays;
}

LabelHistogram histogram(std::span<const LabeledSequence> sequences) {
  LabelHistogram h;
  for (const auto& seq : sequences) {
    for (Label l : seq.labels) {
      switch (l) {
        case Label::B:
          ++h.b;
          break;
        case Label::I:
          ++h.i;
          break;
        case Label::O:
          ++h.o;
          break;
      }
    }
  }
  return h;
}

}  // namespace amseg
