#include "amseg/embeddings.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace amseg {

static_assert(std::endian::native == std::endian::little, "vector store I/O assumes a little-endian host");

namespace {

constexpr char kStoreMagic[8] = {'A', 'M', 'S', 'E', 'G', 'V', 'E', 'C'};
constexpr std::uint32_t kStoreVersion = 1;

class Crc32 {
 public:
  void update(const void* data, std::size_t n) {
    crc_ = crc32(crc_, static_cast<const Bytef*>(data), static_cast<uInt>(n));
  }
  std::uint32_t value() const { return static_cast<std::uint32_t>(crc_); }

 private:
  uLong crc_ = crc32(0L, Z_NULL, 0);
};

template <typename T>
void put(std::ostream& out, const T& value, Crc32* crc = nullptr) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
  if (crc) crc->update(&value, sizeof(T));
}

void put_bytes(std::ostream& out, const void* data, std::size_t n, Crc32* crc) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  crc->update(data, n);
}

void take_bytes(std::istream& in, void* data, std::size_t n, const char* what, Crc32* crc = nullptr) {
  if (!in.read(static_cast<char*>(data), static_cast<std::streamsize>(n))) {
    throw FormatError(std::string("vector store: truncated payload reading ") + what);
  }
  if (crc) crc->update(data, n);
}

template <typename T>
T take(std::istream& in, const char* what, Crc32* crc = nullptr) {
  T value{};
  take_bytes(in, &value, sizeof(T), what, crc);
  return value;
}

}  // namespace

std::string_view known_embedding_name(Eigen::Index dim) {
  switch (dim) {
    case kGloveDim:
      return "GloVe";
    case kBertDim:
      return "BERT";
    case kFlairDim:
      return "Flair";
    default:
      return {};
  }
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

bool EmbeddingTable::insert(const std::string& word, const RowVector& vector) {
  if (vector.size() != dim_) {
    throw DimensionError("embedding table: vector for '" + word + "' has " + std::to_string(vector.size()) +
                         " entries, table dim is " + std::to_string(dim_));
  }
  const std::string key = lowercase_keys_ ? ascii_lower(word) : word;
  if (index_.contains(key)) {
    ++duplicates_;
    return false;
  }
  index_.emplace(key, rows_.size());
  rows_.push_back(vector);
  return true;
}

bool EmbeddingTable::contains(std::string_view word) const {
  return index_.contains(lowercase_keys_ ? ascii_lower(word) : std::string(word));
}

RowVector EmbeddingTable::lookup(std::string_view word) const {
  const auto it = index_.find(lowercase_keys_ ? ascii_lower(word) : std::string(word));
  if (it == index_.end()) return RowVector::Zero(dim_);
  return rows_[it->second];
}

EmbeddingTable load_glove(std::istream& in, const std::unordered_set<std::string>* vocabulary) {
  EmbeddingTable table;
  bool initialised = false;
  std::string line;
  std::size_t line_no = 0;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos || space == 0) {
      throw FormatError("glove line " + std::to_string(line_no) + ": expected 'word v1 ... vd'");
    }
    const std::string word = line.substr(0, space);

    values.clear();
    const char* p = line.data() + space;
    const char* end = line.data() + line.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      double v = 0.0;
      const auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc{}) {
        throw FormatError("glove line " + std::to_string(line_no) + ": unparsable number for '" + word + "'");
      }
      values.push_back(v);
      p = next;
    }
    if (!initialised) {
      if (values.empty()) throw FormatError("glove line " + std::to_string(line_no) + ": no vector components");
      table = EmbeddingTable(static_cast<Eigen::Index>(values.size()), true);
      initialised = true;
    } else if (static_cast<Eigen::Index>(values.size()) != table.dim()) {
      throw FormatError("glove line " + std::to_string(line_no) + ": dimension " + std::to_string(values.size()) +
                        " differs from " + std::to_string(table.dim()));
    }
    if (vocabulary && !vocabulary->contains(ascii_lower(word))) continue;
    table.insert(word, Eigen::Map<const RowVector>(values.data(), static_cast<Eigen::Index>(values.size())));
  }
  if (!initialised) throw FormatError("glove: no vectors found");
  return table;
}

EmbeddingTable load_glove(std::string_view content, const std::unordered_set<std::string>* vocabulary) {
  std::istringstream in{std::string(content)};
  return load_glove(in, vocabulary);
}

EmbeddingTable load_glove_file(const std::filesystem::path& path, const std::unordered_set<std::string>* vocabulary) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open GloVe file " + path.string());
  return load_glove(in, vocabulary);
}

void PrecomputedStore::insert(const SentenceKey& key, const RowVector& vector) {
  if (vector.size() != dim_) {
    throw DimensionError("vector store: vector has " + std::to_string(vector.size()) + " entries, store dim is " +
                         std::to_string(dim_));
  }
  vectors_[key] = vector;
}

const RowVector* PrecomputedStore::find(const SentenceKey& key) const {
  const auto it = vectors_.find(key);
  return it == vectors_.end() ? nullptr : &it->second;
}

void write_precomputed(std::ostream& out, const PrecomputedStore& store) {
  out.write(kStoreMagic, sizeof(kStoreMagic));
  put<std::uint32_t>(out, kStoreVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(store.size()));
  Crc32 crc;
  for (const auto& [key, vec] : store.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(key.essay_id.size()), &crc);
    put_bytes(out, key.essay_id.data(), key.essay_id.size(), &crc);
    put<std::uint32_t>(out, key.sentence, &crc);
    put<std::uint32_t>(out, key.token, &crc);
    put_bytes(out, vec.data(), sizeof(double) * static_cast<std::size_t>(vec.size()), &crc);
  }
  put<std::uint32_t>(out, crc.value());
  if (!out) throw IoError("vector store: write failed");
}

PrecomputedStore read_precomputed(std::istream& in) {
  char magic[sizeof(kStoreMagic)];
  take_bytes(in, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kStoreMagic, sizeof(magic)) != 0) throw FormatError("vector store: bad magic");
  const auto version = take<std::uint32_t>(in, "version");
  if (version != kStoreVersion) throw FormatError("vector store: unsupported version " + std::to_string(version));
  const auto dim = take<std::uint32_t>(in, "dim");
  if (dim == 0) throw FormatError("vector store: header declares dim 0");
  const auto count = take<std::uint64_t>(in, "count");

  PrecomputedStore store(dim);
  Crc32 crc;
  RowVector vec(dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    SentenceKey key;
    const auto id_len = take<std::uint32_t>(in, "essay id length", &crc);
    key.essay_id.resize(id_len);
    take_bytes(in, key.essay_id.data(), id_len, "essay id", &crc);
    key.sentence = take<std::uint32_t>(in, "sentence index", &crc);
    key.token = take<std::uint32_t>(in, "token index", &crc);
    take_bytes(in, vec.data(), sizeof(double) * dim, "vector", &crc);
    store.insert(key, vec);
  }
  const auto stored_crc = take<std::uint32_t>(in, "checksum");
  if (stored_crc != crc.value()) {
    throw FormatError("vector store: checksum mismatch (payload does not match header dim " + std::to_string(dim) +
                      " and count " + std::to_string(count) + ")");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("vector store: trailing bytes after checksum (dim mismatch with header?)");
  }
  if (store.size() != count) throw FormatError("vector store: duplicate keys in payload");
  return store;
}

PrecomputedStore load_precomputed(std::string_view content) {
  std::istringstream in{std::string(content)};
  return read_precomputed(in);
}

void save_precomputed(const std::filesystem::path& path, const PrecomputedStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_precomputed(out, store);
}

PrecomputedStore load_precomputed_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vector store " + path.string());
  return read_precomputed(in);
}

EmbeddingSpec parse_embedding_spec(std::string_view json_text, const std::filesystem::path& base_dir) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("embedding spec: ") + e.what());
  }
  EmbeddingSpec spec;
  try {
    spec.name = doc.value("name", std::string("embeddings"));
    spec.expected_dim = doc.at("dim").get<Eigen::Index>();
    for (const auto& entry : doc.at("sources")) {
      EmbeddingSource source;
      const std::string type = entry.at("type").get<std::string>();
      if (type == "glove") {
        source.kind = EmbeddingSource::Kind::Glove;
      } else if (type == "precomputed") {
        source.kind = EmbeddingSource::Kind::Precomputed;
      } else {
        throw ConfigError("embedding spec: unknown source type '" + type + "'");
      }
      source.path = entry.at("path").get<std::string>();
      if (source.path.is_relative() && !base_dir.empty()) source.path = base_dir / source.path;
      spec.sources.push_back(std::move(source));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("embedding spec: ") + e.what());
  }
  if (spec.sources.empty()) throw ConfigError("embedding spec: no sources");
  if (spec.expected_dim < 1) throw ConfigError("embedding spec: dim must be positive");
  return spec;
}

EmbeddingSpec load_embedding_spec(const std::filesystem::path& path) {
  return parse_embedding_spec(read_file(path), path.parent_path());
}

Embedder::Embedder(EmbeddingSpec spec, std::vector<LoadedSource> sources)
    : spec_(std::move(spec)), sources_(std::move(sources)) {
  if (sources_.size() != spec_.sources.size()) {
    throw ConfigError("embedder: " + std::to_string(sources_.size()) + " loaded sources for " +
                      std::to_string(spec_.sources.size()) + " declared");
  }
  Eigen::Index total = 0;
  std::string parts;
  for (const LoadedSource& s : sources_) {
    const Eigen::Index d = std::visit([](const auto& src) { return src.dim(); }, s);
    parts += (parts.empty() ? "" : "+") + std::to_string(d);
    total += d;
  }
  if (total != spec_.expected_dim) {
    throw ConfigError("embedding spec '" + spec_.name + "': sources sum to " + parts + " = " + std::to_string(total) +
                      ", expected " + std::to_string(spec_.expected_dim));
  }
}

Embedder Embedder::load(const EmbeddingSpec& spec, const std::unordered_set<std::string>* vocabulary) {
  std::vector<LoadedSource> loaded;
  for (const EmbeddingSource& source : spec.sources) {
    if (source.kind == EmbeddingSource::Kind::Glove) {
      loaded.emplace_back(load_glove_file(source.path, vocabulary));
    } else {
      loaded.emplace_back(load_precomputed_file(source.path));
    }
  }
  return Embedder(spec, std::move(loaded));
}

Matrix Embedder::vectorize(const LabeledSequence& seq, LookupStats* stats) const {
  const auto n = static_cast<Eigen::Index>(seq.size());
  Matrix out(n, dim());
  Eigen::Index col = 0;
  for (const LoadedSource& source : sources_) {
    if (const auto* table = std::get_if<EmbeddingTable>(&source)) {
      for (Eigen::Index k = 0; k < n; ++k) {
        const Token& token = seq.tokens[static_cast<std::size_t>(k)];
        out.row(k).segment(col, table->dim()) = table->lookup(token);
        if (stats) {
          ++stats->lookups;
          if (!table->contains(token.text)) ++stats->misses;
        }
      }
      col += table->dim();
    } else {
      const auto& store = std::get<PrecomputedStore>(source);
      if (seq.sentence_index.size() != seq.size()) {
        throw CoverageError("sequence " + seq.essay_id + "/" + std::to_string(seq.sequence_index) +
                            " carries no sentence coordinates");
      }
      for (Eigen::Index k = 0; k < n; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        const SentenceKey key{seq.essay_id, seq.sentence_index[kk], seq.token_in_sentence[kk]};
        const RowVector* v = store.find(key);
        if (!v) {
          throw CoverageError("no precomputed vector for essay " + key.essay_id + ", sentence " +
                              std::to_string(key.sentence) + ", token " + std::to_string(key.token));
        }
        out.row(k).segment(col, store.dim()) = *v;
      }
      col += store.dim();
    }
  }
  return out;
}

std::unordered_set<std::string> vocabulary_of(std::span<const LabeledSequence> sequences) {
  std::unordered_set<std::string> vocab;
  for (const auto& seq : sequences) {
    for (const auto& t : seq.tokens) vocab.insert(ascii_lower(t.text));
  }
  return vocab;
}

}  // namespace amseg
