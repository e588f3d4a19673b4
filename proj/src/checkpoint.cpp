#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "amseg/model.hpp"

namespace amseg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "AMSEG-CHECKPOINT";
constexpr int kVersion = 1;
constexpr std::string_view kHeaderEnd = "---";

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::string& what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError("checkpoint: truncated " + what);
  return value;
}

long long to_integer(const std::string& key, const std::string& text) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw FormatError("checkpoint: field " + key + " is not an integer: '" + text + "'");
  }
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Model& model, const CheckpointMetadata& metadata) {
  const ModelSpec& s = model.spec();
  out << kMagic << '\n';
  out << "version=" << kVersion << '\n';
  out << "arch=" << to_string(s.arch) << '\n';
  out << "input_dim=" << s.input_dim << '\n';
  out << "hidden=" << s.hidden << '\n';
  out << "inter_stage_dim=" << s.inter_stage_dim << '\n';
  out << "use_projection=" << (s.use_projection ? 1 : 0) << '\n';
  out << "attention=" << to_string(s.attention) << '\n';
  out << "heads_cap=" << s.heads_cap << '\n';
  out << "attention_width=" << s.attention_width << '\n';
  out << "seed=" << s.seed << '\n';
  for (const auto& [key, value] : metadata) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw FormatError("checkpoint: metadata entry '" + key + "' contains a reserved character");
    }
    out << "meta." << key << '=' << value << '\n';
  }
  const auto params = model.parameters();
  out << "parameters=" << params.size() << '\n';
  out << kHeaderEnd << '\n';
  for (const Parameter* p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.cols()));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())));
  }
  if (!out) throw IoError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw FormatError("checkpoint: bad magic");

  std::map<std::string, std::string> fields;
  CheckpointMetadata metadata;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line == kHeaderEnd) {
      terminated = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed header line '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key.starts_with("meta.")) {
      metadata[key.substr(5)] = std::move(value);
    } else {
      fields[std::move(key)] = std::move(value);
    }
  }
  if (!terminated) throw FormatError("checkpoint: header not terminated");

  auto field = [&](const std::string& key) -> const std::string& {
    const auto it = fields.find(key);
    if (it == fields.end()) throw FormatError("checkpoint: missing header field " + key);
    return it->second;
  };
  if (to_integer("version", field("version")) != kVersion) {
    throw FormatError("checkpoint: unsupported version " + field("version"));
  }

  ModelSpec spec;
  const auto arch = parse_architecture(field("arch"));
  if (!arch) throw FormatError("checkpoint: unknown architecture " + field("arch"));
  spec.arch = *arch;
  spec.input_dim = to_integer("input_dim", field("input_dim"));
  spec.hidden = to_integer("hidden", field("hidden"));
  spec.inter_stage_dim = to_integer("inter_stage_dim", field("inter_stage_dim"));
  spec.use_projection = to_integer("use_projection", field("use_projection")) != 0;
  const std::string& attention = field("attention");
  if (attention == "additive") {
    spec.attention = AttentionKind::Additive;
  } else if (attention == "multi_head") {
    spec.attention = AttentionKind::MultiHead;
  } else {
    throw FormatError("checkpoint: unknown attention kind " + attention);
  }
  spec.heads_cap = static_cast<int>(to_integer("heads_cap", field("heads_cap")));
  spec.attention_width = to_integer("attention_width", field("attention_width"));
  spec.seed = static_cast<std::uint64_t>(std::stoull(field("seed")));

  Checkpoint ckpt{Model(spec), std::move(metadata)};
  ParameterRefs params = ckpt.model.parameters();
  const long long declared = to_integer("parameters", field("parameters"));
  if (declared != static_cast<long long>(params.size())) {
    throw FormatError("checkpoint: declares " + std::to_string(declared) + " parameter blocks, architecture has " +
                      std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    const auto name_len = take<std::uint32_t>(in, "parameter name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw FormatError("checkpoint: truncated parameter name");
    if (name != p->name) throw FormatError("checkpoint: expected parameter " + p->name + ", found " + name);
    const auto rows = take<std::uint64_t>(in, name + " rows");
    const auto cols = take<std::uint64_t>(in, name + " cols");
    if (rows != static_cast<std::uint64_t>(p->value.rows()) || cols != static_cast<std::uint64_t>(p->value.cols())) {
      throw FormatError("checkpoint: parameter " + name + " has shape " +
                        shape_string(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)) +
                        ", expected " + shape_of(p->value));
    }
    if (!in.read(reinterpret_cast<char*>(p->value.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())))) {
      throw FormatError("checkpoint: truncated values of " + name);
    }
    p->zero_grad();
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after parameters");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Model& model, const CheckpointMetadata& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_checkpoint(out, model, metadata);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace amseg
