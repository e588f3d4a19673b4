#include "amseg/model.hpp"

#include <algorithm>
#include <cctype>

namespace amseg {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

std::string_view to_string(ArchitectureId arch) {
  switch (arch) {
    case ArchitectureId::BL:
      return "BL";
    case ArchitectureId::BL_I:
      return "BL_I";
    case ArchitectureId::BL_E:
      return "BL_E";
    case ArchitectureId::SB:
      return "SB";
    case ArchitectureId::SB_I:
      return "SB_I";
  }
  return "?";
}

std::string_view display_name(ArchitectureId arch) {
  switch (arch) {
    case ArchitectureId::BL:
      return "BL";
    case ArchitectureId::BL_I:
      return "BL-I";
    case ArchitectureId::BL_E:
      return "BL-E";
    case ArchitectureId::SB:
      return "BiLSTM";
    case ArchitectureId::SB_I:
      return "BiLSTM-I";
  }
  return "?";
}

std::optional<ArchitectureId> parse_architecture(std::string_view name) {
  std::string key;
  for (char c : name) key += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (ArchitectureId arch : kAllArchitectures) {
    if (key == to_string(arch)) return arch;
  }
  return std::nullopt;
}

std::string_view to_string(AttentionKind kind) { return kind == AttentionKind::Additive ? "additive" : "multi_head"; }

bool is_two_stage(ArchitectureId arch) {
  return arch == ArchitectureId::BL || arch == ArchitectureId::BL_I || arch == ArchitectureId::BL_E;
}

AttentionKind attention_for(ArchitectureId arch) {
  return is_two_stage(arch) ? AttentionKind::MultiHead : AttentionKind::Additive;
}

ModelSpec ModelSpec::for_architecture(ArchitectureId arch, Eigen::Index input_dim, std::uint64_t seed) {
  ModelSpec spec;
  spec.arch = arch;
  spec.input_dim = input_dim;
  spec.attention = attention_for(arch);
  spec.seed = seed;
  return spec;
}

void ModelSpec::validate() const {
  if (input_dim < 1 || hidden < 1 || inter_stage_dim < 1 || attention_width < 1) {
    throw ConfigError("model spec: dimensions must be positive");
  }
  if (heads_cap < 1) throw ConfigError("model spec: heads_cap must be >= 1");
  if (attention != attention_for(arch)) {
    throw ConfigError(std::string("model spec: ") + std::string(to_string(arch)) + " uses " +
                      std::string(to_string(attention_for(arch))) + " attention, got " +
                      std::string(to_string(attention)));
  }
  if (is_two_stage(arch) && !use_projection && inter_stage_dim != 2 * hidden) {
    throw ConfigError("model spec: without a projection inter_stage_dim must equal 2*hidden (" +
                      std::to_string(2 * hidden) + "), got " + std::to_string(inter_stage_dim));
  }
}

std::string_view layer_kind(const Layer& layer) {
  return std::visit(Overloaded{[](const BiLstm&) { return std::string_view("bilstm"); },
                               [](const Projection&) { return std::string_view("projection"); },
                               [](const MultiHeadSelfAttention&) { return std::string_view("multi_head_attention"); },
                               [](const AdditiveSelfAttention&) { return std::string_view("additive_attention"); },
                               [](const DenseSoftmax&) { return std::string_view("dense_softmax"); }},
                    layer);
}

Model::Model(const ModelSpec& spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec_.seed);
  auto name = [this](std::string_view kind) { return "l" + std::to_string(layers_.size()) + "." + std::string(kind); };

  auto add_multi_head = [&](Eigen::Index dim) {
    MultiHeadSelfAttention attn(name("mha"), dim, choose_heads(static_cast<int>(dim), spec_.heads_cap), rng);
    attn.reject_empty_sequences = false;
    layers_.emplace_back(std::move(attn));
  };

  const Eigen::Index H = spec_.hidden;
  switch (spec_.arch) {
    case ArchitectureId::SB_I: {
      AdditiveSelfAttention attn(name("additive"), spec_.input_dim, spec_.attention_width, rng);
      attn.reject_empty_sequences = false;
      layers_.emplace_back(std::move(attn));
      [[fallthrough]];
    }
    case ArchitectureId::SB:
      layers_.emplace_back(BiLstm(name("bilstm"), spec_.input_dim, H, rng));
      break;
    case ArchitectureId::BL_I:
      add_multi_head(spec_.input_dim);
      [[fallthrough]];
    case ArchitectureId::BL:
    case ArchitectureId::BL_E: {
      layers_.emplace_back(BiLstm(name("bilstm"), spec_.input_dim, H, rng));
      Eigen::Index stage_dim = 2 * H;
      if (spec_.use_projection) {
        layers_.emplace_back(Projection(name("projection"), 2 * H, spec_.inter_stage_dim, rng));
        stage_dim = spec_.inter_stage_dim;
      }
      if (spec_.arch == ArchitectureId::BL_E) add_multi_head(stage_dim);
      layers_.emplace_back(BiLstm(name("bilstm"), stage_dim, H, rng));
      break;
    }
  }
  layers_.emplace_back(DenseSoftmax(name("dense"), 2 * H, rng));
}

BatchTensor Model::forward(const BatchTensor& x, Cache& cache) const {
  if (x.features() != spec_.input_dim) {
    throw DimensionError("model: input features " + std::to_string(x.features()) + " != input_dim " +
                         std::to_string(spec_.input_dim));
  }
  cache.layers.clear();
  cache.layers.reserve(layers_.size());
  BatchTensor h = x;
  for (const Layer& layer : layers_) {
    h = std::visit(
        [&](const auto& l) {
          using Concrete = std::decay_t<decltype(l)>;
          auto& slot = cache.layers.emplace_back(std::in_place_type<typename Concrete::Cache>);
          return l.forward(h, std::get<typename Concrete::Cache>(slot));
        },
        layer);
  }
  return h;
}

BatchTensor Model::forward(const BatchTensor& x) const {
  Cache cache;
  return forward(x, cache);
}

BatchTensor Model::backward(const Cache& cache, const BatchTensor& upstream) {
  if (cache.layers.size() != layers_.size()) throw ContractError("model backward: cache does not match model");
  BatchTensor grad = upstream;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    grad = std::visit(
        [&](auto& l) {
          using Concrete = std::decay_t<decltype(l)>;
          return l.backward(std::get<typename Concrete::Cache>(cache.layers[i]), grad);
        },
        layers_[i]);
  }
  return grad;
}

ParameterRefs Model::parameters() {
  ParameterRefs refs;
  for (Layer& layer : layers_) {
    for (Parameter* p : std::visit([](auto& l) { return l.parameters(); }, layer)) refs.push_back(p);
  }
  return refs;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> refs;
  for (Parameter* p : const_cast<Model*>(this)->parameters()) refs.push_back(p);
  return refs;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const Parameter* p : parameters()) total += static_cast<std::size_t>(p->size());
  return total;
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

Label argmax_label(const RowVector& distribution) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(distribution.size()); ++k) {
    if (distribution(k) > distribution(best)) best = k;
  }
  return static_cast<Label>(best);
}

std::vector<std::vector<Label>> predict_labels(const Model& model, const BatchTensor& batch) {
  const BatchTensor probs = model.forward(batch);
  std::vector<std::vector<Label>> out(static_cast<std::size_t>(batch.batch()));
  for (Eigen::Index b = 0; b < batch.batch(); ++b) {
    for (Eigen::Index t = 0; t < batch.time(); ++t) {
      if (batch.valid(b, t)) out[static_cast<std::size_t>(b)].push_back(argmax_label(probs.token(b, t)));
    }
  }
  return out;
}

}  // namespace amseg
