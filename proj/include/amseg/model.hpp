#pragma once

// The five evaluated architectures:
//   BL    BiLSTM -> projection -> BiLSTM -> dense softmax
//   BL_I  multi-head attention -> BL
//   BL_E  BiLSTM -> projection -> multi-head attention -> BiLSTM -> dense softmax
//   SB    BiLSTM -> dense softmax
//   SB_I  additive attention -> BiLSTM -> dense softmax

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "amseg/labels.hpp"
#include "amseg/layers.hpp"

namespace amseg {

enum class ArchitectureId { BL, BL_I, BL_E, SB, SB_I };
enum class AttentionKind { Additive, MultiHead };

inline constexpr std::array<ArchitectureId, 5> kAllArchitectures = {
    ArchitectureId::BL, ArchitectureId::BL_I, ArchitectureId::BL_E, ArchitectureId::SB, ArchitectureId::SB_I};

std::string_view to_string(ArchitectureId arch);
// Display name used in result tables: BL, BL-I, BL-E, BiLSTM, BiLSTM-I.
std::string_view display_name(ArchitectureId arch);
// Accepts "BL_I", "bl-i", "sb" and friends.
std::optional<ArchitectureId> parse_architecture(std::string_view name);
std::string_view to_string(AttentionKind kind);

bool is_two_stage(ArchitectureId arch);
AttentionKind attention_for(ArchitectureId arch);

struct ModelSpec {
  ArchitectureId arch = ArchitectureId::SB;
  Eigen::Index input_dim = 300;
  Eigen::Index hidden = 64;
  Eigen::Index inter_stage_dim = 4;
  // Two-stage models only; when false the first BiLSTM feeds the second
  // directly and inter_stage_dim must equal 2 * hidden.
  bool use_projection = true;
  AttentionKind attention = AttentionKind::Additive;
  int heads_cap = 6;
  Eigen::Index attention_width = AdditiveSelfAttention::kDefaultAttentionWidth;
  std::uint64_t seed = 0;

  // Spec with the attention kind matching the architecture family.
  static ModelSpec for_architecture(ArchitectureId arch, Eigen::Index input_dim, std::uint64_t seed = 0);

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

using Layer = std::variant<BiLstm, Projection, MultiHeadSelfAttention, AdditiveSelfAttention, DenseSoftmax>;
using LayerCache = std::variant<BiLstm::Cache, Projection::Cache, MultiHeadSelfAttention::Cache,
                                AdditiveSelfAttention::Cache, DenseSoftmax::Cache>;

std::string_view layer_kind(const Layer& layer);

class Model {
 public:
  struct Cache {
    std::vector<LayerCache> layers;
  };

  explicit Model(const ModelSpec& spec);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  // Per-token distributions over {B, I, O}.
  BatchTensor forward(const BatchTensor& x, Cache& cache) const;
  BatchTensor forward(const BatchTensor& x) const;
  // upstream is dL/d(probabilities); returns dL/dx.
  BatchTensor backward(const Cache& cache, const BatchTensor& upstream);

  ParameterRefs parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  ModelSpec spec_;
  std::vector<Layer> layers_;
};

// argmax per token; ties resolve to the earliest label in B < I < O.
Label argmax_label(const RowVector& distribution);

// One label vector per batch entry, covering its valid tokens only.
std::vector<std::vector<Label>> predict_labels(const Model& model, const BatchTensor& batch);

// Checkpoint: text header (magic, version, ModelSpec and metadata as
// key=value lines) followed by named little-endian float64 parameter blocks.
using CheckpointMetadata = std::map<std::string, std::string>;

struct Checkpoint {
  Model model;
  CheckpointMetadata metadata;
};

void write_checkpoint(std::ostream& out, const Model& model, const CheckpointMetadata& metadata = {});
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Model& model, const CheckpointMetadata& metadata = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace amseg
