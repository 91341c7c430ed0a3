#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "winvit/attention.hpp"
#include "winvit/autograd.hpp"
#include "winvit/spatial_attention.hpp"
#include "winvit/tensor.hpp"

namespace winvit::model {

using attention::ForwardContext;
using attention::SharingMode;

enum class AttentionVariant { Windowed, Global };

std::string to_string(AttentionVariant variant);
AttentionVariant attention_variant_from_string(const std::string& name);

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t window = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 3;
  double dropout_rate = 0.0;
  SharingMode sharing = SharingMode::Standard;
  AttentionVariant attention = AttentionVariant::Windowed;
  std::uint64_t seed = 0;
  DType dtype = DType::F32;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t hidden() const { return embed_dim * mlp_ratio; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  // ConfigError / GeometryError naming the offending fields.
  void validate() const;

  // key=value lines, fixed key order.
  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
  static bool is_key(const std::string& key);
  // ConfigError for an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);

  bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  attention::ProjectionParams attn;
  std::optional<Tensor> bias_table;  // windowed variant only
  attention::BiasIndex bias_index;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_w, fc1_b;  // C x rC, rC
  Tensor dw_w, dw_b;    // rC x 1 x 3 x 3, rC
  sam::SamParams sam;
  Tensor fc2_w, fc2_b;  // rC x C, C
};

// Checkpoint section tags.
inline constexpr const char* kSectionStem = "PEMB";
inline constexpr const char* kSectionAttention = "ATTN";
inline constexpr const char* kSectionSam = "SAM ";
inline constexpr const char* kSectionFfn = "FFN ";
inline constexpr const char* kSectionHead = "HEAD";

struct ParamRef {
  std::string section;  // one of the tags above
  int block;            // -1 outside the blocks
  std::string name;
  Tensor* tensor;
};

class Model {
 public:
  static Model init(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  // Ordered as serialized: PEMB, then ATTN/SAM/FFN per block, then HEAD.
  std::vector<ParamRef> parameters();
  std::size_t parameter_count() const;

  Tensor patch_w, patch_b;  // 3p^2 x C, C
  std::vector<BlockParams> blocks;
  Tensor head_w, head_b;  // C x K, K

 private:
  ModelConfig config_;
};

// Parameters bound to a tape, keyed by tensor address, plus the structured
// view used by the forward pass.
struct BoundBlock {
  Var ln1_gamma, ln1_beta;
  attention::ProjectionVars attn;
  std::optional<Var> bias_table;
  Var ln2_gamma, ln2_beta, fc1_w, fc1_b, dw_w, dw_b;
  sam::SamVars sam;
  Var fc2_w, fc2_b;
};

struct BoundModel {
  Var patch_w, patch_b;
  std::vector<BoundBlock> blocks;
  Var head_w, head_b;
  std::vector<Var> params;  // parallel to Model::parameters()
};

BoundModel bind(Tape& tape, Model& model, bool trainable);

// Captured intermediates for visualization.
struct ModelProbe {
  std::vector<Tensor> sam_maps;                     // per block, [1 x H x W]
  std::vector<attention::AttentionProbe> attention;  // per block
};

Var patch_embed(const Var& image, const BoundModel& bound, const ModelConfig& config);
// x [L x C] tokens, row-major over the grid.
Var block_forward(const Var& x, const BoundBlock& block, const BlockParams& params, const ModelConfig& config,
                  std::size_t block_index, const ForwardContext& ctx, ModelProbe* probe = nullptr);
// Image [3 x S x S] -> logits [K].
Var logits(const Var& image, const BoundModel& bound, const Model& model, const ForwardContext& ctx,
           ModelProbe* probe = nullptr);

// Plain entry points.
Tensor patch_embed(const Tensor& image, Model& model);                           // -> [H x W x C]
Tensor block_forward(const Tensor& x, Model& model, std::size_t block_index, bool training, std::uint64_t seed);
Tensor classify(const Tensor& image, Model& model, FlopCounter* counter = nullptr, ModelProbe* probe = nullptr);

void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);
// Validates every section against `expected`; shape disagreements name the
// section.
Model load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace winvit::model
