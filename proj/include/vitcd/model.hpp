#pragma once

#include "vitcd/archive.hpp"
#include "vitcd/config.hpp"
#include "vitcd/graph.hpp"
#include "vitcd/types.hpp"

#include <string>
#include <vector>

namespace vitcd {

struct HeadWeights {
  Field query, key, value;  // d x head_dim
  Vector query_bias, key_bias, value_bias;  // head_dim
  Field output;  // head_dim x d
};

struct NormWeights {
  Vector gamma, beta;  // d
};

struct LayerWeights {
  NormWeights attn_norm, mlp_norm;
  std::vector<HeadWeights> heads;
  Field mlp_in;  // d x mlp_hidden
  Vector mlp_in_bias;
  Field mlp_out;  // mlp_hidden x d
  Vector mlp_out_bias;
};

struct WeightSet {
  Field patch_embed;  // input_dim x d
  Vector patch_bias;  // d
  Field position;     // P x d; row 0 doubles as the class token
  std::vector<LayerWeights> layers;
  NormWeights final_norm;
  Field classifier;        // C x d
  Vector classifier_bias;  // C
  Field projection;        // d x e (contrastive)
  Field class_embeddings;  // C x e (contrastive)

  /// All-zero parameters with unit norm gains.
  static WeightSet zeros(const ModelConfig& config);
  /// Gaussian entries rounded to float32, so archives round-trip exactly.
  static WeightSet random(const ModelConfig& config, std::uint64_t seed, double scale = 0.5);

  /// Throws ConfigError on any shape mismatch, NumericError on non-finite entries.
  void validate(const ModelConfig& config) const;

  Archive to_archive() const;
  /// Strict: missing, misshapen and unknown tensors are all FormatErrors.
  static WeightSet from_archive(const Archive& a, const ModelConfig& config);
};

/// Immutable after construction; freely shareable across threads.
class Model {
 public:
  Model(ModelConfig config, WeightSet weights);

  const ModelConfig& config() const { return config_; }
  const WeightSet& weights() const { return weights_; }
  const Graph& graph() const { return graph_; }

  /// Raw P x input_dim tokens -> embedded P x d residual input.
  Field embed(const Field& raw) const;

 private:
  ModelConfig config_;
  WeightSet weights_;
  Graph graph_;
};

Model load_model(const std::string& path);
void save_model(const Model& model, const std::string& path);
Archive model_to_archive(const Model& model);
Model model_from_archive(const Archive& a);
/// Digest of the serialized model (config and weights).
std::string model_digest(const Model& model);

struct ForwardTrace {
  std::vector<Field> sender_contribution;  // indexed like Graph::senders()
  std::vector<Field> residual_snapshot;    // r^(0) .. r^(L)
  Vector logits;
};

/// Unpatched forward pass on raw P x input_dim tokens.
ForwardTrace forward_with_trace(const Model& model, const Field& raw);

/// Final norm (if enabled) then the head, applied to the class-token row.
Vector logits_from_head(const Model& model, const Field& final_residual);

/// Contrastive image embedding of the class token; throws ConfigError in classifier mode.
Vector image_embedding(const Model& model, const Field& final_residual);

}  // namespace vitcd
