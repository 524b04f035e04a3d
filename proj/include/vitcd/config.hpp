#pragma once

#include "vitcd/types.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace vitcd {

enum class HeadMode { classifier, contrastive };
enum class NormKind { layer_norm, none };
enum class Activation { gelu, identity };

std::string to_string(HeadMode m);
std::string to_string(NormKind k);
std::string to_string(Activation a);

struct ModelConfig {
  int layers = 2;
  int heads_per_layer = 2;
  int model_dim = 8;
  int head_dim = 4;
  int mlp_hidden_dim = 16;
  int patch_count = 5;  // includes the class token at position 0
  int num_classes = 4;
  int input_dim = 8;  // raw patch vector width, before embedding
  int embed_dim = 4;  // contrastive embedding width
  HeadMode head_mode = HeadMode::classifier;
  NormKind norm = NormKind::layer_norm;
  Activation activation = Activation::gelu;
  bool final_norm = true;
  double layer_norm_epsilon = 1e-5;

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  std::string digest() const;
};

}  // namespace vitcd
