#pragma once

// Hand-built models with known circuits, plus random models for property tests.
//
// Planted models use no normalization (so each pathway can be set exactly),
// uniform attention (zero query/key maps) and an identity patch embedding
// into the first input_dim residual dimensions.

#include "vitcd/data.hpp"
#include "vitcd/model.hpp"

#include <string>
#include <vector>

namespace vitcd {

struct PlantedModel {
  Model model;
  SyntheticTaskSpec task;
  /// Edges a faithful circuit cannot do without, by construction.
  std::vector<std::string> essential_edges;
};

/// 1 layer, 4 heads. One head (chosen by the seed) averages the object
/// channel into the class row; the other heads and the MLP emit constants.
PlantedModel planted_single_head_model(std::uint64_t seed);

/// C = 4, 3 layers, 4 heads. Layer-0 head c detects class c, layer-1 head c
/// relays it and the layer-1 MLP holds one saturating gate per class that
/// suppresses the class logit whenever its relayed evidence is missing. The
/// logits also read weak direct copies of the evidence, and noise senders
/// write slightly class-relevant junk.
PlantedModel planted_class_model(std::uint64_t seed);

/// Contrastive head, C = 4, 2 layers, 4 heads. Layer-0 head 0 votes from the
/// object channel and head 1 from the text channel with a larger gain, so
/// written text flips predictions toward the text's class.
PlantedModel planted_typographic_model(std::uint64_t seed);

/// Layer-0 head that reads the text channel in planted_typographic_model.
inline constexpr int kTextReaderHead = 1;

struct RandomModelOptions {
  int max_layers = 3;
  int max_heads = 3;
  int max_dim = 16;
  int max_patches = 17;
  bool linear = false;  // no norms, identity activation, uniform attention
  HeadMode head_mode = HeadMode::classifier;
};

/// Random architecture within the bounds and random weights.
Model random_model(std::uint64_t seed, const RandomModelOptions& options = {});

/// Gaussian raw tokens matching the model's input shape.
Field random_tokens(const ModelConfig& config, std::uint64_t seed, double scale = 1.0);

}  // namespace vitcd
