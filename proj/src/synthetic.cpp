#include "vitcd/synthetic.hpp"

#include <random>

namespace vitcd {

namespace {

struct Rng {
  explicit Rng(std::uint64_t seed) : gen(seed) {}
  std::mt19937_64 gen;
  std::normal_distribution<double> normal;
  double gauss(double s = 1.0) { return to_storage(s * normal(gen)); }
  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); }
};

ModelConfig planted_config(int layers, int heads, int dim, int hidden) {
  ModelConfig c;
  c.layers = layers;
  c.heads_per_layer = heads;
  c.model_dim = dim;
  c.head_dim = 4;
  c.mlp_hidden_dim = hidden;
  c.patch_count = 17;
  c.num_classes = 4;
  c.input_dim = 8;
  c.embed_dim = 4;
  c.norm = NormKind::none;
  c.final_norm = false;
  return c;
}

WeightSet planted_zeros(const ModelConfig& c) {
  WeightSet w = WeightSet::zeros(c);
  for (int k = 0; k < c.input_dim; ++k) w.patch_embed(k, k) = 1;
  return w;
}

}  // namespace

PlantedModel planted_single_head_model(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x51));
  const ModelConfig c = planted_config(1, 4, 8, 8);
  WeightSet w = planted_zeros(c);
  const int signal = static_cast<int>(seed % 4);
  auto& layer = w.layers[0];
  for (int h = 0; h < 4; ++h) {
    auto& hw = layer.heads[h];
    if (h == signal) {
      // Object dims -> head dims -> dims 4..7 of the class row.
      for (int k = 0; k < 4; ++k) {
        hw.value(k, k) = 1;
        hw.output(k, 4 + k) = 1;
      }
    } else {
      // Zero value map: the output is a constant row however the input changes.
      for (int k = 0; k < 4; ++k) hw.value_bias(k) = rng.gauss(0.5);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j) hw.output(i, j) = rng.gauss(0.3);
    }
  }
  for (int k = 0; k < 8; ++k) layer.mlp_in_bias(k) = rng.gauss(1.0);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) layer.mlp_out(i, j) = rng.gauss(0.1);
  for (int k = 0; k < 4; ++k) w.classifier(k, 4 + k) = 1;

  const std::string head = NodeId{NodeKind::attn_head, 0, signal}.name();
  return {Model(c, std::move(w)), SyntheticTaskSpec::standard(4, 8.0, seed),
          {"input->attn_in0", head + "->logits"}};
}

PlantedModel planted_class_model(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xc1a55));
  // Residual layout: 0..7 raw input, 8..11 detections, 12..15 relays,
  // 16..19 gate outputs, 20..23 echoes, 24..27 noise.
  const ModelConfig c = planted_config(3, 4, 28, 8);
  WeightSet w = planted_zeros(c);
  const double direct = 0.1, sharpness = 8.0, gate_bias = 1.0, gate_gain = 1.0;

  for (int k = 0; k < 4; ++k) {
    auto& det = w.layers[0].heads[k];
    det.value(k, 0) = 1;
    det.output(0, 8 + k) = 1;
    det.value(4 + k, 1) = 1;  // text-channel junk
    det.output(1, 24 + k) = 0.5;

    auto& relay = w.layers[1].heads[k];
    relay.value(8 + k, 0) = 1;
    relay.output(0, 12 + k) = 1;
    relay.value(24 + k, 1) = 1;
    relay.output(1, 24 + (k + 1) % 4) = 0.5;

    auto& echo = w.layers[2].heads[k];
    echo.value(12 + k, 0) = 1;
    echo.output(0, 20 + k) = 1;
    echo.value(24 + k, 1) = 1;
    echo.output(1, 24 + k) = 0.3;
  }

  // Noise MLPs in layers 0 and 2.
  for (int l : {0, 2}) {
    auto& layer = w.layers[l];
    const int src = l == 0 ? 4 : 24;
    for (int j = 0; j < 4; ++j) {
      layer.mlp_in(src + j, j) = rng.gauss(1.0);
      layer.mlp_in_bias(j) = rng.gauss(0.5);
      layer.mlp_out(j, 24 + j) = rng.gauss(0.3);
    }
  }
  // Layer-1 MLP: gate c fires when relay c is low and then pushes logit c down.
  auto& gates = w.layers[1];
  for (int k = 0; k < 4; ++k) {
    gates.mlp_in(12 + k, k) = -sharpness;
    gates.mlp_in_bias(k) = sharpness * gate_bias;
    gates.mlp_out(k, 16 + k) = -gate_gain;
    gates.mlp_in(24 + k, 4 + k) = 1;
    gates.mlp_out(4 + k, 24 + k) = 0.2;
  }

  for (int k = 0; k < 4; ++k) {
    w.classifier(k, 8 + k) = direct;
    w.classifier(k, 12 + k) = direct;
    w.classifier(k, 20 + k) = direct;
    w.classifier(k, 16 + k) = 1;
    for (int j = 0; j < 4; ++j) w.classifier(k, 24 + j) = rng.gauss(0.1);
  }
  return {Model(c, std::move(w)), SyntheticTaskSpec::standard(4, 10.0, seed),
          {"input->attn_in0", "mlp1->logits"}};
}

PlantedModel planted_typographic_model(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7e47));
  // Residual layout: 0..7 raw input, 8..11 class votes, 12..15 noise.
  ModelConfig c = planted_config(2, 4, 16, 8);
  c.head_mode = HeadMode::contrastive;
  WeightSet w = planted_zeros(c);
  const double object_gain = 1.0, text_gain = 2.0;

  auto& l0 = w.layers[0];
  for (int k = 0; k < 4; ++k) {
    l0.heads[0].value(k, k) = 1;
    l0.heads[0].output(k, 8 + k) = object_gain;
    l0.heads[kTextReaderHead].value(4 + k, k) = 1;
    l0.heads[kTextReaderHead].output(k, 8 + k) = text_gain;
  }
  for (int h = 2; h < 4; ++h)
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 8; ++j) l0.heads[h].value(j, i) = rng.gauss(0.3);
      for (int j = 12; j < 16; ++j) l0.heads[h].output(i, j) = rng.gauss(0.3);
    }
  for (int h = 0; h < 4; ++h)
    for (int i = 0; i < 4; ++i) {
      for (int j = 8; j < 16; ++j) w.layers[1].heads[h].value(j, i) = rng.gauss(0.2);
      for (int j = 12; j < 16; ++j) w.layers[1].heads[h].output(i, j) = rng.gauss(0.2);
    }
  for (int l = 0; l < 2; ++l)
    for (int j = 0; j < 4; ++j) {
      w.layers[l].mlp_in(j, j) = rng.gauss(0.5);
      w.layers[l].mlp_in_bias(j) = rng.gauss(0.5);
      w.layers[l].mlp_out(j, 12 + j) = rng.gauss(0.2);
    }

  for (int k = 0; k < 4; ++k) {
    w.projection(8 + k, k) = 1;
    for (int j = 12; j < 16; ++j) w.projection(j, k) = rng.gauss(0.05);
    w.class_embeddings(k, k) = 1;
  }
  const std::string text = NodeId{NodeKind::attn_head, 0, kTextReaderHead}.name();
  return {Model(c, std::move(w)), SyntheticTaskSpec::standard(4, 10.0, seed),
          {"input->attn_in0", text + "->logits"}};
}

Model random_model(std::uint64_t seed, const RandomModelOptions& o) {
  Rng rng(mix_seed(seed, 0x4a4d));
  ModelConfig c;
  c.layers = rng.uniform(1, o.max_layers);
  c.heads_per_layer = rng.uniform(1, o.max_heads);
  c.model_dim = rng.uniform(std::min(4, o.max_dim), o.max_dim);
  c.head_dim = rng.uniform(1, 4);
  c.mlp_hidden_dim = rng.uniform(2, 2 * o.max_dim);
  c.patch_count = rng.uniform(2, o.max_patches);
  c.num_classes = rng.uniform(2, 5);
  c.input_dim = rng.uniform(2, 8);
  c.embed_dim = rng.uniform(2, 6);
  c.head_mode = o.head_mode;
  if (o.linear) {
    c.norm = NormKind::none;
    c.activation = Activation::identity;
    c.final_norm = false;
  }
  WeightSet w = WeightSet::random(c, mix_seed(seed, 1), 0.8);
  if (o.linear)
    for (auto& layer : w.layers)
      for (auto& h : layer.heads) {
        h.query.setZero();
        h.key.setZero();
        h.query_bias.setZero();
        h.key_bias.setZero();
      }
  return Model(c, std::move(w));
}

Field random_tokens(const ModelConfig& config, std::uint64_t seed, double scale) {
  Rng rng(mix_seed(seed, 0x70c));
  Field x(config.patch_count, config.input_dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = rng.gauss(scale);
  return x;
}

}  // namespace vitcd
