#include "vitcd/model.hpp"

#include "vitcd/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace vitcd {

namespace {

std::string layer_key(int l, const std::string& rest) {
  return "layer" + std::to_string(l) + "." + rest;
}

std::string head_key(int l, int h, const std::string& rest) {
  return layer_key(l, "head" + std::to_string(h) + "." + rest);
}

void expect_shape(const Field& m, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols)
    throw ConfigError("weights: '" + name + "' is " + std::to_string(m.rows()) + "x" +
                      std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  if (!m.allFinite()) throw NumericError("weights: '" + name + "' has non-finite entries");
}

void expect_shape(const Vector& v, Eigen::Index n, const std::string& name) {
  if (v.size() != n)
    throw ConfigError("weights: '" + name + "' has length " + std::to_string(v.size()) +
                      ", expected " + std::to_string(n));
  if (!v.allFinite()) throw NumericError("weights: '" + name + "' has non-finite entries");
}

// Visits every tensor with its canonical archive name.
template <class WS, class MatrixFn, class VectorFn>
void for_each_tensor(WS& w, const ModelConfig& c, MatrixFn&& mat, VectorFn&& vec) {
  const int d = c.model_dim, hd = c.head_dim;
  mat("embed.weight", w.patch_embed, c.input_dim, d);
  vec("embed.bias", w.patch_bias, d);
  mat("embed.position", w.position, c.patch_count, d);
  for (int l = 0; l < c.layers; ++l) {
    auto& layer = w.layers[l];
    vec(layer_key(l, "attn_norm.gamma"), layer.attn_norm.gamma, d);
    vec(layer_key(l, "attn_norm.beta"), layer.attn_norm.beta, d);
    for (int h = 0; h < c.heads_per_layer; ++h) {
      auto& head = layer.heads[h];
      mat(head_key(l, h, "query"), head.query, d, hd);
      mat(head_key(l, h, "key"), head.key, d, hd);
      mat(head_key(l, h, "value"), head.value, d, hd);
      vec(head_key(l, h, "query_bias"), head.query_bias, hd);
      vec(head_key(l, h, "key_bias"), head.key_bias, hd);
      vec(head_key(l, h, "value_bias"), head.value_bias, hd);
      mat(head_key(l, h, "output"), head.output, hd, d);
    }
    vec(layer_key(l, "mlp_norm.gamma"), layer.mlp_norm.gamma, d);
    vec(layer_key(l, "mlp_norm.beta"), layer.mlp_norm.beta, d);
    mat(layer_key(l, "mlp.in"), layer.mlp_in, d, c.mlp_hidden_dim);
    vec(layer_key(l, "mlp.in_bias"), layer.mlp_in_bias, c.mlp_hidden_dim);
    mat(layer_key(l, "mlp.out"), layer.mlp_out, c.mlp_hidden_dim, d);
    vec(layer_key(l, "mlp.out_bias"), layer.mlp_out_bias, d);
  }
  vec("final_norm.gamma", w.final_norm.gamma, d);
  vec("final_norm.beta", w.final_norm.beta, d);
  if (c.head_mode == HeadMode::classifier) {
    mat("head.classifier", w.classifier, c.num_classes, d);
    vec("head.classifier_bias", w.classifier_bias, c.num_classes);
  } else {
    mat("head.projection", w.projection, d, c.embed_dim);
    mat("head.class_embeddings", w.class_embeddings, c.num_classes, c.embed_dim);
  }
}

void size_layers(WeightSet& w, const ModelConfig& c) {
  w.layers.resize(c.layers);
  for (auto& layer : w.layers) layer.heads.resize(c.heads_per_layer);
}

}  // namespace

WeightSet WeightSet::zeros(const ModelConfig& config) {
  config.validate();
  WeightSet w;
  size_layers(w, config);
  for_each_tensor(
      w, config, [](const std::string&, Field& m, int r, int c) { m = Field::Zero(r, c); },
      [](const std::string& name, Vector& v, int n) {
        const bool gain = name.size() > 5 && name.compare(name.size() - 5, 5, "gamma") == 0;
        v = gain ? Vector::Ones(n) : Vector::Zero(n);
      });
  return w;
}

WeightSet WeightSet::random(const ModelConfig& config, std::uint64_t seed, double scale) {
  config.validate();
  WeightSet w;
  size_layers(w, config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for_each_tensor(
      w, config,
      [&](const std::string&, Field& m, int r, int c) {
        const double s = scale / std::sqrt(static_cast<double>(r));
        m.resize(r, c);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) m(i, j) = to_storage(s * normal(rng));
      },
      [&](const std::string& name, Vector& v, int n) {
        const bool gain = name.size() > 5 && name.compare(name.size() - 5, 5, "gamma") == 0;
        v.resize(n);
        for (int i = 0; i < n; ++i)
          v(i) = to_storage((gain ? 1.0 : 0.0) + 0.1 * scale * normal(rng));
      });
  return w;
}

void WeightSet::validate(const ModelConfig& config) const {
  config.validate();
  if (static_cast<int>(layers.size()) != config.layers)
    throw ConfigError("weights: expected " + std::to_string(config.layers) + " layers");
  for (const auto& layer : layers)
    if (static_cast<int>(layer.heads.size()) != config.heads_per_layer)
      throw ConfigError("weights: expected " + std::to_string(config.heads_per_layer) +
                        " heads per layer");
  if (config.head_mode == HeadMode::contrastive &&
      (class_embeddings.size() == 0 || projection.size() == 0))
    throw ConfigError("weights: contrastive head requires a projection and class embeddings");
  for_each_tensor(
      *this, config,
      [](const std::string& name, const Field& m, int r, int c) { expect_shape(m, r, c, name); },
      [](const std::string& name, const Vector& v, int n) { expect_shape(v, n, name); });
}

Archive WeightSet::to_archive() const {
  Archive a;
  // Shapes come from the tensors themselves; the config only selects names.
  ModelConfig c;
  c.layers = static_cast<int>(layers.size());
  c.heads_per_layer = layers.empty() ? 1 : static_cast<int>(layers[0].heads.size());
  c.head_mode = class_embeddings.size() > 0 ? HeadMode::contrastive : HeadMode::classifier;
  for_each_tensor(
      *this, c, [&](const std::string& name, const Field& m, int, int) { a.put(name, m); },
      [&](const std::string& name, const Vector& v, int) { a.put(name, v); });
  return a;
}

WeightSet WeightSet::from_archive(const Archive& a, const ModelConfig& config) {
  config.validate();
  WeightSet w;
  size_layers(w, config);
  std::size_t seen = 0;
  for_each_tensor(
      w, config,
      [&](const std::string& name, Field& m, int r, int c) {
        m = a.get_matrix(name, r, c);
        ++seen;
      },
      [&](const std::string& name, Vector& v, int n) {
        v = a.get_vector(name, n);
        ++seen;
      });
  if (seen != a.tensors.size()) {
    WeightSet probe = WeightSet::zeros(config);
    std::vector<std::string> known;
    for_each_tensor(
        probe, config, [&](const std::string& name, Field&, int, int) { known.push_back(name); },
        [&](const std::string& name, Vector&, int) { known.push_back(name); });
    for (const auto& [name, t] : a.tensors)
      if (std::find(known.begin(), known.end(), name) == known.end())
        throw FormatError("archive: unknown tensor '" + name + "'");
  }
  w.validate(config);
  return w;
}

Model::Model(ModelConfig config, WeightSet weights)
    : config_(std::move(config)), weights_(std::move(weights)), graph_(build_graph(config_)) {
  weights_.validate(config_);
}

Field Model::embed(const Field& raw) const {
  if (raw.rows() != config_.patch_count || raw.cols() != config_.input_dim)
    throw ConfigError("input is " + std::to_string(raw.rows()) + "x" + std::to_string(raw.cols()) +
                      ", expected " + std::to_string(config_.patch_count) + "x" +
                      std::to_string(config_.input_dim));
  Field e = (raw * weights_.patch_embed).rowwise() + weights_.patch_bias.transpose();
  e += weights_.position;
  check_finite(e, "input");
  return e;
}

std::string model_digest(const Model& model) {
  const auto bytes = encode_archive(model_to_archive(model));
  return hex_digest(fnv1a(bytes.data(), bytes.size()));
}

Archive model_to_archive(const Model& model) {
  Archive a = model.weights().to_archive();
  a.metadata = {{"kind", "model"}, {"config", model.config().to_json()}};
  return a;
}

Model model_from_archive(const Archive& a) {
  if (!a.metadata.contains("config")) throw FormatError("archive: no model config in metadata");
  ModelConfig config = ModelConfig::from_json(a.metadata.at("config"));
  return Model(config, WeightSet::from_archive(a, config));
}

void save_model(const Model& model, const std::string& path) {
  write_archive(path, model_to_archive(model));
}

Model load_model(const std::string& path) { return model_from_archive(read_archive(path)); }

ForwardTrace forward_with_trace(const Model& model, const Field& raw) {
  const Graph& g = model.graph();
  PassState state = start_pass(model, model.embed(raw));
  run_receivers(model, state, 0,
                [&](int r, const PassState& s) { return sum_live(g, r, s.live); });

  ForwardTrace trace;
  trace.residual_snapshot.push_back(state.live[0]);
  for (int l = 0; l < g.layers(); ++l) {
    Field next = trace.residual_snapshot.back();
    for (int h = 0; h < g.heads(); ++h) next += state.live[g.head_sender(l, h)];
    next += state.live[g.mlp_sender(l)];
    trace.residual_snapshot.push_back(std::move(next));
  }
  trace.sender_contribution = std::move(state.live);
  trace.logits = std::move(state.logits);
  return trace;
}

Vector logits_from_head(const Model& model, const Field& final_residual) {
  PassState state;
  state.live.resize(model.graph().senders().size());
  evaluate_receiver(model, model.graph().logits_receiver(), final_residual, state);
  return state.logits;
}

Vector image_embedding(const Model& model, const Field& final_residual) {
  const auto& c = model.config();
  if (c.head_mode != HeadMode::contrastive)
    throw ConfigError("image_embedding requires a contrastive head");
  const auto& w = model.weights();
  RowVector cls;
  if (c.final_norm) {
    Field row = final_residual.topRows(1);
    cls = kernels::layer_norm_rows(row, w.final_norm.gamma, w.final_norm.beta,
                                   c.layer_norm_epsilon);
  } else {
    cls = final_residual.row(0);
  }
  return (cls * w.projection).transpose();
}

}  // namespace vitcd
