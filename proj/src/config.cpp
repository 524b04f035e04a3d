#include "vitcd/config.hpp"

#include <cstdio>

namespace vitcd {

std::string hex_digest(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string to_string(HeadMode m) {
  return m == HeadMode::classifier ? "classifier" : "contrastive";
}
std::string to_string(NormKind k) { return k == NormKind::layer_norm ? "layer_norm" : "none"; }
std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "identity"; }

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("model config: " + what);
}

template <class Enum>
Enum parse_enum(const nlohmann::json& j, const char* key, Enum fallback,
                std::initializer_list<std::pair<const char*, Enum>> values) {
  if (!j.contains(key)) return fallback;
  const auto s = j.at(key).get<std::string>();
  for (const auto& [name, v] : values)
    if (s == name) return v;
  throw ConfigError(std::string("model config: unknown ") + key + " '" + s + "'");
}

}  // namespace

void ModelConfig::validate() const {
  require(layers >= 1, "layers must be >= 1");
  require(heads_per_layer >= 1, "heads_per_layer must be >= 1");
  require(model_dim >= 1, "model_dim must be >= 1");
  require(head_dim >= 1, "head_dim must be >= 1");
  require(mlp_hidden_dim >= 1, "mlp_hidden_dim must be >= 1");
  require(patch_count >= 2, "patch_count must be >= 2 (class token plus one patch)");
  require(num_classes >= 1, "num_classes must be >= 1");
  require(input_dim >= 1, "input_dim must be >= 1");
  require(head_mode == HeadMode::classifier || embed_dim >= 1, "embed_dim must be >= 1");
  require(layer_norm_epsilon > 0, "layer_norm_epsilon must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"layers", layers},
      {"heads_per_layer", heads_per_layer},
      {"model_dim", model_dim},
      {"head_dim", head_dim},
      {"mlp_hidden_dim", mlp_hidden_dim},
      {"patch_count", patch_count},
      {"num_classes", num_classes},
      {"input_dim", input_dim},
      {"embed_dim", embed_dim},
      {"head_mode", to_string(head_mode)},
      {"norm", to_string(norm)},
      {"activation", to_string(activation)},
      {"final_norm", final_norm},
      {"layer_norm_epsilon", layer_norm_epsilon},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config: expected an object");
  ModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.heads_per_layer = j.value("heads_per_layer", c.heads_per_layer);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.mlp_hidden_dim = j.value("mlp_hidden_dim", c.mlp_hidden_dim);
    c.patch_count = j.value("patch_count", c.patch_count);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.final_norm = j.value("final_norm", c.final_norm);
    c.layer_norm_epsilon = j.value("layer_norm_epsilon", c.layer_norm_epsilon);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.head_mode = parse_enum(j, "head_mode", c.head_mode,
                           {{"classifier", HeadMode::classifier},
                            {"contrastive", HeadMode::contrastive}});
  c.norm = parse_enum(j, "norm", c.norm,
                      {{"layer_norm", NormKind::layer_norm}, {"none", NormKind::none}});
  c.activation = parse_enum(j, "activation", c.activation,
                            {{"gelu", Activation::gelu}, {"identity", Activation::identity}});
  c.validate();
  return c;
}

std::string ModelConfig::digest() const { return hex_digest(fnv1a(to_json().dump())); }

}  // namespace vitcd
