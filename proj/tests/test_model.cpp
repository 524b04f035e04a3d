#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vitcd/model.hpp"
#include "vitcd/synthetic.hpp"

#include <cmath>

using namespace vitcd;
using test_util::rel_err;

namespace {

// Straight-line pre-norm transformer written from the definitions, with no
// graph machinery: residual += sum_h attn_h(LN(residual)); residual += MLP(LN(residual)).
Field ln(const Field& x, const Vector& g, const Vector& b, double eps) {
  Field y(x.rows(), x.cols());
  for (int i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    double var = 0;
    for (int j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= x.cols();
    for (int j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * g(j) + b(j);
  }
  return y;
}

Vector reference_logits(const Model& m, const Field& raw) {
  const auto& c = m.config();
  const auto& w = m.weights();
  auto norm = [&](const Field& x, const NormWeights& n) {
    return c.norm == NormKind::layer_norm ? ln(x, n.gamma, n.beta, c.layer_norm_epsilon) : x;
  };
  Field r = raw * w.patch_embed;
  for (int i = 0; i < r.rows(); ++i) r.row(i) += w.patch_bias.transpose() + w.position.row(i);
  for (int l = 0; l < c.layers; ++l) {
    const auto& L = w.layers[l];
    const Field a = norm(r, L.attn_norm);
    Field delta = Field::Zero(r.rows(), r.cols());
    for (const auto& h : L.heads) {
      Field q = a * h.query, k = a * h.key, v = a * h.value;
      for (int i = 0; i < r.rows(); ++i) {
        q.row(i) += h.query_bias.transpose();
        k.row(i) += h.key_bias.transpose();
        v.row(i) += h.value_bias.transpose();
      }
      Field s = q * k.transpose() / std::sqrt(double(c.head_dim));
      for (int i = 0; i < s.rows(); ++i) {
        const double mx = s.row(i).maxCoeff();
        double z = 0;
        for (int j = 0; j < s.cols(); ++j) z += (s(i, j) = std::exp(s(i, j) - mx));
        s.row(i) /= z;
      }
      delta += s * v * h.output;
    }
    r += delta;
    const Field b = norm(r, L.mlp_norm);
    Field hid = b * L.mlp_in;
    for (int i = 0; i < hid.rows(); ++i)
      for (int j = 0; j < hid.cols(); ++j) {
        const double x = hid(i, j) + L.mlp_in_bias(j);
        hid(i, j) = c.activation == Activation::gelu ? 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))) : x;
      }
    Field out = hid * L.mlp_out;
    for (int i = 0; i < out.rows(); ++i) out.row(i) += L.mlp_out_bias.transpose();
    r += out;
  }
  RowVector cls = r.row(0);
  if (c.final_norm) cls = ln(Field(cls), w.final_norm.gamma, w.final_norm.beta, c.layer_norm_epsilon);
  if (c.head_mode == HeadMode::classifier) return w.classifier * cls.transpose() + w.classifier_bias;
  return w.class_embeddings * (cls * w.projection).transpose();
}

int argmax_index(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

}  // namespace

TEST_CASE("forward pass matches a straight-line reference") {
  for (std::uint64_t s = 0; s < 30; ++s) {
    RandomModelOptions o;
    o.head_mode = s % 2 ? HeadMode::contrastive : HeadMode::classifier;
    const Model m = random_model(s, o);
    const Field x = random_tokens(m.config(), 100 + s);
    const ForwardTrace t = forward_with_trace(m, x);
    CHECK(rel_err(t.logits, reference_logits(m, x)) < 1e-12);
  }
}

TEST_CASE("trace is consistent: residual snapshots are sums of sender contributions") {
  const Model m = random_model(7);
  const Graph& g = m.graph();
  const ForwardTrace t = forward_with_trace(m, random_tokens(m.config(), 8));
  REQUIRE(t.sender_contribution.size() == g.senders().size());
  REQUIRE(t.residual_snapshot.size() == std::size_t(m.config().layers + 1));
  Field acc = t.sender_contribution[0];
  CHECK(rel_err(acc, t.residual_snapshot[0]) < 1e-14);
  for (int l = 0; l < m.config().layers; ++l) {
    for (int h = 0; h < g.heads(); ++h) acc += t.sender_contribution[g.head_sender(l, h)];
    acc += t.sender_contribution[g.mlp_sender(l)];
    CHECK(rel_err(acc, t.residual_snapshot[l + 1]) < 1e-12);
  }
  CHECK(rel_err(logits_from_head(m, t.residual_snapshot.back()), t.logits) < 1e-14);
}

TEST_CASE("contrastive embedding feeds the logits") {
  RandomModelOptions o;
  o.head_mode = HeadMode::contrastive;
  const Model m = random_model(3, o);
  const ForwardTrace t = forward_with_trace(m, random_tokens(m.config(), 4));
  const Vector e = image_embedding(m, t.residual_snapshot.back());
  CHECK(rel_err(Vector(m.weights().class_embeddings * e), t.logits) < 1e-12);
  CHECK_THROWS_AS(image_embedding(random_model(3), t.residual_snapshot.back()), ConfigError);
}

TEST_CASE("model archives round-trip byte for byte") {
  const std::string dir = test_util::scratch_dir("model");
  const Model m = random_model(11);
  save_model(m, dir + "/a.cfw");
  const Model back = load_model(dir + "/a.cfw");
  save_model(back, dir + "/b.cfw");
  CHECK(test_util::slurp(dir + "/a.cfw") == test_util::slurp(dir + "/b.cfw"));
  CHECK(model_digest(m) == model_digest(back));
  const Field x = random_tokens(m.config(), 1);
  CHECK(forward_with_trace(m, x).logits == forward_with_trace(back, x).logits);
  CHECK(model_digest(m) != model_digest(random_model(12)));
}

TEST_CASE("strict weight loading") {
  const Model m = random_model(5);
  Archive a = model_to_archive(m);
  Archive extra = a;
  extra.put("stray", Vector(Vector::Zero(2)));
  CHECK_THROWS_AS(model_from_archive(extra), FormatError);
  Archive missing = a;
  missing.tensors.erase(missing.tensors.begin());
  CHECK_THROWS_AS(model_from_archive(missing), FormatError);
  Archive noconfig = a;
  noconfig.metadata.erase("config");
  CHECK_THROWS_AS(model_from_archive(noconfig), FormatError);

  WeightSet w = m.weights();
  w.layers[0].mlp_in(0, 0) = std::nan("");
  CHECK_THROWS_AS(Model(m.config(), w), NumericError);
  WeightSet bad = m.weights();
  bad.classifier.resize(1, 1);
  CHECK_THROWS_AS(Model(m.config(), bad), ConfigError);
}

TEST_CASE("config validation and parsing") {
  ModelConfig c;
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(ModelConfig::from_json({{"layers", 0}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"layers", "two"}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"norm", "batch"}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"patch_count", 1}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json::array()), ConfigError);
  ModelConfig d = c;
  d.heads_per_layer = 3;
  CHECK(c.digest() != d.digest());
}

TEST_CASE("embedding rejects wrong input shapes and non-finite values") {
  const Model m = random_model(2);
  CHECK_THROWS_AS(m.embed(Field::Zero(m.config().patch_count + 1, m.config().input_dim)), ConfigError);
  Field x = random_tokens(m.config(), 3);
  x(0, 0) = INFINITY;
  CHECK_THROWS_AS(forward_with_trace(m, x), NumericError);
}

TEST_CASE("planted models classify their own task") {
  for (std::uint64_t s = 0; s < 4; ++s) {
    for (const PlantedModel& p : {planted_single_head_model(s), planted_class_model(s)}) {
      int right = 0, total = 0;
      for (int c = 0; c < 4; ++c)
        for (const auto& x : generate_class_pairs(p.task, c, 10)) {
          right += argmax_index(forward_with_trace(p.model, x.clean).logits) == c;
          ++total;
        }
      CHECK(right >= total * 9 / 10);
      for (const auto& e : p.essential_edges) CHECK(e.find("->") != std::string::npos);
    }
  }
}
