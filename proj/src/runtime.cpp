#include "vitcd/runtime.hpp"

#include <cmath>

namespace vitcd {

void check_finite(const Field& m, const std::string& component) {
  if (!m.allFinite()) throw NumericError("non-finite activation in " + component);
}

void check_finite(const Vector& v, const std::string& component) {
  if (!v.allFinite()) throw NumericError("non-finite activation in " + component);
}

namespace {

Field apply_norm(const Model& model, const NormWeights& w, const Field& x, bool enabled,
                 ReceiverTape* tape) {
  if (!enabled) return x;
  kernels::LayerNormCache<Scalar> cache;
  Field y = kernels::layer_norm_rows(x, w.gamma, w.beta, model.config().layer_norm_epsilon,
                                     tape ? &cache : nullptr);
  if (tape) tape->norm = std::move(cache);
  return y;
}

Field norm_backward(const NormWeights& w, const Field& grad, bool enabled,
                    const ReceiverTape& tape) {
  if (!enabled) return grad;
  return kernels::layer_norm_rows_backward(grad, w.gamma, tape.norm);
}

}  // namespace

PassState start_pass(const Model& model, const Field& embedded) {
  PassState s;
  s.live.resize(model.graph().senders().size());
  s.live[0] = embedded;
  return s;
}

Field sum_live(const Graph& g, int r, const std::vector<Field>& live) {
  const int limit = g.sender_limit(r);
  Field in = live[0];
  for (int s = 1; s < limit; ++s) in += live[s];
  return in;
}

void evaluate_receiver(const Model& model, int r, const Field& input, PassState& state,
                       ReceiverTape* tape) {
  const Graph& g = model.graph();
  const ModelConfig& c = model.config();
  const WeightSet& w = model.weights();
  const NodeId& node = g.receivers()[r];
  const bool layer_norm = c.norm == NormKind::layer_norm;

  switch (node.kind) {
    case NodeKind::attn_input: {
      const auto& layer = w.layers[node.layer];
      Field normed = apply_norm(model, layer.attn_norm, input, layer_norm, tape);
      const Scalar scale = Scalar(1) / std::sqrt(Scalar(c.head_dim));
      if (tape) {
        tape->query.resize(c.heads_per_layer);
        tape->key.resize(c.heads_per_layer);
        tape->value.resize(c.heads_per_layer);
        tape->probs.resize(c.heads_per_layer);
      }
      for (int h = 0; h < c.heads_per_layer; ++h) {
        const auto& hw = layer.heads[h];
        Field q = (normed * hw.query).rowwise() + hw.query_bias.transpose();
        Field k = (normed * hw.key).rowwise() + hw.key_bias.transpose();
        Field v = (normed * hw.value).rowwise() + hw.value_bias.transpose();
        Field probs = kernels::softmax_rows((q * k.transpose()) * scale);
        Field& out = state.live[g.head_sender(node.layer, h)];
        out.noalias() = (probs * v) * hw.output;
        check_finite(out, NodeId{NodeKind::attn_head, node.layer, h}.name());
        if (tape) {
          tape->query[h] = std::move(q);
          tape->key[h] = std::move(k);
          tape->value[h] = std::move(v);
          tape->probs[h] = std::move(probs);
        }
      }
      if (tape) tape->normed = std::move(normed);
      break;
    }
    case NodeKind::mlp: {
      const auto& layer = w.layers[node.layer];
      Field normed = apply_norm(model, layer.mlp_norm, input, layer_norm, tape);
      Field pre = (normed * layer.mlp_in).rowwise() + layer.mlp_in_bias.transpose();
      Field act = c.activation == Activation::gelu
                      ? Field(pre.unaryExpr([](Scalar x) { return kernels::gelu(x); }))
                      : pre;
      Field& out = state.live[g.mlp_sender(node.layer)];
      out = (act * layer.mlp_out).rowwise() + layer.mlp_out_bias.transpose();
      check_finite(out, node.name());
      if (tape) {
        tape->normed = std::move(normed);
        tape->pre_activation = std::move(pre);
      }
      break;
    }
    case NodeKind::logits: {
      Field normed = apply_norm(model, w.final_norm, input, c.final_norm, tape);
      RowVector cls = normed.row(0);
      if (c.head_mode == HeadMode::classifier) {
        state.logits = w.classifier * cls.transpose() + w.classifier_bias;
      } else {
        Vector embedding = (cls * w.projection).transpose();
        state.logits = w.class_embeddings * embedding;
      }
      check_finite(state.logits, "logits");
      if (tape) tape->normed = std::move(normed);
      break;
    }
    default:
      throw ArgumentError("not a receiver: " + node.name());
  }
}

Field receiver_backward(const Model& model, int r, const ReceiverTape& tape,
                        const Field& grad_sender_output, const Vector& grad_logits) {
  const Graph& g = model.graph();
  const ModelConfig& c = model.config();
  const WeightSet& w = model.weights();
  const NodeId& node = g.receivers()[r];
  const bool layer_norm = c.norm == NormKind::layer_norm;

  switch (node.kind) {
    case NodeKind::attn_input: {
      const auto& layer = w.layers[node.layer];
      const Scalar scale = Scalar(1) / std::sqrt(Scalar(c.head_dim));
      Field grad_normed = Field::Zero(tape.normed.rows(), tape.normed.cols());
      for (int h = 0; h < c.heads_per_layer; ++h) {
        const auto& hw = layer.heads[h];
        const Field grad_z = grad_sender_output * hw.output.transpose();
        const Field grad_probs = grad_z * tape.value[h].transpose();
        const Field grad_v = tape.probs[h].transpose() * grad_z;
        const Field grad_scores = kernels::softmax_rows_backward(tape.probs[h], grad_probs) * scale;
        const Field grad_q = grad_scores * tape.key[h];
        const Field grad_k = grad_scores.transpose() * tape.query[h];
        grad_normed.noalias() += grad_q * hw.query.transpose();
        grad_normed.noalias() += grad_k * hw.key.transpose();
        grad_normed.noalias() += grad_v * hw.value.transpose();
      }
      return norm_backward(layer.attn_norm, grad_normed, layer_norm, tape);
    }
    case NodeKind::mlp: {
      const auto& layer = w.layers[node.layer];
      Field grad_pre = grad_sender_output * layer.mlp_out.transpose();
      if (c.activation == Activation::gelu)
        grad_pre.array() *=
            tape.pre_activation.unaryExpr([](Scalar x) { return kernels::gelu_derivative(x); })
                .array();
      const Field grad_normed = grad_pre * layer.mlp_in.transpose();
      return norm_backward(layer.mlp_norm, grad_normed, layer_norm, tape);
    }
    case NodeKind::logits: {
      Vector grad_cls;
      if (c.head_mode == HeadMode::classifier) {
        grad_cls = w.classifier.transpose() * grad_logits;
      } else {
        grad_cls = w.projection * (w.class_embeddings.transpose() * grad_logits);
      }
      Field grad_normed = Field::Zero(tape.normed.rows(), tape.normed.cols());
      grad_normed.row(0) = grad_cls.transpose();
      return norm_backward(w.final_norm, grad_normed, c.final_norm, tape);
    }
    default:
      throw ArgumentError("not a receiver: " + node.name());
  }
}

std::vector<Field> receiver_input_gradients(const Model& model, const Field& embedded,
                                            const MetricSpec& metric,
                                            const Vector& reference_logits, int label,
                                            Vector* logits_out) {
  const Graph& g = model.graph();
  const int count = static_cast<int>(g.receivers().size());
  std::vector<ReceiverTape> tapes(count);
  PassState state = start_pass(model, embedded);
  run_receivers(
      model, state, 0, [&](int r, const PassState& s) { return sum_live(g, r, s.live); }, &tapes);

  const Vector grad_logits = metric_gradient(metric, reference_logits, state.logits, label);
  std::vector<Field> grads(count);
  // Every sender feeds every later receiver, so the gradient reaching a
  // sender's output is the running sum over the receivers already visited.
  Field downstream = Field::Zero(embedded.rows(), embedded.cols());
  for (int r = count - 1; r >= 0; --r) {
    grads[r] = receiver_backward(model, r, tapes[r], downstream, grad_logits);
    check_finite(grads[r], "gradient at " + g.receivers()[r].name());
    downstream += grads[r];
  }
  if (logits_out) *logits_out = state.logits;
  return grads;
}

}  // namespace vitcd
