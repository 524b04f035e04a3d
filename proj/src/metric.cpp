#include "vitcd/metric.hpp"

#include "vitcd/kernels.hpp"

namespace vitcd {

std::string MetricSpec::name() const {
  return kind == MetricKind::target_logit_diff ? "logitdiff" : "kl";
}

MetricSpec MetricSpec::parse(const std::string& name) {
  if (name == "logitdiff") return logit_diff();
  if (name == "kl") return kl();
  throw ArgumentError("unknown metric '" + name + "' (expected logitdiff or kl)");
}

Scalar metric_value(const MetricSpec& spec, const Vector& clean_logits,
                    const Vector& patched_logits, int label) {
  if (spec.kind == MetricKind::target_logit_diff) {
    const int t = spec.target_for(label);
    if (t < 0 || t >= clean_logits.size()) throw ArgumentError("metric target out of range");
    return clean_logits(t) - patched_logits(t);
  }
  const Vector log_p = kernels::log_softmax(clean_logits);
  const Vector log_q = kernels::log_softmax(patched_logits);
  return (log_p.array().exp() * (log_p - log_q).array()).sum();
}

Vector metric_gradient(const MetricSpec& spec, const Vector& clean_logits,
                       const Vector& patched_logits, int label) {
  if (spec.kind == MetricKind::target_logit_diff) {
    const int t = spec.target_for(label);
    if (t < 0 || t >= clean_logits.size()) throw ArgumentError("metric target out of range");
    Vector g = Vector::Zero(patched_logits.size());
    g(t) = -1;
    return g;
  }
  return kernels::softmax(patched_logits) - kernels::softmax(clean_logits);
}

}  // namespace vitcd
