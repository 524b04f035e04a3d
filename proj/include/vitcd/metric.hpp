#pragma once

#include "vitcd/types.hpp"

#include <optional>
#include <string>

namespace vitcd {

enum class MetricKind { target_logit_diff, kl_divergence };

/// Pruning criterion, always anchored on the clean run's logits.
struct MetricSpec {
  MetricKind kind = MetricKind::target_logit_diff;
  /// Fixed target class; when unset each example's own label is the target.
  std::optional<int> target;

  static MetricSpec logit_diff(std::optional<int> target = std::nullopt) {
    return {MetricKind::target_logit_diff, target};
  }
  static MetricSpec kl() { return {MetricKind::kl_divergence, std::nullopt}; }

  std::string name() const;  // "logitdiff" | "kl"
  static MetricSpec parse(const std::string& name);
  int target_for(int label) const { return target ? *target : label; }
};

/// clean[t] - patched[t], or KL(softmax(clean) || softmax(patched)).
Scalar metric_value(const MetricSpec& spec, const Vector& clean_logits,
                    const Vector& patched_logits, int label);

/// d metric / d patched_logits.
Vector metric_gradient(const MetricSpec& spec, const Vector& clean_logits,
                       const Vector& patched_logits, int label);

}  // namespace vitcd
