#pragma once

// Clean/corrupted run caches and circuit-restricted forward passes.
//
// In a patched pass every receiver reads, edge by edge, either the sender's
// live output (edge in the circuit) or the sender's output from the corrupted
// run (edge pruned). In live mode circuit senders recompute from their own
// patched inputs; cached mode uses the clean run's outputs verbatim.

#include "vitcd/data.hpp"
#include "vitcd/metric.hpp"
#include "vitcd/model.hpp"
#include "vitcd/runtime.hpp"

#include <span>
#include <vector>

namespace vitcd {

struct ExampleCache {
  std::vector<Field> clean;      // r_u(x) per sender
  std::vector<Field> corrupted;  // r_u(x~) per sender
  Vector clean_logits, corrupted_logits;
  int label = 0;
};

struct RunCache {
  std::vector<ExampleCache> examples;
  std::uint64_t fingerprint = 0;
};

enum class PatchMode { live, cached };
std::string to_string(PatchMode m);
PatchMode parse_patch_mode(const std::string& s);

ExampleCache cache_example(const Model& model, const Field& clean_raw, const Field& corrupted_raw,
                           int label);

/// With `use_attack_target` the metric label of each pair is its attack target.
RunCache cache_runs(const Model& model, std::span<const PairedExample> pairs,
                    bool use_attack_target = false);

Vector patched_forward(const Model& model, const ExampleCache& ex, const CircuitMask& mask,
                       PatchMode mode = PatchMode::live);
std::vector<Vector> patched_forward(const Model& model, const RunCache& cache,
                                    const CircuitMask& mask, PatchMode mode = PatchMode::live);

/// Live patched pass resumed at `first_receiver`; outputs of senders read by
/// earlier receivers must already be in `state`.
void patched_resume(const Model& model, const ExampleCache& ex, const CircuitMask& mask,
                    PassState& state, int first_receiver);

/// Batch mean of the per-example metric against each example's clean logits.
Scalar evaluate_metric(const MetricSpec& spec, const std::vector<Vector>& patched_logits,
                       const RunCache& cache);

/// Top-1 accuracy of patched passes against each example's label.
Scalar patched_accuracy(const Model& model, const RunCache& cache, const CircuitMask& mask,
                        PatchMode mode = PatchMode::live);

/// M(full) - M(mask) with M the patched top-1 accuracy. The gap is not
/// monotone in the mask. Throws ArgumentError on an empty set.
Scalar faithfulness_gap(const Model& model, const CircuitMask& mask, const RunCache& eval,
                        PatchMode mode = PatchMode::live);

int argmax(const Vector& v);

}  // namespace vitcd
