#include "vitcd/patching.hpp"

namespace vitcd {

std::string to_string(PatchMode m) { return m == PatchMode::live ? "live" : "cached"; }

PatchMode parse_patch_mode(const std::string& s) {
  if (s == "live") return PatchMode::live;
  if (s == "cached") return PatchMode::cached;
  throw ArgumentError("unknown patch mode '" + s + "'");
}

int argmax(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

ExampleCache cache_example(const Model& model, const Field& clean_raw, const Field& corrupted_raw,
                           int label) {
  ExampleCache ex;
  ForwardTrace clean = forward_with_trace(model, clean_raw);
  ForwardTrace corrupted = forward_with_trace(model, corrupted_raw);
  ex.clean = std::move(clean.sender_contribution);
  ex.clean_logits = std::move(clean.logits);
  ex.corrupted = std::move(corrupted.sender_contribution);
  ex.corrupted_logits = std::move(corrupted.logits);
  ex.label = label;
  return ex;
}

RunCache cache_runs(const Model& model, std::span<const PairedExample> pairs,
                    bool use_attack_target) {
  RunCache cache;
  cache.fingerprint = model.graph().fingerprint();
  cache.examples.reserve(pairs.size());
  for (const auto& p : pairs) {
    const int label = use_attack_target ? p.attack_target : p.label;
    if (label < 0 || label >= model.config().num_classes)
      throw ArgumentError("pair label out of range");
    cache.examples.push_back(cache_example(model, p.clean, p.corrupted, label));
  }
  return cache;
}

namespace {

Field patched_input(const Graph& g, int r, const CircuitMask& mask,
                    const std::vector<Field>& kept, const std::vector<Field>& pruned) {
  const auto [first, last] = g.incoming_range(r);
  Field in = mask.contains(first) ? kept[0] : pruned[0];
  for (int e = first + 1; e < last; ++e) {
    const int s = e - first;
    in += mask.contains(e) ? kept[s] : pruned[s];
  }
  return in;
}

}  // namespace

void patched_resume(const Model& model, const ExampleCache& ex, const CircuitMask& mask,
                    PassState& state, int first_receiver) {
  const Graph& g = model.graph();
  run_receivers(model, state, first_receiver, [&](int r, const PassState& s) {
    return patched_input(g, r, mask, s.live, ex.corrupted);
  });
}

Vector patched_forward(const Model& model, const ExampleCache& ex, const CircuitMask& mask,
                       PatchMode mode) {
  const Graph& g = model.graph();
  mask.check_compatible(g);
  if (mode == PatchMode::cached) {
    const int r = g.logits_receiver();
    return logits_from_head(model, patched_input(g, r, mask, ex.clean, ex.corrupted));
  }
  PassState state = start_pass(model, ex.clean[0]);
  patched_resume(model, ex, mask, state, 0);
  return state.logits;
}

std::vector<Vector> patched_forward(const Model& model, const RunCache& cache,
                                    const CircuitMask& mask, PatchMode mode) {
  std::vector<Vector> out;
  out.reserve(cache.examples.size());
  for (const auto& ex : cache.examples) out.push_back(patched_forward(model, ex, mask, mode));
  return out;
}

Scalar evaluate_metric(const MetricSpec& spec, const std::vector<Vector>& patched_logits,
                       const RunCache& cache) {
  if (patched_logits.size() != cache.examples.size())
    throw ArgumentError("evaluate_metric: batch size mismatch");
  if (patched_logits.empty()) return 0;
  Scalar total = 0;
  for (std::size_t i = 0; i < patched_logits.size(); ++i) {
    const auto& ex = cache.examples[i];
    total += metric_value(spec, ex.clean_logits, patched_logits[i], ex.label);
  }
  return total / Scalar(patched_logits.size());
}

Scalar patched_accuracy(const Model& model, const RunCache& cache, const CircuitMask& mask,
                        PatchMode mode) {
  if (cache.examples.empty()) throw ArgumentError("accuracy over an empty evaluation set");
  int correct = 0;
  for (const auto& ex : cache.examples)
    correct += argmax(patched_forward(model, ex, mask, mode)) == ex.label ? 1 : 0;
  return Scalar(correct) / Scalar(cache.examples.size());
}

Scalar faithfulness_gap(const Model& model, const CircuitMask& mask, const RunCache& eval,
                        PatchMode mode) {
  if (eval.examples.empty()) throw ArgumentError("faithfulness_gap: empty evaluation set");
  mask.check_compatible(model.graph());
  int full_correct = 0;
  for (const auto& ex : eval.examples) full_correct += argmax(ex.clean_logits) == ex.label ? 1 : 0;
  const Scalar full = Scalar(full_correct) / Scalar(eval.examples.size());
  return full - patched_accuracy(model, eval, mask, mode);
}

}  // namespace vitcd
