#pragma once

// Circuit extraction: sequential edge pruning by activation patching, plus the
// attribution baselines (EAP, EAP-IG) and random pruning.

#include "vitcd/patching.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace vitcd {

struct DiscoveryConfig {
  double threshold = 1e-3;
  MetricSpec metric = MetricSpec::logit_diff();
  int max_visited_nodes = 900;  // receivers
  std::uint64_t seed = 0;
  PatchMode mode = PatchMode::live;
  /// Within a receiver, test edges in ascending |EAP score| (else canonical order).
  bool order_by_attribution = true;

  void validate() const;  // throws ArgumentError
  nlohmann::json to_json() const;
};

struct EdgeDecision {
  int edge = 0;
  Scalar metric_before = 0;
  Scalar metric_after = 0;
  bool pruned = false;
};

struct DiscoveryResult {
  CircuitMask mask;
  std::vector<EdgeDecision> log;
  std::size_t patched_forwards = 0;  // per-example tentative passes
  int visited_receivers = 0;
};

struct AttributionScores {
  std::vector<Scalar> score;  // per edge, canonical order
  std::uint64_t fingerprint = 0;
};

/// Sequential pruning starting from the full graph, receivers visited in
/// reverse topological order. An edge stays pruned when the change it causes
/// in the batch-mean metric, relative to the current candidate, is below the
/// threshold in absolute value.
DiscoveryResult vicd_discover(const Model& model, const RunCache& train,
                              const DiscoveryConfig& config);

/// Batch mean of <r_u(x~) - r_u(x), d metric / d in_v> on the clean run.
/// Positive scores mean corrupting the edge raises the metric.
AttributionScores eap_scores(const Model& model, const RunCache& train, const MetricSpec& metric);

/// Like eap_scores, with gradients averaged over x~ + (k/steps)(x - x~), k = 1..steps.
AttributionScores eapig_scores(const Model& model, const RunCache& train, const MetricSpec& metric,
                               int steps);

/// Top-k by score, ties broken by canonical edge order.
CircuitMask mask_from_scores(const Graph& g, const AttributionScores& scores, std::size_t k);
/// All edges scoring at least `threshold`.
CircuitMask mask_from_threshold(const Graph& g, const AttributionScores& scores, Scalar threshold);

enum class Method { vicd, eap, eapig, random };
std::string to_string(Method m);
Method parse_method(const std::string& s);

struct SweepOptions {
  std::vector<double> grid;  // edges-remaining fractions in (0, 1]
  DiscoveryConfig discovery;
  int eapig_steps = 10;
  std::uint64_t seed = 0;
  int max_bisection = 40;
};

struct SweepPoint {
  std::string method;
  double fraction = 0;
  std::size_t edges = 0;
  double accuracy = 0;
  std::uint64_t seed = 0;
};

/// Finds Vi-CD circuits of a requested size by bisecting the threshold in log
/// space. Every run is memoized, so repeated queries share work.
class ThresholdSearch {
 public:
  ThresholdSearch(const Model& model, const RunCache& train, DiscoveryConfig base);

  /// Circuit whose size is nearest `target` (ties go to the smaller circuit)
  /// among everything tried, after at most `max_iterations` bisection steps.
  const DiscoveryResult& find(std::size_t target, int max_iterations = 40);
  const DiscoveryResult& run(double threshold);
  const std::map<double, DiscoveryResult>& runs() const { return runs_; }

 private:
  const Model& model_;
  const RunCache& train_;
  DiscoveryConfig base_;
  std::map<double, DiscoveryResult> runs_;
};

std::vector<SweepPoint> sweep_faithfulness(Method method, const Model& model,
                                           const RunCache& train, const RunCache& eval,
                                           const SweepOptions& options);

std::string sweep_csv_header();
std::string sweep_csv_rows(const std::vector<SweepPoint>& points);

/// JSON lines, one decision per edge tested.
std::string decision_log_jsonl(const Graph& g, const DiscoveryResult& r);

}  // namespace vitcd
