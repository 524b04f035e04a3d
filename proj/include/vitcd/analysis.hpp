#pragma once

// Structure of discovered circuits: set similarity, inclusion frequencies,
// stability buckets per edge type, core edges, unions and binary circuits.

#include "vitcd/patching.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <map>
#include <string>
#include <vector>

namespace vitcd {

/// |A & B| / |A | B|, with J(empty, empty) = 1.
double jaccard(const CircuitMask& a, const CircuitMask& b);

struct CircuitEnsemble {
  std::vector<CircuitMask> masks;
  nlohmann::json provenance = nlohmann::json::object();  // class, seeds, batch size, threshold

  void validate() const;  // nonempty, one fingerprint
};

/// Fraction of masks containing each edge (multiples of 1/n).
std::vector<double> inclusion_frequency(const CircuitEnsemble& ensemble);

enum class Stability { stable, borderline, unstable };
std::string to_string(Stability s);
/// stable > 0.9, borderline [0.5, 0.9], unstable < 0.5.
Stability stability_of(double frequency);

struct StabilityHistogram {
  // counts[edge type][stable, borderline, unstable]
  std::array<std::array<int, 3>, kEdgeTypeCount> counts{};
};

/// By default only edges included at least once are counted (the union is the
/// universe); `all_edges` counts never-included edges as unstable too.
StabilityHistogram stability_categories(const Graph& g, const std::vector<double>& frequencies,
                                        bool all_edges = false);

CircuitMask core_edges(const CircuitEnsemble& ensemble);
CircuitMask circuit_union(const CircuitMask& a, const CircuitMask& b);
CircuitMask circuit_intersection(const CircuitMask& a, const CircuitMask& b);

/// Mean Jaccard over unordered pairs of distinct members (1 for a single mask).
double mean_pairwise_jaccard(const CircuitEnsemble& ensemble);

struct JaccardStats {
  double mean = 0;
  double std = 0;
};

/// Jaccard over all cross pairs (a_i, b_j).
JaccardStats cross_jaccard(const CircuitEnsemble& a, const CircuitEnsemble& b);

struct BinaryCircuitEval {
  double accuracy = 0;
  int a_only = 0;
  int b_only = 0;
  int both = 0;
  int only_binary = 0;
};

/// Two-class accuracy (argmax over {class_a, class_b}) of patched passes
/// restricted to `circuit`, plus its edge partition against the per-class unions.
BinaryCircuitEval binary_circuit_eval(const Model& model, const CircuitMask& circuit, int class_a,
                                      int class_b, const RunCache& pairs,
                                      const CircuitMask& union_a, const CircuitMask& union_b,
                                      PatchMode mode = PatchMode::live);

/// Fold of circuit_union over the ensemble.
CircuitMask ensemble_union(const CircuitEnsemble& ensemble);

/// {mean pairwise Jaccard, size stats, stability histogram per edge type, core edges}.
nlohmann::json analysis_report(const Graph& g, const CircuitEnsemble& ensemble,
                               bool all_edges = false);

/// "class_a,class_b,jaccard_mean,jaccard_std" rows over every pair of groups.
std::string similarity_csv(const std::map<std::string, CircuitEnsemble>& groups);

}  // namespace vitcd
