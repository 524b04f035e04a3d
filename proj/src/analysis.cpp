#include "vitcd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace vitcd {

double jaccard(const CircuitMask& a, const CircuitMask& b) {
  a.check_compatible(b);
  std::size_t inter = 0, uni = 0;
  for (std::size_t e = 0; e < a.size(); ++e) {
    inter += a.contains(e) && b.contains(e);
    uni += a.contains(e) || b.contains(e);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

void CircuitEnsemble::validate() const {
  if (masks.empty()) throw ArgumentError("circuit ensemble is empty");
  for (const auto& m : masks) m.check_compatible(masks.front());
}

std::vector<double> inclusion_frequency(const CircuitEnsemble& ensemble) {
  ensemble.validate();
  const std::size_t edges = ensemble.masks.front().size();
  std::vector<int> hits(edges, 0);
  for (const auto& m : ensemble.masks)
    for (std::size_t e = 0; e < edges; ++e) hits[e] += m.contains(e);
  std::vector<double> out(edges);
  for (std::size_t e = 0; e < edges; ++e) out[e] = double(hits[e]) / double(ensemble.masks.size());
  return out;
}

std::string to_string(Stability s) {
  switch (s) {
    case Stability::stable: return "stable";
    case Stability::borderline: return "borderline";
    case Stability::unstable: return "unstable";
  }
  return {};
}

Stability stability_of(double frequency) {
  if (frequency > 0.9) return Stability::stable;
  if (frequency >= 0.5) return Stability::borderline;
  return Stability::unstable;
}

StabilityHistogram stability_categories(const Graph& g, const std::vector<double>& frequencies,
                                        bool all_edges) {
  if (frequencies.size() != g.edges().size())
    throw ArgumentError("stability_categories: frequency vector does not match the graph");
  StabilityHistogram h;
  for (std::size_t e = 0; e < frequencies.size(); ++e) {
    if (!all_edges && frequencies[e] == 0) continue;
    const int type = static_cast<int>(g.edges()[e].type);
    ++h.counts[type][static_cast<int>(stability_of(frequencies[e]))];
  }
  return h;
}

CircuitMask circuit_union(const CircuitMask& a, const CircuitMask& b) {
  a.check_compatible(b);
  CircuitMask out = a;
  for (std::size_t e = 0; e < b.size(); ++e)
    if (b.contains(e)) out.set(e, true);
  return out;
}

CircuitMask circuit_intersection(const CircuitMask& a, const CircuitMask& b) {
  a.check_compatible(b);
  CircuitMask out = a;
  for (std::size_t e = 0; e < b.size(); ++e)
    if (!b.contains(e)) out.set(e, false);
  return out;
}

CircuitMask core_edges(const CircuitEnsemble& ensemble) {
  ensemble.validate();
  CircuitMask out = ensemble.masks.front();
  for (const auto& m : ensemble.masks) out = circuit_intersection(out, m);
  return out;
}

CircuitMask ensemble_union(const CircuitEnsemble& ensemble) {
  ensemble.validate();
  CircuitMask out = ensemble.masks.front();
  for (const auto& m : ensemble.masks) out = circuit_union(out, m);
  return out;
}

double mean_pairwise_jaccard(const CircuitEnsemble& ensemble) {
  ensemble.validate();
  const auto& ms = ensemble.masks;
  if (ms.size() < 2) return 1.0;
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < ms.size(); ++i)
    for (std::size_t j = i + 1; j < ms.size(); ++j, ++pairs) total += jaccard(ms[i], ms[j]);
  return total / double(pairs);
}

JaccardStats cross_jaccard(const CircuitEnsemble& a, const CircuitEnsemble& b) {
  a.validate();
  b.validate();
  std::vector<double> values;
  for (const auto& x : a.masks)
    for (const auto& y : b.masks) values.push_back(jaccard(x, y));
  JaccardStats s;
  for (double v : values) s.mean += v;
  s.mean /= double(values.size());
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / double(values.size()));
  return s;
}

BinaryCircuitEval binary_circuit_eval(const Model& model, const CircuitMask& circuit, int class_a,
                                      int class_b, const RunCache& pairs,
                                      const CircuitMask& union_a, const CircuitMask& union_b,
                                      PatchMode mode) {
  circuit.check_compatible(model.graph());
  circuit.check_compatible(union_a);
  circuit.check_compatible(union_b);
  if (pairs.examples.empty()) throw ArgumentError("binary_circuit_eval: no pairs");
  BinaryCircuitEval out;
  int correct = 0;
  for (const auto& ex : pairs.examples) {
    const Vector logits = patched_forward(model, ex, circuit, mode);
    const int predicted = logits(class_a) >= logits(class_b) ? class_a : class_b;
    correct += predicted == ex.label;
  }
  out.accuracy = double(correct) / double(pairs.examples.size());
  for (int e : circuit.edge_indices()) {
    const bool in_a = union_a.contains(e), in_b = union_b.contains(e);
    if (in_a && in_b) ++out.both;
    else if (in_a) ++out.a_only;
    else if (in_b) ++out.b_only;
    else ++out.only_binary;
  }
  return out;
}

nlohmann::json analysis_report(const Graph& g, const CircuitEnsemble& ensemble, bool all_edges) {
  ensemble.validate();
  ensemble.masks.front().check_compatible(g);
  const auto freq = inclusion_frequency(ensemble);
  const auto hist = stability_categories(g, freq, all_edges);

  std::vector<std::size_t> sizes;
  for (const auto& m : ensemble.masks) sizes.push_back(m.count());
  double mean = 0;
  for (auto s : sizes) mean += double(s);
  mean /= double(sizes.size());
  double var = 0;
  for (auto s : sizes) var += (double(s) - mean) * (double(s) - mean);

  nlohmann::json stability = nlohmann::json::object();
  for (int t = 0; t < kEdgeTypeCount; ++t) {
    stability[to_string(static_cast<EdgeType>(t))] = {{"stable", hist.counts[t][0]},
                                                      {"borderline", hist.counts[t][1]},
                                                      {"unstable", hist.counts[t][2]}};
  }
  nlohmann::json core = nlohmann::json::array();
  for (int e : core_edges(ensemble).edge_indices()) core.push_back(g.edge_name(e));
  nlohmann::json frequencies = nlohmann::json::object();
  for (std::size_t e = 0; e < freq.size(); ++e)
    if (freq[e] > 0) frequencies[g.edge_name(static_cast<int>(e))] = freq[e];

  return {
      {"circuits", ensemble.masks.size()},
      {"graph_fingerprint", g.fingerprint_hex()},
      {"provenance", ensemble.provenance},
      {"mean_pairwise_jaccard", mean_pairwise_jaccard(ensemble)},
      {"size",
       {{"mean", mean},
        {"std", std::sqrt(var / double(sizes.size()))},
        {"min", *std::min_element(sizes.begin(), sizes.end())},
        {"max", *std::max_element(sizes.begin(), sizes.end())}}},
      {"stability_universe", all_edges ? "all_edges" : "union"},
      {"stability_by_edge_type", stability},
      {"inclusion_frequency", frequencies},
      {"core_edges", core},
  };
}

std::string similarity_csv(const std::map<std::string, CircuitEnsemble>& groups) {
  std::string out = "class_a,class_b,jaccard_mean,jaccard_std\n";
  char buf[512];
  for (const auto& [a, ea] : groups)
    for (const auto& [b, eb] : groups) {
      const auto s = cross_jaccard(ea, eb);
      std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%.6g\n", a.c_str(), b.c_str(), s.mean, s.std);
      out += buf;
    }
  return out;
}

}  // namespace vitcd
