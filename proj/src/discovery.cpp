#include "vitcd/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace vitcd {

void DiscoveryConfig::validate() const {
  if (!(threshold > 0) || !std::isfinite(threshold))
    throw ArgumentError("discovery threshold must be a positive finite number");
  if (max_visited_nodes < 1) throw ArgumentError("max_visited_nodes must be >= 1");
}

nlohmann::json DiscoveryConfig::to_json() const {
  nlohmann::json j = {{"threshold", threshold},
                      {"metric", metric.name()},
                      {"max_visited_nodes", max_visited_nodes},
                      {"seed", seed},
                      {"mode", to_string(mode)},
                      {"order_by_attribution", order_by_attribution}};
  if (metric.target) j["target"] = *metric.target;
  return j;
}

namespace {

Scalar batch_metric(const MetricSpec& spec, const RunCache& train,
                    const std::vector<PassState>& states) {
  Scalar total = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& ex = train.examples[i];
    total += metric_value(spec, ex.clean_logits, states[i].logits, ex.label);
  }
  return total / Scalar(states.size());
}

}  // namespace

DiscoveryResult vicd_discover(const Model& model, const RunCache& train,
                              const DiscoveryConfig& config) {
  config.validate();
  if (train.examples.empty()) throw ArgumentError("vicd_discover: empty training set");
  const Graph& g = model.graph();
  if (train.fingerprint != g.fingerprint())
    throw MismatchError("vicd_discover: run cache was built for another graph");

  DiscoveryResult result;
  result.mask = mask_full(g);
  CircuitMask& mask = result.mask;

  AttributionScores order_scores;
  if (config.order_by_attribution) order_scores = eap_scores(model, train, config.metric);

  const std::size_t n = train.examples.size();
  // Live state of the current candidate, per example; starts as the clean run.
  std::vector<PassState> current(n), trial(n);
  for (std::size_t i = 0; i < n; ++i) {
    current[i].live = train.examples[i].clean;
    current[i].logits = train.examples[i].clean_logits;
  }
  Scalar current_metric = batch_metric(config.metric, train, current);

  const int receivers = static_cast<int>(g.receivers().size());
  for (int r = receivers - 1; r >= 0 && result.visited_receivers < config.max_visited_nodes; --r) {
    ++result.visited_receivers;
    const auto [first, last] = g.incoming_range(r);
    std::vector<int> order(last - first);
    std::iota(order.begin(), order.end(), first);
    if (config.order_by_attribution)
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(order_scores.score[a]) < std::abs(order_scores.score[b]);
      });

    for (int e : order) {
      mask.set(e, false);
      try {
        if (config.mode == PatchMode::live) {
          for (std::size_t i = 0; i < n; ++i) {
            trial[i] = current[i];
            patched_resume(model, train.examples[i], mask, trial[i], r);
          }
        } else {
          for (std::size_t i = 0; i < n; ++i)
            trial[i].logits = patched_forward(model, train.examples[i], mask, PatchMode::cached);
        }
      } catch (const NumericError& err) {
        throw NumericError("while testing edge " + g.edge_name(e) + ": " + err.what());
      }
      result.patched_forwards += n;
      const Scalar trial_metric = batch_metric(config.metric, train, trial);
      if (!std::isfinite(trial_metric))
        throw NumericError("non-finite metric while testing edge " + g.edge_name(e));

      EdgeDecision d{e, current_metric, trial_metric, false};
      if (std::abs(trial_metric - current_metric) < config.threshold) {
        d.pruned = true;
        std::swap(current, trial);
        current_metric = trial_metric;
      } else {
        mask.set(e, true);
      }
      result.log.push_back(d);
    }
  }
  return result;
}

namespace {

template <class GradientFn>
AttributionScores attribution(const Model& model, const RunCache& train, GradientFn&& gradients) {
  const Graph& g = model.graph();
  if (train.fingerprint != g.fingerprint())
    throw MismatchError("attribution: run cache was built for another graph");
  AttributionScores out;
  out.fingerprint = g.fingerprint();
  out.score.assign(g.edges().size(), 0);
  if (train.examples.empty()) return out;

  for (const auto& ex : train.examples) {
    const std::vector<Field> grads = gradients(ex);
    for (std::size_t e = 0; e < g.edges().size(); ++e) {
      const auto& edge = g.edges()[e];
      out.score[e] +=
          (ex.corrupted[edge.sender] - ex.clean[edge.sender]).cwiseProduct(grads[edge.receiver]).sum();
    }
  }
  for (auto& s : out.score) s /= Scalar(train.examples.size());
  return out;
}

}  // namespace

AttributionScores eap_scores(const Model& model, const RunCache& train, const MetricSpec& metric) {
  return attribution(model, train, [&](const ExampleCache& ex) {
    return receiver_input_gradients(model, ex.clean[0], metric, ex.clean_logits, ex.label);
  });
}

AttributionScores eapig_scores(const Model& model, const RunCache& train, const MetricSpec& metric,
                               int steps) {
  if (steps < 1) throw ArgumentError("eapig_scores: steps must be >= 1");
  return attribution(model, train, [&](const ExampleCache& ex) {
    const Field& clean = ex.clean[0];
    const Field& corrupted = ex.corrupted[0];
    std::vector<Field> mean;
    for (int k = 1; k <= steps; ++k) {
      const Scalar t = Scalar(k) / Scalar(steps);
      const Field point = k == steps ? clean : Field(corrupted + t * (clean - corrupted));
      auto grads = receiver_input_gradients(model, point, metric, ex.clean_logits, ex.label);
      if (mean.empty()) {
        mean = std::move(grads);
      } else {
        for (std::size_t r = 0; r < mean.size(); ++r) mean[r] += grads[r];
      }
    }
    for (auto& m : mean) m /= Scalar(steps);
    return mean;
  });
}

CircuitMask mask_from_scores(const Graph& g, const AttributionScores& scores, std::size_t k) {
  if (scores.score.size() != g.edges().size() || scores.fingerprint != g.fingerprint())
    throw MismatchError("attribution scores belong to another graph");
  if (k > g.edges().size()) throw ArgumentError("mask_from_scores: k exceeds edge count");
  std::vector<int> order(g.edges().size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores.score[a] > scores.score[b]; });
  CircuitMask m = mask_empty(g);
  for (std::size_t i = 0; i < k; ++i) m.set(order[i], true);
  return m;
}

CircuitMask mask_from_threshold(const Graph& g, const AttributionScores& scores, Scalar threshold) {
  if (scores.score.size() != g.edges().size() || scores.fingerprint != g.fingerprint())
    throw MismatchError("attribution scores belong to another graph");
  CircuitMask m = mask_empty(g);
  for (std::size_t e = 0; e < scores.score.size(); ++e)
    if (scores.score[e] >= threshold) m.set(e, true);
  return m;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::vicd: return "vicd";
    case Method::eap: return "eap";
    case Method::eapig: return "eapig";
    case Method::random: return "random";
  }
  return {};
}

Method parse_method(const std::string& s) {
  if (s == "vicd") return Method::vicd;
  if (s == "eap") return Method::eap;
  if (s == "eapig") return Method::eapig;
  if (s == "random") return Method::random;
  throw ArgumentError("unknown method '" + s + "'");
}

ThresholdSearch::ThresholdSearch(const Model& model, const RunCache& train, DiscoveryConfig base)
    : model_(model), train_(train), base_(std::move(base)) {}

const DiscoveryResult& ThresholdSearch::run(double threshold) {
  auto it = runs_.find(threshold);
  if (it != runs_.end()) return it->second;
  DiscoveryConfig c = base_;
  c.threshold = threshold;
  return runs_.emplace(threshold, vicd_discover(model_, train_, c)).first->second;
}

const DiscoveryResult& ThresholdSearch::find(std::size_t target, int max_iterations) {
  auto size_at = [&](double t) { return run(t).mask.count(); };
  double lo = 1e-8, hi = 1.0;
  int budget = max_iterations;
  while (size_at(hi) > target && hi < 1e8 && budget-- > 0) hi *= 10;
  while (size_at(lo) < target && lo > 1e-14 && budget-- > 0) lo /= 10;
  while (budget-- > 0) {
    const double mid = std::sqrt(lo * hi);
    const std::size_t s = size_at(mid);
    if (s == target) break;
    if (s > target) lo = mid; else hi = mid;
  }
  const DiscoveryResult* best = nullptr;
  std::size_t best_gap = 0;
  for (const auto& [t, r] : runs_) {
    const std::size_t s = r.mask.count();
    const std::size_t gap = s > target ? s - target : target - s;
    if (!best || gap < best_gap || (gap == best_gap && s < best->mask.count())) {
      best = &r;
      best_gap = gap;
    }
  }
  return *best;
}

std::vector<SweepPoint> sweep_faithfulness(Method method, const Model& model,
                                           const RunCache& train, const RunCache& eval,
                                           const SweepOptions& options) {
  const Graph& g = model.graph();
  const std::size_t total = g.edges().size();
  for (double f : options.grid)
    if (!(f > 0 && f <= 1)) throw ArgumentError("sweep grid fractions must lie in (0, 1]");

  std::string name = to_string(method);
  AttributionScores scores;
  if (method == Method::eap) scores = eap_scores(model, train, options.discovery.metric);
  if (method == Method::eapig) {
    scores = eapig_scores(model, train, options.discovery.metric, options.eapig_steps);
    name += std::to_string(options.eapig_steps);
  }
  ThresholdSearch search(model, train, options.discovery);

  std::vector<SweepPoint> out;
  for (std::size_t gi = 0; gi < options.grid.size(); ++gi) {
    const double f = options.grid[gi];
    const auto k = static_cast<std::size_t>(std::llround(f * double(total)));
    CircuitMask mask;
    switch (method) {
      case Method::vicd: mask = search.find(k, options.max_bisection).mask; break;
      case Method::eap:
      case Method::eapig: mask = mask_from_scores(g, scores, k); break;
      case Method::random: mask = mask_random(g, k, options.seed * 1000003ULL + gi); break;
    }
    out.push_back({name, f, mask.count(), patched_accuracy(model, eval, mask, options.discovery.mode),
                   options.seed});
  }
  return out;
}

std::string sweep_csv_header() { return "method,fraction,edges,accuracy,seed\n"; }

std::string sweep_csv_rows(const std::vector<SweepPoint>& points) {
  std::string out;
  char buf[256];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%s,%.6g,%zu,%.6g,%llu\n", p.method.c_str(), p.fraction, p.edges,
                  p.accuracy, static_cast<unsigned long long>(p.seed));
    out += buf;
  }
  return out;
}

std::string decision_log_jsonl(const Graph& g, const DiscoveryResult& r) {
  std::string out;
  for (const auto& d : r.log) {
    const auto& edge = g.edges()[d.edge];
    nlohmann::json j = {{"edge", g.edge_name(d.edge)},
                        {"receiver", g.receivers()[edge.receiver].name()},
                        {"metric_before", d.metric_before},
                        {"metric_after", d.metric_after},
                        {"delta", d.metric_after - d.metric_before},
                        {"decision", d.pruned ? "pruned" : "kept"}};
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace vitcd
