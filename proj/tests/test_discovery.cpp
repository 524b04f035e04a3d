#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vitcd/discovery.hpp"
#include "vitcd/synthetic.hpp"

#include <set>

using namespace vitcd;
using test_util::rel_err;

namespace {

struct Setup {
  PlantedModel planted;
  RunCache cache;
};

Setup single_head(std::uint64_t seed, int n = 24) {
  PlantedModel p = planted_single_head_model(seed);
  std::vector<PairedExample> xs;
  for (int c = 0; c < 4; ++c) {
    auto part = generate_class_pairs(p.task, c, n / 4, 5);
    xs.insert(xs.end(), part.begin(), part.end());
  }
  xs = filter_correct(p.model, xs);
  RunCache cache = cache_runs(p.model, xs);
  return {std::move(p), std::move(cache)};
}

RunCache random_cache(const Model& m, int n, std::uint64_t seed) {
  std::vector<PairedExample> xs;
  for (int i = 0; i < n; ++i) {
    PairedExample x;
    x.clean = random_tokens(m.config(), seed + 2 * i);
    x.corrupted = random_tokens(m.config(), seed + 2 * i + 1);
    x.label = i % m.config().num_classes;
    xs.push_back(std::move(x));
  }
  return cache_runs(m, xs);
}

}  // namespace

TEST_CASE("config validation") {
  DiscoveryConfig c;
  CHECK_NOTHROW(c.validate());
  for (double bad : {0.0, -1.0, std::nan(""), double(INFINITY)}) {
    c.threshold = bad;
    CHECK_THROWS_AS(c.validate(), ArgumentError);
  }
  c.threshold = 1e-3;
  c.max_visited_nodes = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  CHECK(parse_method("eapig") == Method::eapig);
  CHECK(to_string(Method::random) == "random");
  CHECK_THROWS_AS(parse_method("acdc"), ArgumentError);
}

TEST_CASE("planted single head: the essential edges survive and the circuit is faithful") {
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Setup st = single_head(s);
    const Graph& g = st.planted.model.graph();
    DiscoveryConfig c;
    c.threshold = 1e-3;
    const DiscoveryResult r = vicd_discover(st.planted.model, st.cache, c);
    std::set<std::string> kept;
    for (int e : r.mask.edge_indices()) kept.insert(g.edge_name(e));
    for (const auto& e : st.planted.essential_edges) CHECK(kept.count(e) == 1);
    CHECK(patched_accuracy(st.planted.model, st.cache, r.mask) == 1.0);
    CHECK(r.mask.count() < g.edges().size());
  }
}

TEST_CASE("decision log agrees with the mask and the threshold") {
  const Setup st = single_head(1);
  const Graph& g = st.planted.model.graph();
  DiscoveryConfig c;
  c.threshold = 0.05;
  const DiscoveryResult r = vicd_discover(st.planted.model, st.cache, c);
  CHECK(r.log.size() == g.edges().size());  // every edge is reachable in one layer
  std::set<int> seen;
  for (const auto& d : r.log) {
    seen.insert(d.edge);
    CHECK(r.mask.contains(d.edge) == !d.pruned);
    const double delta = std::abs(d.metric_after - d.metric_before);
    if (d.pruned) CHECK(delta < c.threshold);
    else CHECK(delta >= c.threshold);
  }
  CHECK(seen.size() == r.log.size());
  // Receivers are visited from the logits backwards.
  int prev = 1 << 30;
  for (const auto& d : r.log) {
    CHECK(g.edges()[d.edge].receiver <= prev);
    prev = g.edges()[d.edge].receiver;
  }
  const std::string jsonl = decision_log_jsonl(g, r);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == static_cast<long>(r.log.size()));
}

TEST_CASE("discovery is deterministic") {
  const Setup st = single_head(3);
  DiscoveryConfig c;
  c.threshold = 1e-2;
  const auto a = vicd_discover(st.planted.model, st.cache, c);
  const auto b = vicd_discover(st.planted.model, st.cache, c);
  CHECK(a.mask == b.mask);
  CHECK(decision_log_jsonl(st.planted.model.graph(), a) == decision_log_jsonl(st.planted.model.graph(), b));
}

TEST_CASE("a huge threshold prunes everything except unreachable edges") {
  const Setup st = single_head(0);
  DiscoveryConfig c;
  c.threshold = 1e9;
  const auto r = vicd_discover(st.planted.model, st.cache, c);
  CHECK(r.mask.count() == 0);
}

TEST_CASE("visit budget stops early") {
  const Model m = random_model(9, {3, 2, 8, 5});
  const RunCache cache = random_cache(m, 4, 10);
  DiscoveryConfig c;
  c.max_visited_nodes = 1;
  const auto r = vicd_discover(m, cache, c);
  CHECK(r.visited_receivers == 1);
  auto [lo, hi] = m.graph().incoming_range(m.graph().logits_receiver());
  for (const auto& d : r.log) CHECK((d.edge >= lo && d.edge < hi));
}

TEST_CASE("in a linear model EAP equals the exact single-edge effect") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    RandomModelOptions o;
    o.linear = true;
    const Model m = random_model(300 + s, o);
    const Graph& g = m.graph();
    const RunCache cache = random_cache(m, 3, 50 * s);
    const AttributionScores eap = eap_scores(m, cache, MetricSpec::logit_diff());
    for (std::size_t e = 0; e < g.edges().size(); ++e) {
      CircuitMask mask = mask_full(g);
      mask.set(e, false);
      const double exact = evaluate_metric(MetricSpec::logit_diff(), patched_forward(m, cache, mask), cache);
      CHECK(std::abs(eap.score[e] - exact) <= 1e-6 * std::max(1.0, std::abs(exact)));
    }
  }
}

TEST_CASE("one-step EAP-IG is EAP; more steps stay close on a linear model") {
  RandomModelOptions o;
  o.linear = true;
  const Model lin = random_model(17, o);
  const RunCache lc = random_cache(lin, 3, 1);
  const auto a = eap_scores(lin, lc, MetricSpec::logit_diff());
  const auto b = eapig_scores(lin, lc, MetricSpec::logit_diff(), 7);
  for (std::size_t e = 0; e < a.score.size(); ++e)
    CHECK(std::abs(a.score[e] - b.score[e]) <= 1e-9 * std::max(1.0, std::abs(a.score[e])));

  const Model m = random_model(18);
  const RunCache c = random_cache(m, 3, 2);
  const auto x = eap_scores(m, c, MetricSpec::logit_diff());
  const auto y = eapig_scores(m, c, MetricSpec::logit_diff(), 1);
  for (std::size_t e = 0; e < x.score.size(); ++e) CHECK(x.score[e] == doctest::Approx(y.score[e]).epsilon(1e-12));
  CHECK_THROWS_AS(eapig_scores(m, c, MetricSpec::logit_diff(), 0), ArgumentError);
}

TEST_CASE("top-k and threshold masks from scores") {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads_per_layer = 2;
  const Graph g = build_graph(cfg);
  AttributionScores s{std::vector<Scalar>(g.edges().size(), 0.0), g.fingerprint()};
  s.score[5] = 3;
  s.score[2] = 3;
  s.score[7] = 1;
  s.score[0] = -4;
  const CircuitMask top2 = mask_from_scores(g, s, 2);
  CHECK(top2.edge_indices() == std::vector<int>{2, 5});
  const CircuitMask top4 = mask_from_scores(g, s, 4);
  CHECK(top4.contains(7));
  CHECK(top4.contains(1));  // first of the zero-score ties
  CHECK_FALSE(top4.contains(0));
  CHECK(mask_from_threshold(g, s, 1.0).count() == 3);
  CHECK_THROWS_AS(mask_from_scores(g, s, g.edges().size() + 1), ArgumentError);
  AttributionScores foreign = s;
  foreign.fingerprint ^= 1;
  CHECK_THROWS_AS(mask_from_scores(g, foreign, 1), MismatchError);
}

TEST_CASE("threshold search lands near the requested size and memoizes") {
  const Setup st = single_head(2);
  ThresholdSearch search(st.planted.model, st.cache, DiscoveryConfig{});
  const auto& r = search.find(3);
  CHECK(r.mask.count() >= 2);
  CHECK(r.mask.count() <= 4);
  const std::size_t runs = search.runs().size();
  search.find(3);
  CHECK(search.runs().size() >= runs);
  for (const auto& [tau, res] : search.runs()) CHECK(tau > 0);
  // Larger thresholds never give larger circuits here.
  std::size_t prev = 1 << 30;
  for (const auto& [tau, res] : search.runs()) {
    CHECK(res.mask.count() <= prev);
    prev = res.mask.count();
  }
}

TEST_CASE("faithfulness sweep and csv") {
  const Setup st = single_head(0);
  SweepOptions o;
  o.grid = {0.25, 0.5, 1.0};
  const auto pts = sweep_faithfulness(Method::random, st.planted.model, st.cache, st.cache, o);
  REQUIRE(pts.size() == 3);
  CHECK(pts[0].edges == 3);
  CHECK(pts[2].edges == 12);
  CHECK(pts[2].accuracy == 1.0);
  const auto eap = sweep_faithfulness(Method::eapig, st.planted.model, st.cache, st.cache, o);
  CHECK(eap[0].method == "eapig10");
  const std::string csv = sweep_csv_header() + sweep_csv_rows(pts);
  CHECK(csv.rfind("method,fraction,edges,accuracy,seed\nrandom,0.25,3,", 0) == 0);
  o.grid = {0.0};
  CHECK_THROWS_AS(sweep_faithfulness(Method::eap, st.planted.model, st.cache, st.cache, o), ArgumentError);
}
