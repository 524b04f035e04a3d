#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vitcd/graph.hpp"

#include <set>

using namespace vitcd;

namespace {

ModelConfig cfg(int L, int H) {
  ModelConfig c;
  c.layers = L;
  c.heads_per_layer = H;
  return c;
}

// Count edges by enumerating every (sender, receiver) pair where the sender
// comes strictly before the receiver in the forward pass.
std::int64_t enumerate_edges(int L, int H) {
  auto sender_pos = [&](int layer, bool mlp) { return layer * 2 + (mlp ? 1 : 0); };  // 0-based block
  std::int64_t n = 0;
  for (int rl = 0; rl <= L; ++rl)
    for (int rk = 0; rk < (rl == L ? 1 : 2); ++rk) {
      const int rpos = rl == L ? 2 * L : 2 * rl + rk;
      n += 1;  // input
      for (int sl = 0; sl < L; ++sl) {
        if (sender_pos(sl, false) < rpos) n += H;
        if (sender_pos(sl, true) < rpos) n += 1;
      }
    }
  return n;
}

}  // namespace

TEST_CASE("edge count formula matches enumeration") {
  for (int L = 1; L <= 6; ++L)
    for (int H = 1; H <= 6; ++H) {
      const Graph g = build_graph(cfg(L, H));
      CHECK(static_cast<std::int64_t>(g.edges().size()) == edge_count(L, H));
      CHECK(enumerate_edges(L, H) == edge_count(L, H));
    }
  CHECK(edge_count(3, 4) == 64);
  CHECK(edge_count(1, 4) == 12);
  CHECK(edge_count(12, 12) == 2041);
  CHECK_THROWS_AS(edge_count(0, 3), ArgumentError);
}

TEST_CASE("unreduced graph has more edges once there are two heads") {
  CHECK(unreduced_edge_count(1, 1) == edge_count(1, 1));
  for (int L = 1; L <= 4; ++L)
    for (int H = 2; H <= 4; ++H) CHECK(unreduced_edge_count(L, H) > edge_count(L, H));
}

TEST_CASE("node indices and canonical edge order") {
  const Graph g = build_graph(cfg(3, 4));
  CHECK(g.head_sender(1, 2) == 1 + 5 + 2);
  CHECK(g.mlp_sender(2) == 1 + 10 + 4);
  CHECK(g.senders()[g.mlp_sender(2)].name() == "mlp2");
  CHECK(g.receivers()[g.logits_receiver()].name() == "logits");
  CHECK(g.receiver_layer(g.logits_receiver()) == 3);
  CHECK(g.edge_name(0) == "input->attn_in0");

  int prev_r = -1, prev_s = -1;
  for (const Edge& e : g.edges()) {
    if (e.receiver == prev_r) CHECK(e.sender > prev_s);
    else CHECK(e.receiver > prev_r);
    prev_r = e.receiver;
    prev_s = e.sender;
  }
  for (int r = 0; r < static_cast<int>(g.receivers().size()); ++r) {
    auto [lo, hi] = g.incoming_range(r);
    CHECK(hi - lo == g.sender_limit(r));
    for (int e = lo; e < hi; ++e) CHECK(g.edges()[e].sender == e - lo);
  }
  // attn_in1 reads input, layer 0 heads and mlp0; mlp1 also reads layer-1 heads.
  CHECK(g.sender_limit(g.attn_receiver(1)) == 1 + 5);
  CHECK(g.sender_limit(g.mlp_receiver(1)) == 1 + 5 + 4);
  CHECK(g.sender_limit(g.logits_receiver()) == 16);
}

TEST_CASE("node names round-trip and malformed ones throw") {
  const Graph g = build_graph(cfg(2, 3));
  for (const auto& n : g.senders()) CHECK(NodeId::parse(n.name()) == n);
  for (const auto& n : g.receivers()) CHECK(NodeId::parse(n.name()) == n);
  for (const char* bad : {"", "a1", "a.h1", "mlpx", "attn_in-1", "head3", "a1.h"})
    CHECK_THROWS_AS(NodeId::parse(bad), FormatError);
  const auto e = g.find_edge(*g.find_sender(NodeId::parse("a0.h2")), *g.find_receiver(NodeId::parse("mlp1")));
  REQUIRE(e.has_value());
  CHECK(g.edge_name(*e) == "a0.h2->mlp1");
  CHECK(g.edges()[*e].type == EdgeType::attn_mlp);
  CHECK_FALSE(g.find_edge(g.mlp_sender(1), g.attn_receiver(1)).has_value());
}

TEST_CASE("topological order is unique and respects edges") {
  const Graph g = build_graph(cfg(3, 2));
  const auto order = g.topological_order();
  // MLP nodes are both sender and receiver.
  CHECK(order.size() == g.senders().size() + g.receivers().size() - 3);
  auto pos = [&](const NodeId& n) {
    return std::find(order.begin(), order.end(), n) - order.begin();
  };
  for (const Edge& e : g.edges()) CHECK(pos(g.senders()[e.sender]) < pos(g.receivers()[e.receiver]));
  CHECK(g.topological_order() == order);
}

TEST_CASE("fingerprint separates shapes") {
  std::set<std::uint64_t> seen;
  for (int L = 1; L <= 3; ++L)
    for (int H = 1; H <= 3; ++H) seen.insert(build_graph(cfg(L, H)).fingerprint());
  CHECK(seen.size() == 9);
  // Only the graph shape matters.
  ModelConfig a = cfg(2, 2), b = cfg(2, 2);
  b.model_dim = 12;
  CHECK(build_graph(a).fingerprint() == build_graph(b).fingerprint());
}

TEST_CASE("random masks have the requested size and are seed-determined") {
  const Graph g = build_graph(cfg(3, 4));
  for (std::size_t k : {0u, 1u, 17u, 64u}) {
    const CircuitMask m = mask_random(g, k, 11);
    CHECK(m.count() == k);
    CHECK(m == mask_random(g, k, 11));
  }
  CHECK(mask_random(g, 10, 1) != mask_random(g, 10, 2));
  CHECK_THROWS_AS(mask_random(g, 65, 0), ArgumentError);
  const CircuitMask ex = mask_random(g, 20, 3);
  const CircuitMask out = mask_random_outside(g, ex, 30, 4);
  CHECK(out.count() == 30);
  for (std::size_t e = 0; e < ex.size(); ++e) CHECK_FALSE((ex.contains(e) && out.contains(e)));
  CHECK_THROWS_AS(mask_random_outside(g, ex, 45, 4), ArgumentError);
}

TEST_CASE("circuit files round-trip and refuse foreign graphs") {
  const Graph g = build_graph(cfg(2, 2));
  CircuitFile c{mask_random(g, 7, 5), "abc123", {{"method", "vicd"}, {"threshold", 0.01}}};
  const std::string dir = test_util::scratch_dir("graph");
  save_circuit(dir + "/c.json", g, c);
  const CircuitFile back = load_circuit(dir + "/c.json", g);
  CHECK(back.mask == c.mask);
  CHECK(back.model_digest == "abc123");
  CHECK(back.metadata["method"] == "vicd");
  save_circuit(dir + "/d.json", g, back);
  CHECK(test_util::slurp(dir + "/c.json") == test_util::slurp(dir + "/d.json"));

  const Graph other = build_graph(cfg(2, 3));
  CHECK_THROWS_AS(load_circuit(dir + "/c.json", other), MismatchError);
  CHECK_THROWS_AS(c.mask.check_compatible(other), MismatchError);

  auto j = circuit_to_json(g, c);
  j["edges"].push_back({"mlp1", "attn_in0"});
  CHECK_THROWS(circuit_from_json(g, j));
}
