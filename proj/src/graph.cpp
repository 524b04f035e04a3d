#include "vitcd/graph.hpp"

#include "vitcd/archive.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace vitcd {

std::string NodeId::name() const {
  switch (kind) {
    case NodeKind::input:
      return "input";
    case NodeKind::attn_input:
      return "attn_in" + std::to_string(layer);
    case NodeKind::attn_head:
      return "a" + std::to_string(layer) + ".h" + std::to_string(head);
    case NodeKind::mlp:
      return "mlp" + std::to_string(layer);
    case NodeKind::logits:
      return "logits";
  }
  return {};
}

namespace {

bool parse_int(const std::string& s, int& out) {
  if (s.empty() || s.size() > 9) return false;
  for (char c : s)
    if (c < '0' || c > '9') return false;
  out = std::stoi(s);
  return true;
}

}  // namespace

NodeId NodeId::parse(const std::string& name) {
  NodeId id;
  if (name == "input") return {NodeKind::input, 0, 0};
  if (name == "logits") return {NodeKind::logits, 0, 0};
  if (name.rfind("attn_in", 0) == 0 && parse_int(name.substr(7), id.layer)) {
    id.kind = NodeKind::attn_input;
    return id;
  }
  if (name.rfind("mlp", 0) == 0 && parse_int(name.substr(3), id.layer)) {
    id.kind = NodeKind::mlp;
    return id;
  }
  if (name.size() > 1 && name[0] == 'a') {
    const auto dot = name.find(".h");
    if (dot != std::string::npos && parse_int(name.substr(1, dot - 1), id.layer) &&
        parse_int(name.substr(dot + 2), id.head)) {
      id.kind = NodeKind::attn_head;
      return id;
    }
  }
  throw FormatError("unknown node name '" + name + "'");
}

bool NodeId::is_sender() const {
  return kind == NodeKind::input || kind == NodeKind::attn_head || kind == NodeKind::mlp;
}

bool NodeId::is_receiver() const {
  return kind == NodeKind::attn_input || kind == NodeKind::mlp || kind == NodeKind::logits;
}

std::string to_string(EdgeType t) {
  static const char* names[] = {"input->attn_in", "input->mlp",    "input->logits",
                                "attn->attn_in",  "attn->mlp",     "attn->logits",
                                "mlp->attn_in",   "mlp->mlp",      "mlp->logits"};
  return names[static_cast<int>(t)];
}

EdgeType classify_edge(const NodeId& sender, const NodeId& receiver) {
  int s = 0;
  switch (sender.kind) {
    case NodeKind::input: s = 0; break;
    case NodeKind::attn_head: s = 1; break;
    case NodeKind::mlp: s = 2; break;
    default: throw ArgumentError(sender.name() + " is not a sender");
  }
  int r = 0;
  switch (receiver.kind) {
    case NodeKind::attn_input: r = 0; break;
    case NodeKind::mlp: r = 1; break;
    case NodeKind::logits: r = 2; break;
    default: throw ArgumentError(receiver.name() + " is not a receiver");
  }
  return static_cast<EdgeType>(3 * s + r);
}

Graph build_graph(const ModelConfig& config) {
  config.validate();
  Graph g;
  g.layers_ = config.layers;
  g.heads_ = config.heads_per_layer;
  g.senders_.push_back({NodeKind::input, 0, 0});
  for (int l = 0; l < g.layers_; ++l) {
    for (int h = 0; h < g.heads_; ++h) g.senders_.push_back({NodeKind::attn_head, l, h});
    g.senders_.push_back({NodeKind::mlp, l, 0});
  }
  for (int l = 0; l < g.layers_; ++l) {
    g.receivers_.push_back({NodeKind::attn_input, l, 0});
    g.receivers_.push_back({NodeKind::mlp, l, 0});
  }
  g.receivers_.push_back({NodeKind::logits, 0, 0});

  g.first_edge_.push_back(0);
  std::uint64_t h = fnv1a("vitcd-graph");
  for (int r = 0; r < static_cast<int>(g.receivers_.size()); ++r) {
    const auto& recv = g.receivers_[r];
    int limit = 0;
    switch (recv.kind) {
      case NodeKind::attn_input: limit = 1 + recv.layer * (g.heads_ + 1); break;
      case NodeKind::mlp: limit = 1 + recv.layer * (g.heads_ + 1) + g.heads_; break;
      default: limit = static_cast<int>(g.senders_.size()); break;
    }
    for (int s = 0; s < limit; ++s) {
      g.edges_.push_back({s, r, classify_edge(g.senders_[s], recv)});
      const std::string name = g.senders_[s].name() + ">" + recv.name() + ";";
      h = fnv1a(name, h);
    }
    g.first_edge_.push_back(static_cast<int>(g.edges_.size()));
  }
  g.fingerprint_ = h;
  return g;
}

std::optional<int> Graph::find_sender(const NodeId& id) const {
  for (std::size_t i = 0; i < senders_.size(); ++i)
    if (senders_[i] == id) return static_cast<int>(i);
  return std::nullopt;
}

std::optional<int> Graph::find_receiver(const NodeId& id) const {
  for (std::size_t i = 0; i < receivers_.size(); ++i)
    if (receivers_[i] == id) return static_cast<int>(i);
  return std::nullopt;
}

std::optional<int> Graph::find_edge(int sender, int receiver) const {
  if (receiver < 0 || receiver >= static_cast<int>(receivers_.size())) return std::nullopt;
  if (sender < 0 || sender >= sender_limit(receiver)) return std::nullopt;
  return first_edge_[receiver] + sender;
}

std::string Graph::edge_name(int e) const {
  const auto& edge = edges_[e];
  return senders_[edge.sender].name() + "->" + receivers_[edge.receiver].name();
}

std::string Graph::fingerprint_hex() const { return hex_digest(fingerprint_); }

std::vector<NodeId> Graph::topological_order() const {
  std::vector<NodeId> order;
  order.push_back({NodeKind::input, 0, 0});
  for (int l = 0; l < layers_; ++l) {
    order.push_back({NodeKind::attn_input, l, 0});
    for (int h = 0; h < heads_; ++h) order.push_back({NodeKind::attn_head, l, h});
    order.push_back({NodeKind::mlp, l, 0});
  }
  order.push_back({NodeKind::logits, 0, 0});
  return order;
}

std::int64_t edge_count(int layers, int heads) {
  if (layers < 1 || heads < 1) throw ArgumentError("edge_count: layers and heads must be >= 1");
  const std::int64_t L = layers, H = heads;
  return H * L * L + H * L + L * L + 2 * L + 1;
}

std::int64_t unreduced_edge_count(int layers, int heads) {
  if (layers < 1 || heads < 1) throw ArgumentError("edge_count: layers and heads must be >= 1");
  const std::int64_t L = layers, H = heads;
  std::int64_t total = 1 + L * H + L;  // logits
  for (std::int64_t l = 0; l < L; ++l) total += H * (1 + l * H + l) + (1 + (l + 1) * H + l);
  return total;
}

std::size_t CircuitMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::vector<int> CircuitMask::edge_indices() const {
  std::vector<int> out;
  for (std::size_t e = 0; e < bits_.size(); ++e)
    if (bits_[e]) out.push_back(static_cast<int>(e));
  return out;
}

void CircuitMask::check_compatible(const Graph& g) const {
  if (fingerprint_ != g.fingerprint() || bits_.size() != g.edges().size())
    throw MismatchError("circuit mask fingerprint " + hex_digest(fingerprint_) +
                        " does not match graph " + g.fingerprint_hex());
}

void CircuitMask::check_compatible(const CircuitMask& other) const {
  if (fingerprint_ != other.fingerprint_ || bits_.size() != other.bits_.size())
    throw MismatchError("circuit masks belong to different graphs");
}

CircuitMask mask_full(const Graph& g) { return {g.edges().size(), g.fingerprint(), true}; }
CircuitMask mask_empty(const Graph& g) { return {g.edges().size(), g.fingerprint(), false}; }

namespace {

CircuitMask sample_from(const Graph& g, std::vector<int> pool, std::size_t size,
                        std::uint64_t seed) {
  if (size > pool.size())
    throw ArgumentError("mask_random: size " + std::to_string(size) + " exceeds the " +
                        std::to_string(pool.size()) + " available edges");
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  CircuitMask m = mask_empty(g);
  for (std::size_t i = 0; i < size; ++i) m.set(pool[i], true);
  return m;
}

}  // namespace

CircuitMask mask_random(const Graph& g, std::size_t size, std::uint64_t seed) {
  std::vector<int> pool(g.edges().size());
  std::iota(pool.begin(), pool.end(), 0);
  return sample_from(g, std::move(pool), size, seed);
}

CircuitMask mask_random_outside(const Graph& g, const CircuitMask& exclude, std::size_t size,
                                std::uint64_t seed) {
  exclude.check_compatible(g);
  std::vector<int> pool;
  for (std::size_t e = 0; e < g.edges().size(); ++e)
    if (!exclude.contains(e)) pool.push_back(static_cast<int>(e));
  return sample_from(g, std::move(pool), size, seed);
}

nlohmann::json circuit_to_json(const Graph& g, const CircuitFile& c) {
  c.mask.check_compatible(g);
  nlohmann::json edges = nlohmann::json::array();
  for (int e : c.mask.edge_indices()) {
    const auto& edge = g.edges()[e];
    edges.push_back({g.senders()[edge.sender].name(), g.receivers()[edge.receiver].name()});
  }
  return {
      {"model_digest", c.model_digest},
      {"graph_fingerprint", g.fingerprint_hex()},
      {"edge_count", g.edges().size()},
      {"edges", edges},
      {"metadata", c.metadata.is_null() ? nlohmann::json::object() : c.metadata},
  };
}

CircuitFile circuit_from_json(const Graph& g, const nlohmann::json& j) {
  CircuitFile c;
  try {
    if (j.at("graph_fingerprint").get<std::string>() != g.fingerprint_hex())
      throw MismatchError("circuit graph fingerprint " +
                          j.at("graph_fingerprint").get<std::string>() + " does not match " +
                          g.fingerprint_hex());
    c.model_digest = j.value("model_digest", std::string{});
    c.metadata = j.value("metadata", nlohmann::json::object());
    c.mask = mask_empty(g);
    for (const auto& pair : j.at("edges")) {
      const auto sender = g.find_sender(NodeId::parse(pair.at(0).get<std::string>()));
      const auto receiver = g.find_receiver(NodeId::parse(pair.at(1).get<std::string>()));
      const auto e = (sender && receiver) ? g.find_edge(*sender, *receiver) : std::nullopt;
      if (!e) throw FormatError("circuit edge " + pair.dump() + " is not in the graph");
      c.mask.set(*e, true);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("circuit file: ") + e.what());
  }
  return c;
}

void save_circuit(const std::string& path, const Graph& g, const CircuitFile& c) {
  write_file_atomic(path, circuit_to_json(g, c).dump(2) + "\n");
}

CircuitFile load_circuit(const std::string& path, const Graph& g) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open circuit file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("circuit file " + path + ": " + e.what());
  }
  return circuit_from_json(g, j);
}

}  // namespace vitcd
