#pragma once

// Reduced residual-stream computation graph. Attention heads are individual
// senders; each attention block has one shared input receiver.
//
// Sender indices: 0 = input, then per layer the H heads followed by the MLP.
// Receiver indices: attn_in(l) = 2l, mlp(l) = 2l + 1, logits = 2L.
// A receiver reads from the prefix of senders that precede it, so edges are
// enumerated receiver-major, sender-ascending (the canonical order).

#include "vitcd/config.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace vitcd {

enum class NodeKind { input, attn_input, attn_head, mlp, logits };

struct NodeId {
  NodeKind kind = NodeKind::input;
  int layer = 0;
  int head = 0;

  std::string name() const;
  static NodeId parse(const std::string& name);  // throws FormatError
  bool is_sender() const;
  bool is_receiver() const;
  friend bool operator==(const NodeId&, const NodeId&) = default;
};

enum class EdgeType {
  input_attn_in,
  input_mlp,
  input_logits,
  attn_attn_in,
  attn_mlp,
  attn_logits,
  mlp_attn_in,
  mlp_mlp,
  mlp_logits,
};
inline constexpr int kEdgeTypeCount = 9;

std::string to_string(EdgeType t);
EdgeType classify_edge(const NodeId& sender, const NodeId& receiver);

struct Edge {
  int sender = 0;    // sender index
  int receiver = 0;  // receiver index
  EdgeType type = EdgeType::input_logits;
};

class Graph {
 public:
  const std::vector<NodeId>& senders() const { return senders_; }
  const std::vector<NodeId>& receivers() const { return receivers_; }
  const std::vector<Edge>& edges() const { return edges_; }
  int layers() const { return layers_; }
  int heads() const { return heads_; }

  /// Edge indices into receiver `r`, in canonical order.
  std::pair<int, int> incoming_range(int r) const { return {first_edge_[r], first_edge_[r + 1]}; }
  /// Senders [0, n) are read by receiver r.
  int sender_limit(int r) const { return first_edge_[r + 1] - first_edge_[r]; }

  int head_sender(int layer, int head) const { return 1 + layer * (heads_ + 1) + head; }
  int mlp_sender(int layer) const { return 1 + layer * (heads_ + 1) + heads_; }
  int attn_receiver(int layer) const { return 2 * layer; }
  int mlp_receiver(int layer) const { return 2 * layer + 1; }
  int logits_receiver() const { return 2 * layers_; }
  /// Layer of a receiver; logits count as layer L.
  int receiver_layer(int r) const { return r / 2; }

  std::optional<int> find_sender(const NodeId& id) const;
  std::optional<int> find_receiver(const NodeId& id) const;
  std::optional<int> find_edge(int sender, int receiver) const;

  std::string edge_name(int e) const;
  std::uint64_t fingerprint() const { return fingerprint_; }
  std::string fingerprint_hex() const;

  /// Unique topological order over all nodes (layer, kind, head tie-break).
  std::vector<NodeId> topological_order() const;

 private:
  friend Graph build_graph(const ModelConfig& config);
  int layers_ = 0;
  int heads_ = 0;
  std::vector<NodeId> senders_;
  std::vector<NodeId> receivers_;
  std::vector<Edge> edges_;
  std::vector<int> first_edge_;
  std::uint64_t fingerprint_ = 0;
};

Graph build_graph(const ModelConfig& config);

/// Closed-form edge count of the reduced graph: H*L^2 + H*L + L^2 + 2L + 1.
std::int64_t edge_count(int layers, int heads);

/// Edge count when every head is its own receiver (no shared attention input).
std::int64_t unreduced_edge_count(int layers, int heads);

class CircuitMask {
 public:
  CircuitMask() = default;
  CircuitMask(std::size_t edges, std::uint64_t fingerprint, bool value = false)
      : bits_(edges, value ? 1 : 0), fingerprint_(fingerprint) {}

  std::size_t size() const { return bits_.size(); }
  std::size_t count() const;
  bool contains(std::size_t e) const { return bits_[e] != 0; }
  void set(std::size_t e, bool v) { bits_[e] = v ? 1 : 0; }
  std::uint64_t fingerprint() const { return fingerprint_; }
  std::vector<int> edge_indices() const;

  /// Throws MismatchError if this mask was built for another graph.
  void check_compatible(const Graph& g) const;
  void check_compatible(const CircuitMask& other) const;

  friend bool operator==(const CircuitMask&, const CircuitMask&) = default;

 private:
  std::vector<std::uint8_t> bits_;
  std::uint64_t fingerprint_ = 0;
};

CircuitMask mask_full(const Graph& g);
CircuitMask mask_empty(const Graph& g);
/// Uniform subset of exactly `size` edges; throws ArgumentError on overflow.
CircuitMask mask_random(const Graph& g, std::size_t size, std::uint64_t seed);
/// Uniform subset of `size` edges drawn from the complement of `exclude`.
CircuitMask mask_random_outside(const Graph& g, const CircuitMask& exclude, std::size_t size,
                                std::uint64_t seed);

struct CircuitFile {
  CircuitMask mask;
  std::string model_digest;
  nlohmann::json metadata;  // threshold, metric, seed, method, ...
};

nlohmann::json circuit_to_json(const Graph& g, const CircuitFile& c);
/// Parses and fingerprint-checks against `g`; throws FormatError / MismatchError.
CircuitFile circuit_from_json(const Graph& g, const nlohmann::json& j);

void save_circuit(const std::string& path, const Graph& g, const CircuitFile& c);
CircuitFile load_circuit(const std::string& path, const Graph& g);

}  // namespace vitcd
