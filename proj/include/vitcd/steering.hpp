#pragma once

// Corruption-aligned directions estimated from attacked/original pairs, and
// ReLU-gated directional ablation applied along circuit edges.

#include "vitcd/archive.hpp"
#include "vitcd/data.hpp"
#include "vitcd/graph.hpp"
#include "vitcd/model.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vitcd {

/// Per row p: c_p = <h_p, v_p> / (|v_p|^2 + eps), h'_p = h_p - alpha * relu(c_p) * v_p.
/// Rows with c_p <= 0, and everything when alpha == 0, are copied untouched.
template <class H, class V>
Field apply_ablation(const Eigen::MatrixBase<H>& h, const Eigen::MatrixBase<V>& v, Scalar alpha,
                     Scalar epsilon) {
  if (h.rows() != v.rows() || h.cols() != v.cols())
    throw ArgumentError("apply_ablation: activation and direction shapes differ");
  Field out = h;
  if (alpha == 0) return out;
  for (Eigen::Index p = 0; p < out.rows(); ++p) {
    const Scalar c = h.row(p).dot(v.row(p)) / (v.row(p).squaredNorm() + epsilon);
    if (c > 0) out.row(p) -= (alpha * c) * v.row(p);
  }
  return out;
}

/// Row-wise projection coefficients of `h` onto `v`.
template <class H, class V>
Vector projection_coefficients(const Eigen::MatrixBase<H>& h, const Eigen::MatrixBase<V>& v,
                               Scalar epsilon) {
  Vector c(h.rows());
  for (Eigen::Index p = 0; p < h.rows(); ++p)
    c(p) = h.row(p).dot(v.row(p)) / (v.row(p).squaredNorm() + epsilon);
  return c;
}

enum class NormRegime { pre_normed, post_normed };
enum class Aggregate { mean, medoid };

struct SteeringRegime {
  NormRegime norm = NormRegime::pre_normed;
  Aggregate aggregate = Aggregate::mean;

  std::string name() const;  // "pre_normed:mean", ...
  static SteeringRegime parse(const std::string& s);
};

struct SteeringDirections {
  std::map<int, Field> by_sender;  // sender index -> P x d direction
  SteeringRegime regime;
  Scalar epsilon = 1e-8;
  int n_pairs = 0;
  std::string attack_id;
  std::uint64_t fingerprint = 0;
  int skipped_rows = 0;  // zero-norm activation rows left out of the estimate
};

/// Senders that appear on at least one edge of `circuit`.
std::vector<int> circuit_senders(const Graph& g, const CircuitMask& circuit);

/// Index of the sample maximizing the summed cosine similarity to all samples
/// (first index on ties). Zero vectors have cosine 0 with everything.
int medoid_index(const std::vector<RowVector>& samples);

/// Directions from aligned pairs, each holding the attacked image as `clean`
/// and the original as `corrupted`.
SteeringDirections compute_directions(const Model& model, const std::vector<PairedExample>& pairs,
                                      const std::vector<int>& senders, SteeringRegime regime,
                                      Scalar epsilon = 1e-8, const std::string& attack_id = "");

Archive directions_to_archive(const Graph& g, const SteeringDirections& d);
SteeringDirections directions_from_archive(const Graph& g, const Archive& a);
void save_directions(const std::string& path, const Graph& g, const SteeringDirections& d);
SteeringDirections load_directions(const std::string& path, const Graph& g);

struct SteeringPolicy {
  CircuitMask circuit;
  Scalar alpha = 0;
  /// Only edges into receivers at layers <= cutoff are steered (logits are layer L).
  std::optional<int> max_receiver_layer;
  /// Ablate a circuit sender toward every receiver in range, not just circuit receivers.
  bool sender_global = false;

  void validate() const;
};

/// Forward pass on raw tokens with steered circuit edges. Throws ArgumentError
/// naming the first sender that needs a direction and has none.
Vector steered_forward(const Model& model, const Field& raw, const SteeringDirections& directions,
                       const SteeringPolicy& policy);

struct AttackRow {
  double alpha = 0;
  int max_layer = 0;
  double clean_top1 = 0, clean_top5 = 0;
  double atk_top1 = 0, atk_top5 = 0;
  double asr_top1 = 0, asr_top5 = 0;
  double retention = 0;
};

/// One row per (alpha, layer). `clean` uses each pair's clean image and label;
/// `attacked` uses the attacked image, the true label and the attack target.
/// An empty layer grid means no cutoff.
std::vector<AttackRow> attack_metrics(const Model& model, const std::vector<PairedExample>& clean,
                                      const std::vector<PairedExample>& attacked,
                                      const SteeringDirections& directions,
                                      const CircuitMask& circuit, const std::vector<double>& alphas,
                                      const std::vector<int>& layers, bool sender_global = false);

std::string attack_csv_header();
std::string attack_csv_rows(const std::vector<AttackRow>& rows);

/// Smallest-alpha row whose top-1 ASR is reduced by at least `reduction`
/// (relative to `base_asr`) with retention >= `min_retention`.
std::optional<AttackRow> select_alpha(const std::vector<AttackRow>& rows, double base_asr,
                                      double reduction, double min_retention = 0);

struct RetrievalMetrics {
  std::vector<int> ks;
  std::vector<double> recall;  // per k
  std::vector<double> rsms;    // per k
  double r_mean = 0;           // mean recall at 1, 5, 10 (NaN with fewer than 10 candidates)
};

/// Dot-product ranking of candidates (rows) for each query (rows); ties keep
/// candidate order.
RetrievalMetrics retrieval_metrics(const Field& queries, const Field& candidates,
                                   const std::vector<int>& correct,
                                   const std::vector<bool>& manipulated, const std::vector<int>& ks);

}  // namespace vitcd
