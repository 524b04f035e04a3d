#include "vitcd/steering.hpp"

#include "vitcd/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace vitcd {

std::string SteeringRegime::name() const {
  return std::string(norm == NormRegime::pre_normed ? "pre_normed" : "post_normed") + ":" +
         (aggregate == Aggregate::mean ? "mean" : "medoid");
}

SteeringRegime SteeringRegime::parse(const std::string& s) {
  const auto colon = s.find(':');
  const std::string norm = s.substr(0, colon);
  const std::string agg = colon == std::string::npos ? "mean" : s.substr(colon + 1);
  SteeringRegime r;
  if (norm == "pre_normed") r.norm = NormRegime::pre_normed;
  else if (norm == "post_normed") r.norm = NormRegime::post_normed;
  else throw ArgumentError("unknown steering regime '" + s + "'");
  if (agg == "mean") r.aggregate = Aggregate::mean;
  else if (agg == "medoid") r.aggregate = Aggregate::medoid;
  else throw ArgumentError("unknown steering aggregate '" + agg + "'");
  return r;
}

std::vector<int> circuit_senders(const Graph& g, const CircuitMask& circuit) {
  circuit.check_compatible(g);
  std::vector<char> used(g.senders().size(), 0);
  for (int e : circuit.edge_indices()) used[g.edges()[e].sender] = 1;
  std::vector<int> out;
  for (std::size_t s = 0; s < used.size(); ++s)
    if (used[s]) out.push_back(static_cast<int>(s));
  return out;
}

int medoid_index(const std::vector<RowVector>& samples) {
  if (samples.empty()) throw ArgumentError("medoid of an empty sample set");
  const std::size_t n = samples.size();
  std::vector<RowVector> unit(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar norm = samples[i].norm();
    unit[i] = norm > 0 ? RowVector(samples[i] / norm) : RowVector(samples[i] * 0);
  }
  int best = 0;
  Scalar best_total = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    Scalar total = 0;
    for (std::size_t j = 0; j < n; ++j) total += unit[i].dot(unit[j]);
    // Exact ties (n = 2, duplicates) differ only by rounding; keep the first.
    if (total > best_total + 1e-12 * Scalar(n)) {
      best_total = total;
      best = static_cast<int>(i);
    }
  }
  return best;
}

SteeringDirections compute_directions(const Model& model, const std::vector<PairedExample>& pairs,
                                      const std::vector<int>& senders, SteeringRegime regime,
                                      Scalar epsilon, const std::string& attack_id) {
  if (!(epsilon > 0)) throw ArgumentError("steering epsilon must be positive");
  const Graph& g = model.graph();
  for (int s : senders)
    if (s < 0 || s >= static_cast<int>(g.senders().size()))
      throw ArgumentError("compute_directions: sender index out of range");

  SteeringDirections out;
  out.regime = regime;
  out.epsilon = epsilon;
  out.n_pairs = static_cast<int>(pairs.size());
  out.attack_id = attack_id;
  out.fingerprint = g.fingerprint();

  const int rows = model.config().patch_count, dim = model.config().model_dim;
  // samples[sender][row] collects one difference per pair that survived.
  std::vector<std::vector<std::vector<RowVector>>> samples(
      senders.size(), std::vector<std::vector<RowVector>>(rows));
  for (const auto& pair : pairs) {
    if (pair.clean.rows() != pair.corrupted.rows() || pair.clean.cols() != pair.corrupted.cols())
      throw ArgumentError("compute_directions: pair halves differ in shape");
    const ForwardTrace attacked = forward_with_trace(model, attacked_image(pair));
    const ForwardTrace original = forward_with_trace(model, original_image(pair));
    for (std::size_t i = 0; i < senders.size(); ++i) {
      const Field& a = attacked.sender_contribution[senders[i]];
      const Field& b = original.sender_contribution[senders[i]];
      for (int p = 0; p < rows; ++p) {
        RowVector delta;
        if (regime.norm == NormRegime::pre_normed) {
          const Scalar na = a.row(p).norm(), nb = b.row(p).norm();
          if (na == 0 || nb == 0) {
            ++out.skipped_rows;
            continue;
          }
          delta = a.row(p) / na - b.row(p) / nb;
        } else {
          const RowVector raw = a.row(p) - b.row(p);
          const Scalar n = raw.norm();
          if (n == 0) {
            ++out.skipped_rows;
            continue;
          }
          delta = raw / n;
        }
        samples[i][p].push_back(std::move(delta));
      }
    }
  }

  for (std::size_t i = 0; i < senders.size(); ++i) {
    Field dir = Field::Zero(rows, dim);
    for (int p = 0; p < rows; ++p) {
      const auto& xs = samples[i][p];
      if (xs.empty()) continue;
      if (regime.aggregate == Aggregate::mean) {
        RowVector sum = RowVector::Zero(dim);
        for (const auto& x : xs) sum += x;
        dir.row(p) = sum / Scalar(xs.size());
      } else {
        dir.row(p) = xs[medoid_index(xs)];
      }
    }
    dir = dir.unaryExpr([](Scalar x) { return to_storage(x); });
    check_finite(dir, "direction for " + g.senders()[senders[i]].name());
    out.by_sender[senders[i]] = std::move(dir);
  }
  if (out.skipped_rows > 0)
    std::fprintf(stderr, "warning: %d zero-norm activation rows skipped while estimating directions\n",
                 out.skipped_rows);
  return out;
}

Archive directions_to_archive(const Graph& g, const SteeringDirections& d) {
  if (d.fingerprint != g.fingerprint()) throw MismatchError("directions belong to another graph");
  Archive a;
  for (const auto& [s, dir] : d.by_sender) a.put("dir/" + g.senders()[s].name(), dir);
  a.metadata = {{"kind", "directions"},
                {"regime", d.regime.name()},
                {"epsilon", d.epsilon},
                {"n_pairs", d.n_pairs},
                {"attack_id", d.attack_id},
                {"skipped_rows", d.skipped_rows},
                {"graph_fingerprint", g.fingerprint_hex()}};
  return a;
}

SteeringDirections directions_from_archive(const Graph& g, const Archive& a) {
  SteeringDirections d;
  try {
    if (a.metadata.at("kind") != "directions") throw FormatError("archive does not hold directions");
    if (a.metadata.at("graph_fingerprint") != g.fingerprint_hex())
      throw MismatchError("directions were computed for another graph");
    d.regime = SteeringRegime::parse(a.metadata.at("regime").get<std::string>());
    d.epsilon = a.metadata.at("epsilon").get<double>();
    d.n_pairs = a.metadata.at("n_pairs").get<int>();
    d.attack_id = a.metadata.at("attack_id").get<std::string>();
    d.skipped_rows = a.metadata.value("skipped_rows", 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("directions metadata: ") + e.what());
  }
  d.fingerprint = g.fingerprint();
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("dir/", 0) != 0) throw FormatError("unexpected tensor '" + name + "' in directions");
    NodeId id = NodeId::parse(name.substr(4));
    const auto s = g.find_sender(id);
    if (!s) throw MismatchError("direction for unknown sender '" + name.substr(4) + "'");
    Field dir = a.get_matrix(name);
    if (!dir.allFinite()) throw FormatError("direction '" + name + "' is not finite");
    d.by_sender[*s] = std::move(dir);
  }
  return d;
}

void save_directions(const std::string& path, const Graph& g, const SteeringDirections& d) {
  write_archive(path, directions_to_archive(g, d));
}

SteeringDirections load_directions(const std::string& path, const Graph& g) {
  return directions_from_archive(g, read_archive(path));
}

void SteeringPolicy::validate() const {
  if (!(alpha >= 0) || !std::isfinite(alpha)) throw ArgumentError("steering alpha must be >= 0");
}

Vector steered_forward(const Model& model, const Field& raw, const SteeringDirections& directions,
                       const SteeringPolicy& policy) {
  policy.validate();
  const Graph& g = model.graph();
  policy.circuit.check_compatible(g);
  if (directions.fingerprint != g.fingerprint())
    throw MismatchError("steering directions belong to another graph");

  std::vector<char> circuit_sender(g.senders().size(), 0);
  for (int s : circuit_senders(g, policy.circuit)) circuit_sender[s] = 1;
  auto steered = [&](int e) {
    const Edge& edge = g.edges()[e];
    if (policy.max_receiver_layer && g.receiver_layer(edge.receiver) > *policy.max_receiver_layer)
      return false;
    return policy.sender_global ? circuit_sender[edge.sender] != 0 : policy.circuit.contains(e);
  };
  std::vector<const Field*> dir(g.senders().size(), nullptr);
  for (std::size_t e = 0; e < g.edges().size(); ++e) {
    if (!steered(static_cast<int>(e))) continue;
    const int s = g.edges()[e].sender;
    if (dir[s]) continue;
    auto it = directions.by_sender.find(s);
    if (it == directions.by_sender.end())
      throw ArgumentError("no steering direction for sender " + g.senders()[s].name());
    if (it->second.rows() != model.config().patch_count || it->second.cols() != model.config().model_dim)
      throw ArgumentError("steering direction for " + g.senders()[s].name() + " has the wrong shape");
    dir[s] = &it->second;
  }

  PassState state = start_pass(model, model.embed(raw));
  // A sender's ablated output is the same toward every steered receiver.
  std::vector<Field> ablated(g.senders().size());
  std::vector<char> ready(g.senders().size(), 0);
  run_receivers(model, state, 0, [&](int r, const PassState& s) {
    const auto [first, last] = g.incoming_range(r);
    auto contribution = [&](int e) -> const Field& {
      const int u = e - first;
      if (!steered(e)) return s.live[u];
      if (!ready[u]) {
        ablated[u] = apply_ablation(s.live[u], *dir[u], policy.alpha, directions.epsilon);
        ready[u] = 1;
      }
      return ablated[u];
    };
    Field in = contribution(first);
    for (int e = first + 1; e < last; ++e) in += contribution(e);
    return in;
  });
  return state.logits;
}

namespace {

// Number of classes scoring strictly above class `c`.
int rank_of(const Vector& logits, int c) {
  int above = 0;
  for (Eigen::Index k = 0; k < logits.size(); ++k) above += logits(k) > logits(c);
  return above;
}

}  // namespace

std::vector<AttackRow> attack_metrics(const Model& model, const std::vector<PairedExample>& clean,
                                      const std::vector<PairedExample>& attacked,
                                      const SteeringDirections& directions,
                                      const CircuitMask& circuit, const std::vector<double>& alphas,
                                      const std::vector<int>& layers, bool sender_global) {
  if (clean.empty() || attacked.empty()) throw ArgumentError("attack_metrics: empty evaluation set");
  for (const auto& x : attacked)
    if (x.attack_target < 0) throw ArgumentError("attack_metrics: attacked pair without a target");

  std::vector<std::optional<int>> cutoffs;
  for (int l : layers) cutoffs.push_back(l);
  if (cutoffs.empty()) cutoffs.push_back(std::nullopt);

  auto evaluate = [&](const SteeringPolicy& policy) {
    AttackRow row;
    for (const auto& x : clean) {
      const int r = rank_of(steered_forward(model, x.clean, directions, policy), x.label);
      row.clean_top1 += r == 0;
      row.clean_top5 += r < 5;
    }
    for (const auto& x : attacked) {
      const Vector logits = steered_forward(model, attacked_image(x), directions, policy);
      const int r = rank_of(logits, x.label), ra = rank_of(logits, x.attack_target);
      row.atk_top1 += r == 0;
      row.atk_top5 += r < 5;
      row.asr_top1 += ra == 0;
      row.asr_top5 += ra < 5;
    }
    const double nc = double(clean.size()), na = double(attacked.size());
    row.clean_top1 /= nc;
    row.clean_top5 /= nc;
    row.atk_top1 /= na;
    row.atk_top5 /= na;
    row.asr_top1 /= na;
    row.asr_top5 /= na;
    return row;
  };

  SteeringPolicy base_policy{circuit, 0.0, std::nullopt, sender_global};
  const double base_clean = evaluate(base_policy).clean_top1;

  std::vector<AttackRow> out;
  for (double alpha : alphas) {
    for (const auto& cutoff : cutoffs) {
      SteeringPolicy policy{circuit, alpha, cutoff, sender_global};
      AttackRow row = evaluate(policy);
      row.alpha = alpha;
      row.max_layer = cutoff.value_or(model.config().layers);
      row.retention = base_clean > 0 ? row.clean_top1 / base_clean : 0.0;
      out.push_back(row);
    }
  }
  return out;
}

std::string attack_csv_header() {
  return "alpha,max_layer,clean_top1,clean_top5,atk_top1,atk_top5,asr_top1,asr_top5,retention\n";
}

std::string attack_csv_rows(const std::vector<AttackRow>& rows) {
  std::string out;
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6g,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n", r.alpha,
                  r.max_layer, r.clean_top1, r.clean_top5, r.atk_top1, r.atk_top5, r.asr_top1,
                  r.asr_top5, r.retention);
    out += buf;
  }
  return out;
}

std::optional<AttackRow> select_alpha(const std::vector<AttackRow>& rows, double base_asr,
                                      double reduction, double min_retention) {
  std::optional<AttackRow> best;
  for (const auto& r : rows) {
    const bool meets = base_asr > 0 ? (base_asr - r.asr_top1) / base_asr >= reduction : false;
    if (!meets || r.retention < min_retention) continue;
    if (!best || r.alpha < best->alpha) best = r;
  }
  return best;
}

RetrievalMetrics retrieval_metrics(const Field& queries, const Field& candidates,
                                   const std::vector<int>& correct,
                                   const std::vector<bool>& manipulated, const std::vector<int>& ks) {
  const Eigen::Index n = queries.rows(), m = candidates.rows();
  if (queries.cols() != candidates.cols())
    throw ArgumentError("retrieval_metrics: query and candidate widths differ");
  if (static_cast<Eigen::Index>(correct.size()) != n)
    throw ArgumentError("retrieval_metrics: one correct candidate per query is required");
  if (static_cast<Eigen::Index>(manipulated.size()) != m)
    throw ArgumentError("retrieval_metrics: manipulated flags must cover every candidate");
  if (n == 0) throw ArgumentError("retrieval_metrics: no queries");
  for (int k : ks)
    if (k < 1 || k > m) throw ArgumentError("retrieval_metrics: k=" + std::to_string(k) + " out of range");
  for (int c : correct)
    if (c < 0 || c >= m) throw ArgumentError("retrieval_metrics: correct index out of range");

  const Field scores = queries * candidates.transpose();
  std::vector<int> correct_rank(n), first_manipulated(n, static_cast<int>(m));
  std::vector<int> order(m);
  for (Eigen::Index q = 0; q < n; ++q) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores(q, a) > scores(q, b); });
    for (Eigen::Index pos = 0; pos < m; ++pos) {
      const int c = order[pos];
      if (c == correct[q]) correct_rank[q] = static_cast<int>(pos);
      if (manipulated[c] && first_manipulated[q] == m) first_manipulated[q] = static_cast<int>(pos);
    }
  }
  auto recall_at = [&](int k) {
    int hits = 0;
    for (Eigen::Index q = 0; q < n; ++q) hits += correct_rank[q] < k;
    return double(hits) / double(n);
  };
  RetrievalMetrics out;
  out.ks = ks;
  for (int k : ks) {
    out.recall.push_back(recall_at(k));
    int hits = 0;
    for (Eigen::Index q = 0; q < n; ++q) hits += first_manipulated[q] < k;
    out.rsms.push_back(double(hits) / double(n));
  }
  out.r_mean = m >= 10 ? (recall_at(1) + recall_at(5) + recall_at(10)) / 3.0
                       : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace vitcd
