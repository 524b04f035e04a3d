#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vitcd/patching.hpp"
#include "vitcd/steering.hpp"
#include "vitcd/synthetic.hpp"

#include <random>

using namespace vitcd;
using test_util::rel_err;

namespace {

Field randn(int r, int c, std::mt19937_64& gen, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Field m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = n(gen);
  return m;
}

std::vector<PairedExample> typographic_set(const PlantedModel& p, int target, int n, std::uint64_t stream) {
  AttackSpec atk;
  atk.target = target;
  atk.amplitude = 10.0;
  return generate_typographic_pairs(p.task, atk, n, stream);
}

}  // namespace

TEST_CASE("ablation leaves rows alone when alpha is zero or the projection is not positive") {
  std::mt19937_64 gen(1);
  const Field h = randn(5, 4, gen), v = randn(5, 4, gen);
  CHECK(apply_ablation(h, v, 0.0, 1e-8) == h);
  const Field neg = -h;
  // Flip rows so every projection is negative.
  Field hn = h;
  for (int p = 0; p < 5; ++p)
    if (h.row(p).dot(v.row(p)) > 0) hn.row(p) = neg.row(p);
  CHECK(apply_ablation(hn, v, 1.5, 1e-8) == hn);
  CHECK(apply_ablation(h, Field::Zero(5, 4), 1.0, 1e-8) == h);
  CHECK_THROWS_AS(apply_ablation(h, Field::Zero(4, 4), 1.0, 1e-8), ArgumentError);
}

TEST_CASE("full ablation removes the projection up to the epsilon remainder") {
  std::mt19937_64 gen(2);
  for (int t = 0; t < 500; ++t) {
    const Field h = randn(3, 6, gen), v = randn(3, 6, gen, 0.1 + (t % 7));
    const double eps = t % 2 ? 1e-8 : 0.3;
    const double alpha = (t % 5) * 0.5;
    const Vector c = projection_coefficients(h, v, eps);
    const Vector c2 = projection_coefficients(apply_ablation(h, v, alpha, eps), v, eps);
    for (int p = 0; p < 3; ++p) {
      const double vv = v.row(p).squaredNorm();
      const double want = c(p) > 0 && alpha > 0 ? c(p) * (1 - alpha * vv / (vv + eps)) : c(p);
      CHECK(std::abs(c2(p) - want) <= 1e-12 * std::max(1.0, std::abs(c(p))));
    }
  }
}

TEST_CASE("medoid against brute force, with zero vectors and ties") {
  std::mt19937_64 gen(3);
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + gen() % 8;
    std::vector<RowVector> xs;
    for (int i = 0; i < n; ++i) xs.push_back(randn(1, 3, gen).row(0));
    if (t % 4 == 0) xs[gen() % n].setZero();
    int best = 0;
    double best_total = -1e300;
    for (int i = 0; i < n; ++i) {
      double total = 0;
      for (int j = 0; j < n; ++j) {
        const double ni = xs[i].norm(), nj = xs[j].norm();
        total += ni > 0 && nj > 0 ? xs[i].dot(xs[j]) / (ni * nj) : 0.0;
      }
      if (total > best_total + 1e-12 * n) {
        best_total = total;
        best = i;
      }
    }
    CHECK(medoid_index(xs) == best);
  }
  RowVector a(2), b(2);
  a << 1, 0;
  b << 2, 0;
  CHECK(medoid_index({a, b}) == 0);  // tie, first wins
  CHECK_THROWS_AS(medoid_index({}), ArgumentError);
}

TEST_CASE("pre-normed mean directions match a direct computation") {
  const PlantedModel p = planted_typographic_model(0);
  const auto pairs = typographic_set(p, 1, 6, 1);
  const std::vector<int> senders{p.model.graph().head_sender(0, 0), p.model.graph().head_sender(0, 1)};
  const SteeringDirections d = compute_directions(p.model, pairs, senders, SteeringRegime{});
  CHECK(d.n_pairs == 6);
  for (int s : senders) {
    Field want = Field::Zero(p.model.config().patch_count, p.model.config().model_dim);
    std::vector<int> counts(want.rows(), 0);
    for (const auto& x : pairs) {
      const Field a = forward_with_trace(p.model, x.clean).sender_contribution[s];
      const Field b = forward_with_trace(p.model, x.corrupted).sender_contribution[s];
      for (int r = 0; r < want.rows(); ++r)
        if (a.row(r).norm() > 0 && b.row(r).norm() > 0) {
          want.row(r) += a.row(r) / a.row(r).norm() - b.row(r) / b.row(r).norm();
          ++counts[r];
        }
    }
    for (int r = 0; r < want.rows(); ++r)
      if (counts[r]) want.row(r) /= counts[r];
    CHECK((d.by_sender.at(s) - want).cwiseAbs().maxCoeff() < 1e-6);
  }
  SteeringRegime post{NormRegime::post_normed, Aggregate::medoid};
  const auto dp = compute_directions(p.model, pairs, senders, post);
  for (const auto& [s, dir] : dp.by_sender)
    for (int r = 0; r < dir.rows(); ++r)
      if (dir.row(r).norm() > 0) CHECK(std::abs(dir.row(r).norm() - 1.0) < 1e-6);
  CHECK_THROWS_AS(compute_directions(p.model, pairs, senders, SteeringRegime{}, 0.0), ArgumentError);
}

TEST_CASE("regime names round-trip") {
  for (const char* s : {"pre_normed:mean", "pre_normed:medoid", "post_normed:mean", "post_normed:medoid"})
    CHECK(SteeringRegime::parse(s).name() == s);
  CHECK(SteeringRegime::parse("post_normed").name() == "post_normed:mean");
  CHECK_THROWS_AS(SteeringRegime::parse("normed:mean"), ArgumentError);
  CHECK_THROWS_AS(SteeringRegime::parse("pre_normed:median"), ArgumentError);
}

TEST_CASE("direction files round-trip and refuse foreign graphs") {
  const PlantedModel p = planted_typographic_model(1);
  const Graph& g = p.model.graph();
  const auto pairs = typographic_set(p, 2, 4, 1);
  const auto d = compute_directions(p.model, pairs, {0, g.head_sender(0, 1), g.mlp_sender(1)},
                                    SteeringRegime::parse("post_normed:mean"), 1e-6, "t2");
  const std::string dir = test_util::scratch_dir("steer");
  save_directions(dir + "/a.cfw", g, d);
  const auto back = load_directions(dir + "/a.cfw", g);
  CHECK(back.regime.name() == "post_normed:mean");
  CHECK(back.epsilon == 1e-6);
  CHECK(back.attack_id == "t2");
  CHECK(back.by_sender.size() == 3);
  for (const auto& [s, m] : d.by_sender) CHECK(back.by_sender.at(s) == m);
  save_directions(dir + "/b.cfw", g, back);
  CHECK(test_util::slurp(dir + "/a.cfw") == test_util::slurp(dir + "/b.cfw"));
  CHECK_THROWS_AS(load_directions(dir + "/a.cfw", planted_class_model(0).model.graph()), MismatchError);
}

TEST_CASE("steered forward: alpha zero is the plain forward pass, missing directions throw") {
  const PlantedModel p = planted_typographic_model(2);
  const Graph& g = p.model.graph();
  const auto pairs = typographic_set(p, 0, 8, 3);
  CircuitMask circuit = mask_empty(g);
  for (const auto& name : p.essential_edges)
    for (std::size_t e = 0; e < g.edges().size(); ++e)
      if (g.edge_name(int(e)) == name) circuit.set(e, true);
  const auto d = compute_directions(p.model, pairs, circuit_senders(g, circuit), SteeringRegime{});
  SteeringPolicy pol{circuit, 0.0, std::nullopt, false};
  for (const auto& x : pairs) CHECK(steered_forward(p.model, x.clean, d, pol) == forward_with_trace(p.model, x.clean).logits);

  CircuitMask wider = circuit;
  wider.set(*g.find_edge(g.head_sender(0, 2), g.logits_receiver()), true);
  pol.circuit = wider;
  pol.alpha = 1.0;
  CHECK_THROWS_WITH_AS(steered_forward(p.model, pairs[0].clean, d, pol), doctest::Contains("a0.h2"), ArgumentError);
  pol.alpha = -1;
  CHECK_THROWS_AS(pol.validate(), ArgumentError);
}

TEST_CASE("steering the text head defeats the attack and keeps clean accuracy") {
  const PlantedModel p = planted_typographic_model(3);
  const Graph& g = p.model.graph();
  std::vector<PairedExample> attacked;
  for (const auto& x : typographic_set(p, 1, 40, 1))
    if (argmax(forward_with_trace(p.model, x.corrupted).logits) == x.label) attacked.push_back(x);
  std::vector<PairedExample> clean;
  for (int c = 0; c < 4; ++c)
    for (auto& x : generate_class_pairs(p.task, c, 8, 7)) clean.push_back(x);
  clean = filter_correct(p.model, clean);
  CircuitMask circuit = mask_empty(g);
  circuit.set(*g.find_edge(g.head_sender(0, kTextReaderHead), g.logits_receiver()), true);
  const auto d = compute_directions(p.model, attacked, circuit_senders(g, circuit), SteeringRegime{});
  const auto rows = attack_metrics(p.model, clean, attacked, d, circuit, {0.0, 1.0}, {});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].max_layer == 2);
  CHECK(rows[0].asr_top1 > 0.5);
  CHECK(rows[0].retention == 1.0);
  CHECK(rows[1].asr_top1 < 0.1);
  CHECK(rows[1].retention >= 0.9);
  const auto pick = select_alpha(rows, rows[0].asr_top1, 0.9);
  REQUIRE(pick.has_value());
  CHECK(pick->alpha == 1.0);
  CHECK_FALSE(select_alpha(rows, rows[0].asr_top1, 0.9, 1.01).has_value());
  const std::string csv = attack_csv_header() + attack_csv_rows(rows);
  CHECK(csv.rfind("alpha,max_layer,clean_top1,clean_top5,atk_top1,atk_top5,asr_top1,asr_top5,retention\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("retrieval metrics on a hand example") {
  Field q(2, 2), c(3, 2);
  q << 1, 0, 0, 1;
  c << 0.9, 0.1, 0.2, 0.8, 0.5, 0.5;
  // Query 0 ranks {0, 2, 1}; query 1 ranks {1, 2, 0}.
  const auto r = retrieval_metrics(q, c, {2, 1}, {false, false, true}, {1, 2, 3});
  CHECK(r.recall == std::vector<double>{0.5, 1.0, 1.0});
  CHECK(r.rsms == std::vector<double>{0.0, 1.0, 1.0});
  CHECK(std::isnan(r.r_mean));
  CHECK_THROWS_AS(retrieval_metrics(q, c, {2, 1}, {false, false, true}, {4}), ArgumentError);
  CHECK_THROWS_AS(retrieval_metrics(q, c, {2, 5}, {false, false, true}, {1}), ArgumentError);
}

TEST_CASE("random retrieval: recall at k is close to k / n") {
  std::mt19937_64 gen(5);
  const int n = 50, queries = 2000;
  const Field q = randn(queries, 8, gen), c = randn(n, 8, gen);
  std::vector<int> correct(queries);
  for (auto& x : correct) x = int(gen() % n);
  const auto r = retrieval_metrics(q, c, correct, std::vector<bool>(n, false), {1, 5, 10});
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    const double p = double(r.ks[i]) / n;
    const double sd = std::sqrt(p * (1 - p) / queries);
    CHECK(std::abs(r.recall[i] - p) < 4 * sd + 0.01);
    CHECK(r.rsms[i] == 0.0);
  }
  CHECK(r.r_mean == doctest::Approx((r.recall[0] + r.recall[1] + r.recall[2]) / 3));
}
