#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "vitcd/archive.hpp"
#include "vitcd/data.hpp"
#include "vitcd/synthetic.hpp"

#include <random>
#include <set>

using namespace vitcd;

namespace {

SyntheticTaskSpec spec4() { return SyntheticTaskSpec::standard(4, 6.0, 11); }

bool rows_equal(const Field& a, const Field& b, int r) { return a.row(r) == b.row(r); }

}  // namespace

TEST_CASE("spec json round trip and validation") {
  const SyntheticTaskSpec s = spec4();
  CHECK_NOTHROW(s.validate());
  CHECK(s.patch_count() == 17);
  CHECK(s.input_dim() == 8);
  const auto back = SyntheticTaskSpec::from_json(s.to_json());
  CHECK(back.digest() == s.digest());
  CHECK(SyntheticTaskSpec::from_json({{"seed", 11}, {"amplitude", 6.0}}).digest() == s.digest());
  CHECK(spec4().digest() != SyntheticTaskSpec::standard(4, 6.0, 12).digest());

  SyntheticTaskSpec bad = s;
  bad.foreground_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.patterns.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.background_std = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(SyntheticTaskSpec::from_json({{"grid_side", "four"}}), ConfigError);
}

TEST_CASE("class pairs: class token, foreground and background structure") {
  const SyntheticTaskSpec s = spec4();
  const auto xs = generate_class_pairs(s, 2, 30);
  CHECK(xs.size() == 30);
  for (const auto& x : xs) {
    CHECK(x.label == 2);
    CHECK(x.attack_target == -1);
    CHECK(x.clean.rows() == 17);
    CHECK(x.clean.cols() == 8);
    CHECK(x.clean.row(0).isZero());
    CHECK(x.corrupted.row(0).isZero());
    CHECK(x.foreground.size() == 4);  // round(0.25 * 16)
    CHECK(std::is_sorted(x.foreground.begin(), x.foreground.end()));
    const std::set<int> fg(x.foreground.begin(), x.foreground.end());
    for (int r = 1; r < 17; ++r) {
      if (fg.count(r)) {
        CHECK_FALSE(rows_equal(x.clean, x.corrupted, r));
      } else {
        CHECK(rows_equal(x.clean, x.corrupted, r));
      }
    }
    // Values are stored at float32 precision.
    CHECK(x.clean.unaryExpr([](double v) { return to_storage(v); }) == x.clean);
  }
  // Reproducible, stream-separated, class-separated.
  CHECK(generate_class_pairs(s, 2, 3)[1].clean == xs[1].clean);
  CHECK(generate_class_pairs(s, 2, 3, 1)[1].clean != xs[1].clean);
  CHECK(generate_class_pairs(s, 1, 3)[1].clean != xs[1].clean);
  CHECK_THROWS_AS(generate_class_pairs(s, 4, 3), ArgumentError);
}

TEST_CASE("planted signal averages to the class pattern on foreground rows") {
  const SyntheticTaskSpec s = spec4();
  RowVector mean = RowVector::Zero(8);
  int rows = 0;
  for (const auto& x : generate_class_pairs(s, 1, 400))
    for (int r : x.foreground) {
      mean += x.clean.row(r);
      ++rows;
    }
  mean /= rows;
  // Foreground = background N(0, 1) + pattern + 0.25 N(0, 1).
  const double sd = std::sqrt(1 + 0.0625) / std::sqrt(double(rows));
  for (int j = 0; j < 8; ++j) CHECK(std::abs(mean(j) - (j == 1 ? 6.0 : 0.0)) < 5 * sd);
}

TEST_CASE("typographic pairs differ only in the text channel on attack patches") {
  const SyntheticTaskSpec s = spec4();
  for (Placement pl : {Placement::border, Placement::scattered, Placement::block}) {
    AttackSpec atk;
    atk.target = 3;
    atk.placement = pl;
    const auto xs = generate_typographic_pairs(s, atk, 40);
    std::set<int> labels;
    for (const auto& x : xs) {
      CHECK(x.attack_target == 3);
      CHECK(x.label != 3);
      labels.insert(x.label);
      const Field diff = attacked_image(x) - original_image(x);
      CHECK(diff.leftCols(7).isZero());
      int touched = 0;
      for (int r = 0; r < 17; ++r)
        if (diff(r, 7) != 0) {
          ++touched;
          CHECK(r != 0);
          CHECK(std::abs(diff(r, 7) - atk.amplitude) < 1e-5);
        }
      CHECK(touched > 0);
      // Some foreground patch is always left unwritten.
      bool spared = false;
      for (int r : x.foreground) spared |= diff(r, 7) == 0;
      CHECK(spared);
    }
    CHECK(labels == std::set<int>{0, 1, 2});
  }
  CHECK(parse_placement(to_string(Placement::block)) == Placement::block);
  CHECK_THROWS_AS(parse_placement("diagonal"), ArgumentError);
}

TEST_CASE("attack placements") {
  SyntheticTaskSpec s = spec4();
  AttackSpec atk;
  // 4x4 grid: border cells are every cell but the inner 2x2 block {6, 7, 10, 11}.
  const auto border = attack_patches(s, atk, {6, 7}, 0);
  CHECK(border.size() == 12);
  for (int r : border) CHECK((r != 6 && r != 7 && r != 10 && r != 11));
  atk.placement = Placement::scattered;
  atk.scattered_count = 5;
  CHECK(attack_patches(s, atk, {1, 2}, 3).size() == 5);
  atk.placement = Placement::block;
  const auto block = attack_patches(s, atk, {1, 2, 5, 6}, 4);
  CHECK(block.size() == 4);
  atk.placement = Placement::border;
  // A foreground made entirely of border cells would be fully covered.
  s.foreground_fraction = 1.0 - 1e-9;
  CHECK_THROWS_AS(attack_patches(s, atk, border, 0), ArgumentError);
}

TEST_CASE("filtering keeps about 1/C of uniformly labelled pairs on an uninformative model") {
  ModelConfig c;
  c.patch_count = 17;
  c.input_dim = 8;
  c.num_classes = 4;
  c.layers = 1;
  const Model m(c, WeightSet::random(c, 5));
  // Labels drawn independently of the images: P(correct) = 1/C whatever the model's bias.
  std::vector<PairedExample> xs;
  for (int k = 0; k < 4; ++k) {
    auto part = generate_class_pairs(spec4(), k, 150);
    xs.insert(xs.end(), part.begin(), part.end());
  }
  std::mt19937_64 gen(8);
  for (auto& x : xs) x.label = int(gen() % 4);
  const double kept = double(filter_correct(m, xs).size()) / xs.size();
  const double sd = std::sqrt(0.25 * 0.75 / xs.size());
  CHECK(std::abs(kept - 0.25) < 4 * sd);
}

TEST_CASE("linear probe separates clean images and not corrupted ones") {
  const SyntheticTaskSpec s = spec4();
  std::vector<PairedExample> train, test;
  for (int k = 0; k < 4; ++k) {
    auto a = generate_class_pairs(s, k, 60, 1), b = generate_class_pairs(s, k, 60, 2);
    train.insert(train.end(), a.begin(), a.end());
    test.insert(test.end(), b.begin(), b.end());
  }
  CHECK(linear_probe_accuracy(train, test, 4, true) >= 0.95);
  CHECK(std::abs(linear_probe_accuracy(train, test, 4, false) - 0.25) <= 0.10);
}

TEST_CASE("pairs round-trip through the container and manifest") {
  const SyntheticTaskSpec s = spec4();
  AttackSpec atk;
  atk.target = 0;
  auto xs = generate_typographic_pairs(s, atk, 5);
  const std::string dir = test_util::scratch_dir("pairs");
  save_pairs(dir, xs, s.digest(), {{"note", "x"}});
  const auto back = load_pairs(dir, 4, std::make_pair(17, 8));
  REQUIRE(back.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(back[i].clean == xs[i].clean);
    CHECK(back[i].corrupted == xs[i].corrupted);
    CHECK(back[i].label == xs[i].label);
    CHECK(back[i].attack_target == 0);
    CHECK(back[i].foreground == xs[i].foreground);
  }
  CHECK(dataset_digest(back) == dataset_digest(xs));
  const std::string a1 = test_util::slurp(dir + "/pairs.cfw"), m1 = test_util::slurp(dir + "/manifest.json");
  const std::string dir2 = test_util::scratch_dir("pairs2");
  save_pairs(dir2, back, s.digest(), {{"note", "x"}});
  CHECK(test_util::slurp(dir2 + "/pairs.cfw") == a1);
  CHECK(test_util::slurp(dir2 + "/manifest.json") == m1);

  CHECK_THROWS_AS(load_pairs(dir, 4, std::make_pair(17, 9)), FormatError);
  CHECK_THROWS_WITH_AS(load_pairs(dir, 1), doctest::Contains("out of range"), FormatError);
}

TEST_CASE("loader rejects orphaned halves and stray tensors") {
  const SyntheticTaskSpec s = spec4();
  const auto xs = generate_class_pairs(s, 0, 3);
  const std::string dir = test_util::scratch_dir("orphans");
  save_pairs(dir, xs, s.digest());
  Archive a = read_archive(dir + "/pairs.cfw");
  Archive orphan = a;
  orphan.tensors.erase("p00001.corrupted");
  write_archive(dir + "/pairs.cfw", orphan);
  CHECK_THROWS_WITH_AS(load_pairs(dir), doctest::Contains("p00001"), FormatError);
  Archive stray = a;
  stray.put("p00001.mask", Vector(Vector::Ones(3)));
  write_archive(dir + "/pairs.cfw", stray);
  CHECK_THROWS_WITH_AS(load_pairs(dir), doctest::Contains("p00001.mask"), FormatError);
  write_archive(dir + "/pairs.cfw", a);
  CHECK(load_pairs(dir).size() == 3);

  auto m = DatasetManifest::from_json(nlohmann::json::parse(test_util::slurp(dir + "/manifest.json")));
  m.labels.pop_back();
  CHECK_THROWS_AS(DatasetManifest::from_json(m.to_json()), FormatError);
}
