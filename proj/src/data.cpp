#include "vitcd/data.hpp"

#include "vitcd/archive.hpp"
#include "vitcd/model.hpp"
#include "vitcd/patching.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace vitcd {

SyntheticTaskSpec SyntheticTaskSpec::standard(int num_classes, double amplitude,
                                              std::uint64_t seed) {
  SyntheticTaskSpec s;
  s.num_classes = num_classes;
  s.seed = seed;
  for (int c = 0; c < num_classes; ++c) {
    Vector p = Vector::Zero(s.input_dim());
    p(c) = amplitude;
    s.patterns.push_back(p);
  }
  return s;
}

void SyntheticTaskSpec::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
  if (grid_side < 2) throw ConfigError("data.grid_side must be >= 2");
  if (extra_dims < 0) throw ConfigError("data.extra_dims must be >= 0");
  if (!(background_std > 0)) throw ConfigError("data.background_std must be positive");
  if (!(foreground_fraction > 0 && foreground_fraction < 1))
    throw ConfigError("data.foreground_fraction must lie in (0, 1)");
  if (!(noise_scale >= 0)) throw ConfigError("data.noise_scale must be >= 0");
  if (static_cast<int>(patterns.size()) != num_classes)
    throw ConfigError("data.patterns must hold one pattern per class");
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    if (patterns[i].size() != input_dim())
      throw ConfigError("data.patterns[" + std::to_string(i) + "] has the wrong width");
    if (!patterns[i].allFinite())
      throw ConfigError("data.patterns[" + std::to_string(i) + "] is not finite");
    for (std::size_t j = 0; j < i; ++j)
      if (patterns[i] == patterns[j])
        throw ConfigError("data.patterns " + std::to_string(j) + " and " + std::to_string(i) +
                          " are identical");
  }
}

nlohmann::json SyntheticTaskSpec::to_json() const {
  nlohmann::json pats = nlohmann::json::array();
  for (const auto& p : patterns) pats.push_back(std::vector<double>(p.data(), p.data() + p.size()));
  return {{"num_classes", num_classes},
          {"grid_side", grid_side},
          {"extra_dims", extra_dims},
          {"patterns", pats},
          {"background_mean", background_mean},
          {"background_std", background_std},
          {"foreground_fraction", foreground_fraction},
          {"noise_scale", noise_scale},
          {"seed", seed}};
}

SyntheticTaskSpec SyntheticTaskSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("data: expected an object");
  SyntheticTaskSpec s;
  try {
    s.num_classes = j.value("num_classes", s.num_classes);
    s.grid_side = j.value("grid_side", s.grid_side);
    s.extra_dims = j.value("extra_dims", s.extra_dims);
    s.background_mean = j.value("background_mean", s.background_mean);
    s.background_std = j.value("background_std", s.background_std);
    s.foreground_fraction = j.value("foreground_fraction", s.foreground_fraction);
    s.noise_scale = j.value("noise_scale", s.noise_scale);
    s.seed = j.value("seed", s.seed);
    if (j.contains("patterns")) {
      for (const auto& p : j.at("patterns")) {
        const auto v = p.get<std::vector<double>>();
        s.patterns.push_back(Eigen::Map<const Vector>(v.data(), Eigen::Index(v.size())));
      }
    } else {
      s.patterns = standard(s.num_classes, j.value("amplitude", 4.0), s.seed).patterns;
      for (auto& p : s.patterns) p.conservativeResize(s.input_dim()), p.tail(s.extra_dims).setZero();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  s.validate();
  return s;
}

std::string SyntheticTaskSpec::digest() const { return hex_digest(fnv1a(to_json().dump())); }

std::string to_string(Placement p) {
  switch (p) {
    case Placement::border: return "border";
    case Placement::scattered: return "scattered";
    case Placement::block: return "block";
  }
  return {};
}

Placement parse_placement(const std::string& s) {
  if (s == "border") return Placement::border;
  if (s == "scattered") return Placement::scattered;
  if (s == "block") return Placement::block;
  throw ArgumentError("unknown placement '" + s + "'");
}

Vector AttackSpec::pattern(const SyntheticTaskSpec& spec) const {
  if (target < 0 || target >= spec.num_classes) throw ArgumentError("attack target out of range");
  Vector p = Vector::Zero(spec.input_dim());
  p(spec.num_classes + target) = amplitude;
  return p;
}

namespace {

struct Sampler {
  explicit Sampler(std::uint64_t seed) : rng(seed) {}
  std::mt19937_64 rng;
  std::normal_distribution<double> normal;

  double gauss() { return normal(rng); }
  int uniform(int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }
};

// Class-token row stays zero; image rows are background draws.
Field background(const SyntheticTaskSpec& spec, Sampler& s) {
  Field x = Field::Zero(spec.patch_count(), spec.input_dim());
  for (Eigen::Index p = 1; p < x.rows(); ++p)
    for (Eigen::Index k = 0; k < x.cols(); ++k)
      x(p, k) = to_storage(spec.background_mean + spec.background_std * s.gauss());
  return x;
}

std::vector<int> draw_foreground(const SyntheticTaskSpec& spec, Sampler& s) {
  const int cells = spec.grid_side * spec.grid_side;
  const int count = std::clamp(int(std::lround(spec.foreground_fraction * cells)), 1, cells - 1);
  std::vector<int> all(cells);
  std::iota(all.begin(), all.end(), 1);
  for (int i = 0; i < count; ++i) std::swap(all[i], all[i + s.uniform(cells - i)]);
  std::vector<int> fg(all.begin(), all.begin() + count);
  std::sort(fg.begin(), fg.end());
  return fg;
}

PairedExample class_pair(const SyntheticTaskSpec& spec, int cls, std::uint64_t seed) {
  Sampler s(seed);
  PairedExample x;
  x.label = cls;
  x.clean = background(spec, s);
  x.foreground = draw_foreground(spec, s);
  x.corrupted = x.clean;
  const Vector& pattern = spec.patterns[cls];
  for (int p : x.foreground) {
    for (Eigen::Index k = 0; k < x.clean.cols(); ++k) {
      x.clean(p, k) = to_storage(x.clean(p, k) + pattern(k) + spec.noise_scale * s.gauss());
      x.corrupted(p, k) = to_storage(spec.background_mean + spec.background_std * s.gauss());
    }
  }
  return x;
}

}  // namespace

std::vector<PairedExample> generate_class_pairs(const SyntheticTaskSpec& spec, int cls, int n,
                                                std::uint64_t stream) {
  spec.validate();
  if (n < 1) throw ArgumentError("generate_class_pairs: n must be >= 1");
  if (cls < 0 || cls >= spec.num_classes) throw ArgumentError("generate_class_pairs: bad class");
  std::vector<PairedExample> out;
  const std::uint64_t base = mix_seed(mix_seed(spec.seed, stream), std::uint64_t(cls));
  for (int i = 0; i < n; ++i) out.push_back(class_pair(spec, cls, mix_seed(base, i)));
  return out;
}

std::vector<int> attack_patches(const SyntheticTaskSpec& spec, const AttackSpec& attack,
                                const std::vector<int>& foreground, std::uint64_t seed) {
  const int g = spec.grid_side;
  const int cells = g * g;
  const std::set<int> fg(foreground.begin(), foreground.end());
  auto covers_all = [&](const std::vector<int>& ps) {
    return std::all_of(fg.begin(), fg.end(),
                       [&](int p) { return std::find(ps.begin(), ps.end(), p) != ps.end(); });
  };

  std::vector<int> out;
  switch (attack.placement) {
    case Placement::border: {
      for (int p = 1; p <= cells; ++p) {
        const int row = (p - 1) / g, col = (p - 1) % g;
        if (row == 0 || col == 0 || row == g - 1 || col == g - 1) out.push_back(p);
      }
      // Leave the object visible: drop foreground cells when the frame would hide all of them.
      if (covers_all(out))
        out.erase(std::remove_if(out.begin(), out.end(), [&](int p) { return fg.count(p) != 0; }),
                  out.end());
      break;
    }
    case Placement::scattered: {
      std::vector<int> free;
      for (int p = 1; p <= cells; ++p) free.push_back(p);
      Sampler s(seed);
      const int k = std::min(attack.scattered_count, cells);
      for (int i = 0; i < k; ++i) std::swap(free[i], free[i + s.uniform(cells - i)]);
      out.assign(free.begin(), free.begin() + k);
      if (covers_all(out))
        out.erase(std::remove_if(out.begin(), out.end(), [&](int p) { return fg.count(p) != 0; }),
                  out.end());
      break;
    }
    case Placement::block: {
      const int side = std::max(1, g / 2);
      std::vector<std::pair<int, int>> corners;
      for (int r = 0; r + side <= g; ++r)
        for (int c = 0; c + side <= g; ++c) corners.push_back({r, c});
      Sampler s(seed);
      for (std::size_t i = 0; i + 1 < corners.size(); ++i)
        std::swap(corners[i], corners[i + s.uniform(int(corners.size() - i))]);
      for (auto [r0, c0] : corners) {
        std::vector<int> block;
        for (int r = r0; r < r0 + side; ++r)
          for (int c = c0; c < c0 + side; ++c) block.push_back(1 + r * g + c);
        if (!covers_all(block)) {
          out = block;
          break;
        }
      }
      break;
    }
  }
  if (out.empty() || covers_all(out))
    throw ArgumentError("attack placement '" + to_string(attack.placement) +
                        "' cannot avoid covering the whole foreground");
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<PairedExample> generate_typographic_pairs(const SyntheticTaskSpec& spec,
                                                      const AttackSpec& attack, int n,
                                                      std::uint64_t stream) {
  spec.validate();
  if (n < 1) throw ArgumentError("generate_typographic_pairs: n must be >= 1");
  const Vector text = attack.pattern(spec);
  for (const auto& p : spec.patterns)
    if (p == text && attack.amplitude != 0)
      throw ArgumentError("attack pattern coincides with a class pattern");

  std::vector<PairedExample> out;
  const std::uint64_t base = mix_seed(mix_seed(spec.seed, stream), 0x7970ULL + attack.target);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = mix_seed(base, i);
    Sampler pick(seed);
    int label = pick.uniform(spec.num_classes - 1);
    if (label >= attack.target) ++label;
    PairedExample x = class_pair(spec, label, mix_seed(seed, 1));
    x.corrupted = x.clean;  // the original, unattacked image
    x.attack_target = attack.target;
    for (int p : attack_patches(spec, attack, x.foreground, mix_seed(seed, 2)))
      for (Eigen::Index k = 0; k < text.size(); ++k)
        if (text(k) != 0) x.clean(p, k) = to_storage(x.clean(p, k) + text(k));
    out.push_back(std::move(x));
  }
  return out;
}

std::vector<PairedExample> filter_correct(const Model& model,
                                          const std::vector<PairedExample>& xs) {
  std::vector<PairedExample> out;
  for (const auto& x : xs)
    if (argmax(forward_with_trace(model, x.clean).logits) == x.label) out.push_back(x);
  if (out.empty() && !xs.empty())
    std::fprintf(stderr, "warning: filter_correct kept none of %zu examples\n", xs.size());
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"spec_digest", spec_digest}, {"ids", ids},           {"labels", labels},
          {"attack_targets", attack_targets}, {"foreground", foreground}, {"extra", extra}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.spec_digest = j.at("spec_digest").get<std::string>();
    m.ids = j.at("ids").get<std::vector<std::string>>();
    m.labels = j.at("labels").get<std::vector<int>>();
    m.attack_targets = j.value("attack_targets", std::vector<int>(m.ids.size(), -1));
    m.foreground = j.value("foreground", std::vector<std::vector<int>>(m.ids.size()));
    m.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset manifest: ") + e.what());
  }
  if (m.labels.size() != m.ids.size() || m.attack_targets.size() != m.ids.size() ||
      m.foreground.size() != m.ids.size())
    throw FormatError("dataset manifest: per-example lists differ in length");
  return m;
}

namespace {

std::string pair_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%05zu", i);
  return buf;
}

Archive pairs_archive(const std::vector<PairedExample>& xs, const std::string& spec_digest) {
  Archive a;
  a.metadata = {{"kind", "pairs"}, {"spec_digest", spec_digest}, {"count", xs.size()}};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    a.put(pair_id(i) + ".clean", xs[i].clean);
    a.put(pair_id(i) + ".corrupted", xs[i].corrupted);
  }
  return a;
}

DatasetManifest manifest_for(const std::vector<PairedExample>& xs, const std::string& spec_digest,
                             const nlohmann::json& extra) {
  DatasetManifest m;
  m.spec_digest = spec_digest;
  m.extra = extra.is_null() ? nlohmann::json::object() : extra;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    m.ids.push_back(pair_id(i));
    m.labels.push_back(xs[i].label);
    m.attack_targets.push_back(xs[i].attack_target);
    m.foreground.push_back(xs[i].foreground);
  }
  return m;
}

}  // namespace

void save_pairs(const std::string& dir, const std::vector<PairedExample>& xs,
                const std::string& spec_digest, const nlohmann::json& extra) {
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (xs[i].clean.rows() != xs[i].corrupted.rows() || xs[i].clean.cols() != xs[i].corrupted.cols())
      throw ArgumentError("save_pairs: halves of pair " + std::to_string(i) + " differ in shape");
  std::filesystem::create_directories(dir);
  write_archive(dir + "/pairs.cfw", pairs_archive(xs, spec_digest));
  write_file_atomic(dir + "/manifest.json", manifest_for(xs, spec_digest, extra).to_json().dump(2) + "\n");
}

std::vector<PairedExample> load_pairs(const std::string& dir, std::optional<int> num_classes,
                                      std::optional<std::pair<int, int>> shape) {
  const Archive a = read_archive(dir + "/pairs.cfw");
  nlohmann::json mj;
  try {
    const auto bytes = read_file_bytes(dir + "/manifest.json");
    mj = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  const DatasetManifest m = DatasetManifest::from_json(mj);

  // Both halves must be present for every id in the container.
  std::map<std::string, int> halves;
  for (const auto& [name, t] : a.tensors) {
    const auto dot = name.rfind('.');
    const std::string suffix = dot == std::string::npos ? "" : name.substr(dot + 1);
    if (suffix == "clean") halves[name.substr(0, dot)] |= 1;
    else if (suffix == "corrupted") halves[name.substr(0, dot)] |= 2;
    else throw FormatError("pairs container: unexpected tensor '" + name + "'");
  }
  std::string orphans;
  for (const auto& [id, bits] : halves)
    if (bits != 3) orphans += (orphans.empty() ? "" : ", ") + id;
  if (!orphans.empty()) throw FormatError("orphaned half-pairs: " + orphans);
  const std::set<std::string> listed(m.ids.begin(), m.ids.end());
  for (const auto& [id, bits] : halves)
    if (!listed.count(id)) orphans += (orphans.empty() ? "" : ", ") + id;
  if (!orphans.empty()) throw FormatError("pairs missing from the manifest: " + orphans);

  std::vector<PairedExample> out;
  for (std::size_t i = 0; i < m.ids.size(); ++i) {
    const std::string& id = m.ids[i];
    if (!halves.count(id)) throw FormatError("manifest id '" + id + "' has no tensors");
    PairedExample x;
    x.clean = a.get_matrix(id + ".clean");
    x.corrupted = a.get_matrix(id + ".corrupted");
    x.label = m.labels[i];
    x.attack_target = m.attack_targets[i];
    x.foreground = m.foreground[i];
    if (x.clean.rows() != x.corrupted.rows() || x.clean.cols() != x.corrupted.cols())
      throw FormatError("pair '" + id + "': clean and corrupted shapes differ");
    if (shape && (x.clean.rows() != shape->first || x.clean.cols() != shape->second))
      throw FormatError("pair '" + id + "' has shape " + std::to_string(x.clean.rows()) + "x" +
                        std::to_string(x.clean.cols()) + ", expected " +
                        std::to_string(shape->first) + "x" + std::to_string(shape->second));
    if (!out.empty() && (x.clean.rows() != out.front().clean.rows() ||
                         x.clean.cols() != out.front().clean.cols()))
      throw FormatError("pair '" + id + "' differs in shape from '" + m.ids.front() + "'");
    const int limit = num_classes.value_or(std::numeric_limits<int>::max());
    if (x.label < 0 || x.label >= limit)
      throw FormatError("pair '" + id + "': label " + std::to_string(x.label) + " out of range");
    if (x.attack_target >= limit || x.attack_target < -1)
      throw FormatError("pair '" + id + "': attack target out of range");
    out.push_back(std::move(x));
  }
  return out;
}

std::string dataset_digest(const std::vector<PairedExample>& xs) {
  const auto bytes = encode_archive(pairs_archive(xs, ""));
  std::uint64_t h = fnv1a(bytes.data(), bytes.size());
  h = fnv1a(manifest_for(xs, "", {}).to_json().dump(), h);
  return hex_digest(h);
}

namespace {

Field probe_features(const std::vector<PairedExample>& xs, bool use_clean) {
  const Eigen::Index dim = (use_clean ? xs.front().clean : xs.front().corrupted).cols();
  Field f(xs.size(), dim + 1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Field& x = use_clean ? xs[i].clean : xs[i].corrupted;
    f.row(i).head(dim) = x.bottomRows(x.rows() - 1).colwise().mean();
    f(i, dim) = 1;
  }
  return f;
}

}  // namespace

double linear_probe_accuracy(const std::vector<PairedExample>& train,
                             const std::vector<PairedExample>& test, int num_classes,
                             bool use_clean) {
  if (train.empty() || test.empty()) throw ArgumentError("linear probe needs nonempty sets");
  const Field a = probe_features(train, use_clean);
  Field y = Field::Zero(a.rows(), num_classes);
  for (std::size_t i = 0; i < train.size(); ++i) y(i, train[i].label) = 1;
  // Ridge-stabilized normal equations; a tiny ridge keeps rank-deficient designs solvable.
  Field gram = a.transpose() * a;
  gram.diagonal().array() += 1e-6;
  const Field w = gram.ldlt().solve(a.transpose() * y);
  const Field scores = probe_features(test, use_clean) * w;
  int correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    correct += best == test[i].label;
  }
  return double(correct) / double(test.size());
}

}  // namespace vitcd
