// vicd: command-line front end for circuit discovery, evaluation, analysis
// and steering.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
// 4 artifact mismatch (fingerprints, corrupt or foreign files).

#include "vitcd/analysis.hpp"
#include "vitcd/discovery.hpp"
#include "vitcd/steering.hpp"
#include "vitcd/synthetic.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace vitcd;

namespace {

// ---------------------------------------------------------------------------
// Configuration

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ConfigError(path + ": top level must be an object");
    for (const auto& [key, value] : j.items()) {
      static const std::set<std::string> known{"model", "data", "discovery", "steering", "analysis"};
      if (!known.count(key)) throw ConfigError(path + ": unknown section '" + key + "'");
      if (!value.is_object()) throw ConfigError(path + ": section '" + key + "' must be an object");
    }
    return j;
  } catch (const json::parse_error& e) {
    // Translate the byte offset into a line/column pair.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(path + ":" + std::to_string(line) + ":" + std::to_string(col) +
                      ": malformed config");
  }
}

json section(const json& cfg, const std::string& name) {
  return cfg.contains(name) ? cfg.at(name) : json::object();
}

template <class T>
T field(const json& sec, const std::string& where, const std::string& key, T fallback) {
  if (!sec.contains(key)) return fallback;
  try {
    return sec.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + sec.at(key).dump() + ")");
  }
}

template <class T>
T required(const json& sec, const std::string& where, const std::string& key) {
  if (!sec.contains(key)) throw ConfigError("missing required field " + where + "." + key);
  return field<T>(sec, where, key, T{});
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ArgumentError("not a number: '" + item + "'");
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 20; ++i) g.push_back(0.05 * i);
  return g;
}

// ---------------------------------------------------------------------------
// Run manifest. The digest covers everything that determines the outputs;
// wall-clock data lives only in the sidecar so outputs stay byte-identical.

struct RunManifest {
  std::string command;
  json config = json::object();
  json seeds = json::object();
  std::vector<std::string> inputs, outputs;

  json stable() const {
    return {{"command", command},
            {"config_digest", hex_digest(fnv1a(config.dump()))},
            {"seeds", seeds},
            {"inputs", inputs},
            {"outputs", outputs},
            {"tool_version", VITCD_VERSION}};
  }
  std::string digest() const { return hex_digest(fnv1a(stable().dump())); }

  void write(const std::string& main_output, double seconds) const {
    json j = stable();
    j["manifest_digest"] = digest();
    j["effective_config"] = config;
    const std::time_t now = std::time(nullptr);
    char stamp[64];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    j["wall_clock"] = {{"finished_utc", stamp}, {"seconds", seconds}};
    write_file_atomic(main_output + ".run.json", j.dump(2) + "\n");
  }
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

std::string strip_json_ext(const std::string& path) {
  return path.size() > 5 && path.compare(path.size() - 5, 5, ".json") == 0
             ? path.substr(0, path.size() - 5)
             : path;
}

std::vector<PairedExample> load_pairs_for(const Model& m, const std::string& dir) {
  return load_pairs(dir, m.config().num_classes,
                    std::make_pair(m.config().patch_count, m.config().input_dim));
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string config, out, model;
};

int cmd_gen(const GenArgs& a) {
  const auto t0 = Clock::now();
  const json cfg = load_config(a.config);
  if (!cfg.contains("data")) throw ConfigError("missing required section 'data'");
  const json data = cfg.at("data");
  const std::string kind = required<std::string>(data, "data", "kind");
  const int n = required<int>(data, "data", "n");
  if (n < 1) throw ConfigError("data.n must be >= 1");
  const auto stream = field<std::uint64_t>(data, "data", "stream", 0);
  const SyntheticTaskSpec spec = SyntheticTaskSpec::from_json(data);

  std::vector<PairedExample> xs;
  if (kind == "class") {
    std::vector<int> classes;
    if (data.contains("classes")) classes = field<std::vector<int>>(data, "data", "classes", {});
    else classes.push_back(required<int>(data, "data", "class"));
    for (int c : classes) {
      auto part = generate_class_pairs(spec, c, n, stream);
      xs.insert(xs.end(), part.begin(), part.end());
    }
  } else if (kind == "typographic") {
    if (!data.contains("attack")) throw ConfigError("missing required field data.attack");
    const json at = data.at("attack");
    AttackSpec attack;
    attack.target = required<int>(at, "data.attack", "target");
    attack.amplitude = field<double>(at, "data.attack", "amplitude", attack.amplitude);
    attack.placement = parse_placement(field<std::string>(at, "data.attack", "placement", "border"));
    attack.scattered_count = field<int>(at, "data.attack", "scattered_count", attack.scattered_count);
    xs = generate_typographic_pairs(spec, attack, n, stream);
  } else {
    throw ConfigError("data.kind must be 'class' or 'typographic', got '" + kind + "'");
  }

  RunManifest man{"gen", cfg, {{"data", spec.seed}, {"stream", stream}}, {a.config}, {a.out}};
  if (!a.model.empty()) {
    const Model m = load_model(a.model);
    // Typographic pairs are filtered on the original image.
    if (kind == "typographic") {
      std::vector<PairedExample> kept;
      for (auto& x : xs)
        if (argmax(forward_with_trace(m, original_image(x)).logits) == x.label) kept.push_back(x);
      xs = std::move(kept);
    } else {
      xs = filter_correct(m, xs);
    }
    man.inputs.push_back(a.model);
  }
  save_pairs(a.out, xs, spec.digest(),
             {{"manifest_digest", man.digest()}, {"config", cfg}, {"dataset_digest", dataset_digest(xs)}});
  man.write(a.out + "/manifest.json", seconds_since(t0));
  std::printf("%zu pairs -> %s (dataset %s)\n", xs.size(), a.out.c_str(), dataset_digest(xs).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// init-model

struct InitArgs {
  std::string config, kind, out;
  std::uint64_t seed = 0;
};

int cmd_init_model(const InitArgs& a) {
  const auto t0 = Clock::now();
  const json cfg = load_config(a.config);
  std::optional<PlantedModel> planted;
  if (a.kind == "planted-single") planted.emplace(planted_single_head_model(a.seed));
  else if (a.kind == "planted-class") planted.emplace(planted_class_model(a.seed));
  else if (a.kind == "planted-typographic") planted.emplace(planted_typographic_model(a.seed));
  else if (a.kind != "random") throw ArgumentError("unknown model kind '" + a.kind + "'");

  RunManifest man{"init-model", cfg, {{"model", a.seed}}, {a.config}, {a.out}};
  ensure_parent(a.out);
  if (planted) {
    save_model(planted->model, a.out);
    std::printf("%s model -> %s (digest %s)\n", a.kind.c_str(), a.out.c_str(),
                model_digest(planted->model).c_str());
  } else {
    const ModelConfig c = ModelConfig::from_json(section(cfg, "model"));
    const Model m(c, WeightSet::random(c, a.seed));
    save_model(m, a.out);
    std::printf("random model -> %s (digest %s)\n", a.out.c_str(), model_digest(m).c_str());
  }
  man.write(a.out, seconds_since(t0));
  return 0;
}

// ---------------------------------------------------------------------------
// discover

struct DiscoverArgs {
  std::string config, model, pairs, method = "vicd", metric = "logitdiff", mode = "live", out;
  double threshold = 1e-3;
  int steps = 10, max_visited = 900, edges = -1, target = -1;
  std::uint64_t seed = 0;
  bool attack_target = false;
  bool steps_given = false, threshold_given = false;
};

int cmd_discover(DiscoverArgs a, const CLI::App& sub) {
  const auto t0 = Clock::now();
  const json cfg = load_config(a.config);
  const json dj = section(cfg, "discovery");
  // Config values fill in whatever was not given on the command line.
  if (!sub.count("--method")) a.method = field<std::string>(dj, "discovery", "method", a.method);
  if (!sub.count("--metric")) a.metric = field<std::string>(dj, "discovery", "metric", a.metric);
  if (!sub.count("--mode")) a.mode = field<std::string>(dj, "discovery", "mode", a.mode);
  if (!sub.count("--threshold") && dj.contains("threshold")) {
    a.threshold = field<double>(dj, "discovery", "threshold", a.threshold);
    a.threshold_given = true;
  }
  if (!sub.count("--steps") && dj.contains("steps")) {
    a.steps = field<int>(dj, "discovery", "steps", a.steps);
    a.steps_given = true;
  }
  if (!sub.count("--max-visited")) a.max_visited = field<int>(dj, "discovery", "max_visited", a.max_visited);
  if (!sub.count("--seed")) a.seed = field<std::uint64_t>(dj, "discovery", "seed", a.seed);
  if (!sub.count("--edges")) a.edges = field<int>(dj, "discovery", "edges", a.edges);
  if (!sub.count("--target")) a.target = field<int>(dj, "discovery", "target", a.target);

  const Method method = parse_method(a.method);
  if (a.steps_given && method != Method::eapig)
    throw ArgumentError("--steps is only valid with --method eapig");
  if (method == Method::random && a.edges < 0)
    throw ArgumentError("--method random needs --edges");
  if (method != Method::vicd && a.max_visited != 900 && sub.count("--max-visited"))
    throw ArgumentError("--max-visited is only valid with --method vicd");

  DiscoveryConfig dc;
  dc.threshold = a.threshold;
  dc.metric = MetricSpec::parse(a.metric);
  if (a.target >= 0) dc.metric.target = a.target;
  dc.max_visited_nodes = a.max_visited;
  dc.seed = a.seed;
  dc.mode = parse_patch_mode(a.mode);
  dc.validate();

  const Model m = load_model(a.model);
  const Graph& g = m.graph();
  const auto pairs = load_pairs_for(m, a.pairs);
  if (pairs.empty()) throw ArgumentError("no pairs in " + a.pairs);
  const RunCache train = cache_runs(m, pairs, a.attack_target);

  json effective = cfg;
  effective["discovery"] = dc.to_json();
  effective["discovery"]["method"] = a.method;
  if (method == Method::eapig) effective["discovery"]["steps"] = a.steps;
  if (a.edges >= 0) effective["discovery"]["edges"] = a.edges;
  effective["discovery"]["attack_target"] = a.attack_target;

  const std::string log_path = strip_json_ext(a.out) + ".decisions.jsonl";
  RunManifest man{"discover", effective, {{"discovery", a.seed}}, {a.model, a.pairs}, {a.out, log_path}};

  CircuitFile file;
  std::string log;
  json extra = json::object();
  if (method == Method::vicd) {
    const DiscoveryResult r = vicd_discover(m, train, dc);
    file.mask = r.mask;
    log = decision_log_jsonl(g, r);
    extra = {{"patched_forwards", r.patched_forwards}, {"visited_receivers", r.visited_receivers}};
  } else if (method == Method::random) {
    file.mask = mask_random(g, static_cast<std::size_t>(a.edges), a.seed);
  } else {
    const AttributionScores s = method == Method::eap ? eap_scores(m, train, dc.metric)
                                                      : eapig_scores(m, train, dc.metric, a.steps);
    file.mask = a.edges >= 0 ? mask_from_scores(g, s, static_cast<std::size_t>(a.edges))
                             : mask_from_threshold(g, s, a.threshold);
    for (std::size_t e = 0; e < s.score.size(); ++e)
      log += json{{"edge", g.edge_name(static_cast<int>(e))},
                  {"score", s.score[e]},
                  {"decision", file.mask.contains(e) ? "kept" : "pruned"}}
                 .dump() +
             "\n";
  }
  file.model_digest = model_digest(m);
  file.metadata = {{"method", method == Method::eapig ? "eapig" + std::to_string(a.steps) : a.method},
                   {"config", effective},
                   {"manifest_digest", man.digest()},
                   {"pairs", pairs.size()},
                   {"stats", extra}};
  if (!pairs.empty() && !a.attack_target) file.metadata["class"] = pairs.front().label;
  ensure_parent(a.out);
  save_circuit(a.out, g, file);
  write_file_atomic(log_path, log);
  man.write(a.out, seconds_since(t0));
  std::printf("%zu of %zu edges kept -> %s\n", file.mask.count(), g.edges().size(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval / sweep

struct EvalArgs {
  std::string model, circuit, pairs, mode = "live", out;
  bool attack_target = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto t0 = Clock::now();
  const Model m = load_model(a.model);
  const CircuitFile c = load_circuit(a.circuit, m.graph());
  if (!c.model_digest.empty() && c.model_digest != model_digest(m))
    throw MismatchError("circuit was mined on model " + c.model_digest + ", not " + model_digest(m));
  const auto pairs = load_pairs_for(m, a.pairs);
  const RunCache eval = cache_runs(m, pairs, a.attack_target);
  const PatchMode mode = parse_patch_mode(a.mode);
  const double acc = patched_accuracy(m, eval, c.mask, mode);
  const double gap = faithfulness_gap(m, c.mask, eval, mode);
  const std::size_t total = m.graph().edges().size();
  SweepPoint p{c.metadata.value("method", std::string("circuit")), double(c.mask.count()) / double(total),
               c.mask.count(), acc, c.metadata.contains("config")
                                        ? c.metadata["config"]["discovery"].value("seed", std::uint64_t{0})
                                        : 0};
  RunManifest man{"eval", {{"mode", a.mode}}, json::object(), {a.model, a.circuit, a.pairs}, {a.out}};
  ensure_parent(a.out);
  write_file_atomic(a.out, sweep_csv_header() + sweep_csv_rows({p}));
  man.write(a.out, seconds_since(t0));
  std::printf("accuracy %.4f (gap %.4f) with %zu/%zu edges\n", acc, gap, c.mask.count(), total);
  return 0;
}

struct SweepArgs {
  std::string config, model, pairs, eval_pairs, methods = "vicd,eap,eapig,random", grid, metric = "logitdiff",
                                                  mode = "live", out;
  int steps = 10;
  std::uint64_t seed = 0;
  bool attack_target = false;
};

int cmd_sweep(SweepArgs a, const CLI::App& sub) {
  const auto t0 = Clock::now();
  const json cfg = load_config(a.config);
  const json dj = section(cfg, "discovery");
  SweepOptions o;
  o.grid = a.grid.empty() ? field<std::vector<double>>(dj, "discovery", "grid", default_grid())
                          : parse_list(a.grid);
  if (!sub.count("--steps")) a.steps = field<int>(dj, "discovery", "steps", a.steps);
  if (!sub.count("--seed")) a.seed = field<std::uint64_t>(dj, "discovery", "seed", a.seed);
  if (!sub.count("--metric")) a.metric = field<std::string>(dj, "discovery", "metric", a.metric);
  if (!sub.count("--methods") && dj.contains("methods"))
    a.methods = field<std::string>(dj, "discovery", "methods", a.methods);
  o.eapig_steps = a.steps;
  o.seed = a.seed;
  o.discovery.metric = MetricSpec::parse(a.metric);
  o.discovery.mode = parse_patch_mode(a.mode);
  o.discovery.seed = a.seed;
  o.discovery.max_visited_nodes = field<int>(dj, "discovery", "max_visited", 900);

  const Model m = load_model(a.model);
  const RunCache train = cache_runs(m, load_pairs_for(m, a.pairs), a.attack_target);
  const RunCache eval =
      a.eval_pairs.empty() ? train : cache_runs(m, load_pairs_for(m, a.eval_pairs), a.attack_target);
  std::string csv = sweep_csv_header();
  for (const auto& name : split(a.methods))
    csv += sweep_csv_rows(sweep_faithfulness(parse_method(name), m, train, eval, o));
  RunManifest man{"sweep", cfg, {{"seed", a.seed}}, {a.model, a.pairs, a.eval_pairs}, {a.out}};
  ensure_parent(a.out);
  write_file_atomic(a.out, csv);
  man.write(a.out, seconds_since(t0));
  std::printf("sweep -> %s\n", a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

std::vector<std::string> expand_glob(const std::string& pattern) {
  const fs::path p(pattern);
  const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  std::string re;
  for (char ch : p.filename().string()) {
    if (ch == '*') re += ".*";
    else if (ch == '?') re += ".";
    else if (std::string(".+()[]{}^$|\\").find(ch) != std::string::npos) re += std::string("\\") + ch;
    else re += ch;
  }
  const std::regex rx(re);
  std::vector<std::string> out;
  if (fs::is_directory(dir))
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), rx)) {
        const std::string name = entry.path().filename().string();
        // Run sidecars share the .json suffix.
        if (name.size() > 9 && name.compare(name.size() - 9, 9, ".run.json") == 0) continue;
        out.push_back(entry.path().string());
      }
  std::sort(out.begin(), out.end());
  return out;
}

struct AnalyzeArgs {
  std::string config, model, circuits, out, similarity, group_by = "class";
  bool all_edges = false;
};

int cmd_analyze(AnalyzeArgs a, const CLI::App& sub) {
  const auto t0 = Clock::now();
  const json cfg = load_config(a.config);
  const json aj = section(cfg, "analysis");
  if (!sub.count("--all-edges")) a.all_edges = field<bool>(aj, "analysis", "all_edges", a.all_edges);
  if (!sub.count("--group-by")) a.group_by = field<std::string>(aj, "analysis", "group_by", a.group_by);

  const Model m = load_model(a.model);
  const Graph& g = m.graph();
  const auto files = expand_glob(a.circuits);
  if (files.empty()) throw ArgumentError("no circuit files match '" + a.circuits + "'");
  std::map<std::string, CircuitEnsemble> groups;
  for (const auto& f : files) {
    const CircuitFile c = load_circuit(f, g);
    std::string key = "all";
    if (c.metadata.contains(a.group_by)) {
      const auto& v = c.metadata.at(a.group_by);
      key = v.is_string() ? v.get<std::string>() : v.dump();
    }
    auto& ens = groups[key];
    ens.masks.push_back(c.mask);
    ens.provenance["files"].push_back(fs::path(f).filename().string());
  }
  RunManifest man{"analyze", cfg, json::object(), {a.model, a.circuits}, {a.out}};
  json report = {{"groups", json::object()},
                 {"stability_universe", a.all_edges ? "all_edges" : "union"},
                 {"manifest_digest", man.digest()}};
  for (auto& [key, ens] : groups) {
    ens.provenance[a.group_by] = key;
    report["groups"][key] = analysis_report(g, ens, a.all_edges);
  }
  ensure_parent(a.out);
  write_file_atomic(a.out, report.dump(2) + "\n");
  const std::string sim = a.similarity.empty() ? strip_json_ext(a.out) + ".similarity.csv" : a.similarity;
  write_file_atomic(sim, similarity_csv(groups));
  man.outputs.push_back(sim);
  man.write(a.out, seconds_since(t0));
  std::printf("%zu circuits in %zu groups -> %s\n", files.size(), groups.size(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// steer

struct SteerArgs {
  std::string config, model, circuit, pairs_attacked, pairs_clean, regime = "pre_normed:mean",
                                                                   alpha_grid, layer_grid, out;
  double epsilon = 1e-8, reduction = 0.9;
  int max_pairs = 160;
  bool sender_global = false;
};

int cmd_steer(SteerArgs a, const CLI::App& sub) {
  const auto t0 = Clock::now();
  const json cfg = load_config(a.config);
  const json sj = section(cfg, "steering");
  if (!sub.count("--regime")) a.regime = field<std::string>(sj, "steering", "regime", a.regime);
  if (!sub.count("--epsilon")) a.epsilon = field<double>(sj, "steering", "epsilon", a.epsilon);
  if (!sub.count("--max-pairs")) a.max_pairs = field<int>(sj, "steering", "max_pairs", a.max_pairs);
  if (!sub.count("--sender-global"))
    a.sender_global = field<bool>(sj, "steering", "sender_global", a.sender_global);
  if (!sub.count("--target-reduction"))
    a.reduction = field<double>(sj, "steering", "target_reduction", a.reduction);
  std::vector<double> alphas = a.alpha_grid.empty()
                                   ? field<std::vector<double>>(sj, "steering", "alpha_grid", {0, 0.25, 0.5, 1})
                                   : parse_list(a.alpha_grid);
  std::vector<int> layers;
  if (a.layer_grid.empty()) {
    layers = field<std::vector<int>>(sj, "steering", "layer_grid", {});
  } else {
    for (double l : parse_list(a.layer_grid)) layers.push_back(static_cast<int>(l));
  }
  for (double al : alphas)
    if (!(al >= 0)) throw ArgumentError("alpha grid values must be >= 0");
  const SteeringRegime regime = SteeringRegime::parse(a.regime);

  const Model m = load_model(a.model);
  const Graph& g = m.graph();
  const CircuitFile c = load_circuit(a.circuit, g);
  if (!c.model_digest.empty() && c.model_digest != model_digest(m))
    throw MismatchError("circuit was mined on model " + c.model_digest + ", not " + model_digest(m));
  const auto attacked = load_pairs_for(m, a.pairs_attacked);
  const auto clean = load_pairs_for(m, a.pairs_clean);
  if (attacked.empty() || clean.empty()) throw ArgumentError("steer needs nonempty pair sets");
  const std::size_t n_dir = std::min<std::size_t>(attacked.size(), std::size_t(std::max(1, a.max_pairs)));
  const std::vector<PairedExample> estimation(attacked.begin(), attacked.begin() + n_dir);
  const std::string attack_id = "target" + std::to_string(attacked.front().attack_target);

  json effective = cfg;
  effective["steering"] = {{"regime", regime.name()},       {"epsilon", a.epsilon},
                           {"alpha_grid", alphas},          {"layer_grid", layers},
                           {"max_pairs", a.max_pairs},      {"sender_global", a.sender_global},
                           {"target_reduction", a.reduction}};
  fs::create_directories(a.out);
  const std::string dir_path = a.out + "/directions.cfw", csv_path = a.out + "/steer.csv",
                    summary_path = a.out + "/summary.json";
  RunManifest man{"steer", effective, json::object(), {a.model, a.circuit, a.pairs_attacked, a.pairs_clean},
                  {dir_path, csv_path, summary_path}};

  SteeringDirections d =
      compute_directions(m, estimation, circuit_senders(g, c.mask), regime, a.epsilon, attack_id);
  Archive da = directions_to_archive(g, d);
  da.metadata["manifest_digest"] = man.digest();
  write_archive(dir_path, da);

  const auto rows = attack_metrics(m, clean, attacked, d, c.mask, alphas, layers, a.sender_global);
  write_file_atomic(csv_path, attack_csv_header() + attack_csv_rows(rows));

  SteeringPolicy base{c.mask, 0.0, std::nullopt, a.sender_global};
  double base_asr = 0;
  for (const auto& x : attacked)
    base_asr += argmax(steered_forward(m, attacked_image(x), d, base)) == x.attack_target;
  base_asr /= double(attacked.size());
  json summary = {{"base_asr_top1", base_asr},
                  {"target_reduction", a.reduction},
                  {"manifest_digest", man.digest()},
                  {"directions", {{"senders", d.by_sender.size()}, {"skipped_rows", d.skipped_rows}}}};
  if (const auto pick = select_alpha(rows, base_asr, a.reduction)) {
    summary["selected"] = {{"alpha", pick->alpha},
                           {"max_layer", pick->max_layer},
                           {"asr_top1", pick->asr_top1},
                           {"retention", pick->retention}};
  } else {
    summary["selected"] = nullptr;
  }
  write_file_atomic(summary_path, summary.dump(2) + "\n");
  man.write(a.out + "/steer", seconds_since(t0));
  std::printf("%zu rows -> %s\n", rows.size(), csv_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Circuit discovery and steering for small vision transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", VITCD_VERSION);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a paired dataset from a config");
  g->add_option("--config", gen.config, "Config file")->required();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--model", gen.model, "Keep only pairs this model classifies correctly");

  InitArgs init;
  auto* im = app.add_subcommand("init-model", "Write a planted or random model archive");
  im->add_option("--kind", init.kind, "planted-single | planted-class | planted-typographic | random")
      ->required();
  im->add_option("--seed", init.seed);
  im->add_option("--config", init.config, "Config file (model section, for random)");
  im->add_option("--out", init.out)->required();

  DiscoverArgs disc;
  auto* d = app.add_subcommand("discover", "Mine a circuit");
  d->add_option("--config", disc.config);
  d->add_option("--model", disc.model)->required();
  d->add_option("--pairs", disc.pairs)->required();
  d->add_option("--method", disc.method, "vicd | eap | eapig | random");
  d->add_option("--threshold", disc.threshold);
  d->add_option("--steps", disc.steps, "Integration steps (eapig only)");
  d->add_option("--metric", disc.metric, "logitdiff | kl");
  d->add_option("--target", disc.target, "Fixed target class for the logit difference");
  d->add_option("--max-visited", disc.max_visited);
  d->add_option("--edges", disc.edges, "Circuit size for eap, eapig and random");
  d->add_option("--mode", disc.mode, "live | cached");
  d->add_option("--seed", disc.seed);
  d->add_flag("--attack-target", disc.attack_target, "Use each pair's attack target as its label");
  d->add_option("--out", disc.out)->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Faithfulness of a circuit");
  e->add_option("--model", ev.model)->required();
  e->add_option("--circuit", ev.circuit)->required();
  e->add_option("--pairs", ev.pairs)->required();
  e->add_option("--mode", ev.mode);
  e->add_flag("--attack-target", ev.attack_target);
  e->add_option("--out", ev.out)->required();

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Faithfulness against sparsity for several methods");
  s->add_option("--config", sw.config);
  s->add_option("--model", sw.model)->required();
  s->add_option("--pairs", sw.pairs)->required();
  s->add_option("--eval-pairs", sw.eval_pairs);
  s->add_option("--methods", sw.methods);
  s->add_option("--grid", sw.grid, "Comma-separated edge fractions");
  s->add_option("--steps", sw.steps);
  s->add_option("--metric", sw.metric);
  s->add_option("--mode", sw.mode);
  s->add_option("--seed", sw.seed);
  s->add_flag("--attack-target", sw.attack_target);
  s->add_option("--out", sw.out)->required();

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "Stability and similarity of circuit ensembles");
  a->add_option("--config", an.config);
  a->add_option("--model", an.model)->required();
  a->add_option("--circuits", an.circuits, "Glob over circuit files")->required();
  a->add_option("--group-by", an.group_by, "Circuit metadata key that defines ensembles");
  a->add_flag("--all-edges", an.all_edges, "Count never-included edges in the stability universe");
  a->add_option("--similarity", an.similarity, "Similarity CSV path");
  a->add_option("--out", an.out)->required();

  SteerArgs st;
  auto* t = app.add_subcommand("steer", "Directional ablation sweep along a circuit");
  t->add_option("--config", st.config);
  t->add_option("--model", st.model)->required();
  t->add_option("--circuit", st.circuit)->required();
  t->add_option("--pairs-attacked", st.pairs_attacked)->required();
  t->add_option("--pairs-clean", st.pairs_clean)->required();
  t->add_option("--regime", st.regime, "pre_normed|post_normed : mean|medoid");
  t->add_option("--alpha-grid", st.alpha_grid);
  t->add_option("--layer-grid", st.layer_grid);
  t->add_option("--epsilon", st.epsilon);
  t->add_option("--max-pairs", st.max_pairs, "Pairs used to estimate directions");
  t->add_option("--target-reduction", st.reduction, "Relative ASR reduction the alpha selector aims for");
  t->add_flag("--sender-global", st.sender_global);
  t->add_option("--out", st.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*im) return cmd_init_model(init);
    if (*d) {
      disc.steps_given = d->count("--steps") > 0;
      disc.threshold_given = d->count("--threshold") > 0;
      return cmd_discover(disc, *d);
    }
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_sweep(sw, *s);
    if (*a) return cmd_analyze(an, *a);
    if (*t) return cmd_steer(st, *t);
  } catch (const MismatchError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 4;
  } catch (const FormatError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 4;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric error: %s\n", err.what());
    return 3;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return 2;
  } catch (const ArgumentError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return 2;
}
