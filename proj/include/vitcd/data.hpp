#pragma once

// Paired clean/corrupted datasets: a synthetic planted-signal generator and a
// loader for externally prepared pairs.
//
// Raw patch vectors are laid out as [object channel | text channel], each
// num_classes wide, followed by optional extra background dimensions. Class c
// is planted along object dimension c; a typographic attack for class t
// writes along text dimension t.

#include "vitcd/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace vitcd {

class Model;

struct PairedExample {
  Field clean;      // P x input_dim, pre-embedding
  Field corrupted;  // same shape
  int label = 0;
  int attack_target = -1;       // -1 when not an attack pair
  std::vector<int> foreground;  // patch indices (1-based grid positions)
};

inline const Field& attacked_image(const PairedExample& x) { return x.clean; }
inline const Field& original_image(const PairedExample& x) { return x.corrupted; }

struct SyntheticTaskSpec {
  int num_classes = 4;
  int grid_side = 4;     // grid_side^2 image patches plus the class token
  int extra_dims = 0;    // background-only raw dimensions
  std::vector<Vector> patterns;  // per-class foreground pattern, input_dim wide
  double background_mean = 0.0;
  double background_std = 1.0;
  double foreground_fraction = 0.25;
  double noise_scale = 0.25;  // extra jitter on planted patches
  std::uint64_t seed = 0;

  int patch_count() const { return grid_side * grid_side + 1; }
  int input_dim() const { return 2 * num_classes + extra_dims; }

  /// Default spec: pattern c = amplitude * e_c in the object channel.
  static SyntheticTaskSpec standard(int num_classes, double amplitude, std::uint64_t seed);

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static SyntheticTaskSpec from_json(const nlohmann::json& j);
  std::string digest() const;
};

enum class Placement { border, scattered, block };
std::string to_string(Placement p);
Placement parse_placement(const std::string& s);

struct AttackSpec {
  int target = 0;          // class whose text is written
  double amplitude = 3.0;  // strength along the target's text dimension
  Placement placement = Placement::border;
  int scattered_count = 4;  // patches used by Placement::scattered

  Vector pattern(const SyntheticTaskSpec& spec) const;
};

/// `stream` separates independent draws from the same spec.
std::vector<PairedExample> generate_class_pairs(const SyntheticTaskSpec& spec, int cls, int n,
                                                std::uint64_t stream = 0);

/// Labels drawn uniformly from classes other than `attack.target`. The attacked
/// image is stored as `clean` and the original as `corrupted`, which is the
/// orientation attack circuits are mined in.
std::vector<PairedExample> generate_typographic_pairs(const SyntheticTaskSpec& spec,
                                                      const AttackSpec& attack, int n,
                                                      std::uint64_t stream = 0);

/// Patches an attack writes to for a given foreground; throws ArgumentError if
/// the placement would cover every foreground patch.
std::vector<int> attack_patches(const SyntheticTaskSpec& spec, const AttackSpec& attack,
                                const std::vector<int>& foreground, std::uint64_t seed);

/// Keeps examples whose clean input is top-1 correct. An empty result only warns.
std::vector<PairedExample> filter_correct(const Model& model, const std::vector<PairedExample>& xs);

struct DatasetManifest {
  std::string spec_digest;
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<int> attack_targets;
  std::vector<std::vector<int>> foreground;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Writes `dir/pairs.cfw` and `dir/manifest.json`.
void save_pairs(const std::string& dir, const std::vector<PairedExample>& xs,
                const std::string& spec_digest, const nlohmann::json& extra = {});

/// Aligns halves by id and checks labels and shapes; throws FormatError.
std::vector<PairedExample> load_pairs(const std::string& dir,
                                      std::optional<int> num_classes = std::nullopt,
                                      std::optional<std::pair<int, int>> shape = std::nullopt);

/// Digest over the serialized pairs, for reproducibility checks.
std::string dataset_digest(const std::vector<PairedExample>& xs);

/// Least-squares linear probe on mean-pooled patches: fit on `train`, score on
/// `test`. Uses the clean half when `use_clean`, else the corrupted half.
double linear_probe_accuracy(const std::vector<PairedExample>& train,
                             const std::vector<PairedExample>& test, int num_classes,
                             bool use_clean);

}  // namespace vitcd
