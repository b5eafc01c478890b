#pragma once

#include "unveil/core.hpp"
#include "unveil/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace unveil::world {

struct CategorySpec {
  std::string name;
  std::string family;
  /// Dataset families this category occurs in; empty means all of them.
  std::vector<std::string> datasets;
};

/// A dataset family stands in for one imaging source. It changes the noise level
/// and adds a constant texture offset on the last feature channel of normal patches.
struct DatasetSpec {
  std::string name;
  double noise_multiplier = 1.0;
  double background_offset = 0.0;
};

struct WorldConfig {
  int height_patches = 8;
  int width_patches = 8;
  int feature_dim = 8;
  std::vector<CategorySpec> categories;
  std::vector<DatasetSpec> datasets;
  double marker_strength = 2.0;
  double signature_strength = 2.0;
  double noise_scale = 0.5;
  int min_box = 2;
  int max_box = 4;
  /// Place a second rectangle carrying another category's signature but no abnormality marker.
  bool decoy = true;
  /// Fraction of samples whose query carries the ground-truth box as a hint.
  double hint_fraction = 0.1;
  /// Marker multiplier on hinted samples; 0 makes the hint the only localization cue.
  double hinted_marker_scale = 0.0;
  std::vector<std::vector<std::string>> query_templates;
  std::uint64_t seed = 7;

  static WorldConfig defaults();
  void validate() const;
  int category_count() const { return static_cast<int>(categories.size()); }
  int dataset_index(const std::string& name) const;
  bool has_category_family(const std::string& family) const;
  /// One row per category: the mean vector added to abnormal patches.
  Matrix signatures() const;
  Vocab make_vocab() const;

  nlohmann::json to_json() const;
  static WorldConfig from_json(const nlohmann::json& j);
};

struct SplitPlan {
  /// Entries are `FAMILY` (global) or `FAMILY@DATASET` (excluded only within that dataset family).
  std::vector<std::string> heldout_category_families;
  std::vector<std::string> heldout_dataset_families;
  double train_fraction = 0.8;
  /// Share of the regular (non held-out) test samples additionally tagged `dev`.
  double dev_fraction = 0.5;
  std::uint64_t seed = 11;

  void validate(const WorldConfig& cfg) const;
  nlohmann::json to_json() const;
  static SplitPlan from_json(const nlohmann::json& j);
};

inline constexpr const char* kTrain = "train";
inline constexpr const char* kTest = "test";
inline constexpr const char* kDev = "dev";
inline constexpr const char* kHeldoutCategory = "heldout_category";
inline constexpr const char* kHeldoutDataset = "heldout_dataset";

std::uint64_t sample_seed(std::uint64_t world_seed, std::uint64_t index);

/// Builds one sample from its per-sample seed; a pure function of (cfg, seed).
Sample generate_sample(const WorldConfig& cfg, const Vocab& vocab, std::uint64_t seed, const std::string& id);

std::vector<Sample> generate_dataset(const WorldConfig& cfg, int n);

std::vector<Sample> apply_split(std::vector<Sample> samples, const SplitPlan& plan, const WorldConfig& cfg);

/// Box with iou(result, gt) within 0.01 of target, found by bisection on a horizontal
/// shift of gt inside [0,width]x[0,height]. Throws std::domain_error when unreachable.
BBox make_iou_hint(const BBox& gt, double target_iou, int width, int height);

/// Integer-shifted box whose iou with gt is closest to target; used when hints are tokenized.
BBox make_quantized_iou_hint(const BBox& gt, double target_iou, int width, int height);

std::string category_family_of(const WorldConfig& cfg, const Sample& s);
std::string dataset_family_of(const WorldConfig& cfg, const Sample& s);

}  // namespace unveil::world
