#pragma once

#include "unveil/model.hpp"
#include "unveil/synthworld.hpp"
#include "unveil/train.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace unveil::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalPlan {
  std::vector<std::string> splits = {"test", "dev", "heldout_category", "heldout_dataset"};
  std::vector<double> iou_grid = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::string ablation_split = "test";
};

struct JudgeEndpoint {
  std::string kind = "reference";  // reference | http
  std::string url;
  int timeout_ms = 5000;
  bool fallback_to_reference = true;
};

struct GenerationEndpoint {
  std::string kind = "mock";  // mock | http
  std::string url;
  int timeout_ms = 5000;
  int retries = 2;
  int max_in_flight = 4;
};

struct BuildOptions {
  double min_iou = 0.99;
};

struct RunConfig {
  world::WorldConfig world = world::WorldConfig::defaults();
  world::SplitPlan split;
  int dataset_size = 1250;
  model::ModelConfig model;
  train::SftConfig sft;
  train::AarConfig aar;
  EvalPlan eval;
  JudgeEndpoint judge;
  GenerationEndpoint generation;
  BuildOptions build;
  std::string out = "runs/default";
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Sets `key` (dot separated) in `doc`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Resolution order: defaults, then the file, then `--set` overrides, then `--out` and
/// `--seed`. Keys not in the schema are errors. The global seed supplies
/// model.init_seed (seed + 1), sft.seed and aar.seed unless those are given explicitly.
RunConfig resolve(const std::optional<std::string>& config_path, const std::vector<std::string>& overrides,
                  const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed);

RunConfig from_json(const nlohmann::json& doc);

}  // namespace unveil::config
