#pragma once

#include "unveil/core.hpp"
#include "unveil/model.hpp"
#include "unveil/synthworld.hpp"
#include "unveil/vocab.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace unveil::eval {

/// Whole-token, case-insensitive occurrence of the ground-truth category name in
/// the response text.
bool contains_category(const std::string& response_text, const std::string& category_name);

/// Fraction of responses whose text names the ground-truth category.
double acc_metric(const std::vector<std::string>& response_texts, const std::vector<Sample>& samples, const Vocab& vocab);
double acc_metric(const std::vector<Response>& responses, const std::vector<Sample>& samples, const Vocab& vocab);

/// Mean localization reward; a missing bbox counts as 0.
double mean_iou_metric(const std::vector<Response>& responses, const std::vector<Sample>& samples);

/// Greedy predictions for `samples`.
std::vector<Response> predict(const model::PolicyModel& model, const std::vector<Sample>& samples);

struct SplitMetrics {
  double acc = 0.0;
  double mean_iou = 0.0;
  int n = 0;
  std::map<std::string, double> per_category_acc;
  std::map<std::string, int> per_category_n;
};

SplitMetrics evaluate_split(const model::PolicyModel& model, const std::vector<Sample>& samples);

struct CurveRow {
  double target_iou = 0.0;
  double acc = 0.0;
  double mean_hint_iou = 0.0;  // realized iou of the tokenized hints
  int n = 0;
  int skipped = 0;             // samples whose target was unreachable
};

/// Bbox-injection analysis: for each target iou, replace the query hint by a box with
/// that iou to the ground truth, decode greedily and record ACC. Rows sorted by target.
std::vector<CurveRow> run_injection_ablation(const model::PolicyModel& model, const std::vector<Sample>& samples,
                                             std::vector<double> iou_grid);

/// Spearman rank correlation with average ranks for ties; NaN when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct EvalReport {
  std::map<std::string, SplitMetrics> splits;  // keyed "<method>/<split>"
  std::vector<CurveRow> curve;
  nlohmann::json metadata;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  std::string summary_table() const;
};

std::string curve_csv(const std::vector<CurveRow>& rows);

/// Models produced by one training run of the generalization suite.
struct TrainedModels {
  model::PolicyModel untrained;
  model::PolicyModel sft;
  model::PolicyModel aar;
  std::set<std::string> trained_ids;  // every sample id that entered a training batch
};

using TrainFn = std::function<TrainedModels(const std::vector<Sample>& split_samples, const std::string& label)>;

struct PlanVariant {
  std::string label;
  world::SplitPlan plan;
};

struct GeneralizationRow {
  std::string variant;
  std::string slice;
  std::string method;
  double acc = 0.0;
  double mean_iou = 0.0;
  int n = 0;
};

struct GeneralizationReport {
  std::vector<GeneralizationRow> rows;
  std::map<std::string, int> leaked;  // per variant: held-out samples found among trained ids

  const GeneralizationRow& find(const std::string& variant, const std::string& slice, const std::string& method) const;
  std::string to_csv() const;
};

/// Trains once per plan variant and evaluates {aar, sft, untrained} on each excluded slice.
GeneralizationReport run_generalization_suite(const TrainFn& train_fn, const std::vector<Sample>& samples,
                                              const world::WorldConfig& cfg, const std::vector<PlanVariant>& variants);

}  // namespace unveil::eval
