#pragma once

#include "unveil/core.hpp"
#include "unveil/vocab.hpp"

#include <optional>
#include <vector>

namespace unveil::rewards {

/// Raw reward channels for one candidate; the normalized fields and the combined
/// reward are filled in by normalize_and_aggregate.
struct RewardBreakdown {
  double r_llm = 0.0;
  double r_loc = 0.0;
  double r_att = 0.0;
  std::optional<double> r_loc_norm;
  std::optional<double> r_att_norm;
  std::optional<double> r_combined;

  bool normalized() const { return r_combined.has_value(); }
};

/// IoU of the predicted box with the ground truth; a missing prediction scores 0.
double localization_reward(const std::optional<BBox>& pred, const BBox& gt);

/// Attention mass that the selected token rows place on abnormal patches.
/// Each row of `logits` (pre-softmax, one column per patch) is normalized over all
/// `total_patches` columns, then the probabilities on `abnormal_patches` are summed
/// and accumulated over rows. Result lies in [0, rows].
double vision_relevance_reward(const Matrix& logits, const std::vector<int>& abnormal_patches, int total_patches);

/// Per-query normalization: each candidate's r_loc and r_att are divided by the
/// group maximum of that channel (0 when the maximum is 0), then
/// r_combined = r_llm + r_loc_norm + r_att_norm.
std::vector<RewardBreakdown> normalize_and_aggregate(std::vector<RewardBreakdown> group);

/// Channel switches for ablations; a disabled channel contributes 0 to r_combined.
struct ChannelMask {
  bool llm = true;
  bool loc = true;
  bool att = true;
};
std::vector<RewardBreakdown> normalize_and_aggregate(std::vector<RewardBreakdown> group, const ChannelMask& mask);

struct BellmanStep {
  double delta = 0.0;
  double new_q = 0.0;
};

/// One tabular Q-learning step: delta = alpha * (r + gamma * max_next_q - q).
BellmanStep bellman_q_update(double q, double r, double gamma, double max_next_q, double alpha);

}  // namespace unveil::rewards
