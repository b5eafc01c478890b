#include "unveil/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace unveil::rewards {

double localization_reward(const std::optional<BBox>& pred, const BBox& gt) {
  if (!pred) return 0.0;
  return iou(*pred, gt);
}

double vision_relevance_reward(const Matrix& logits, const std::vector<int>& abnormal_patches, int total_patches) {
  if (logits.rows() == 0) return 0.0;
  if (logits.cols() != total_patches) throw std::invalid_argument("vrr: logit columns must equal the patch count");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    double mass = 0.0;
    for (int j : abnormal_patches) {
      if (j < 0 || j >= total_patches) throw std::out_of_range("vrr: patch index out of range");
      mass += e(j);
    }
    total += mass / z;
  }
  return total;
}

std::vector<RewardBreakdown> normalize_and_aggregate(std::vector<RewardBreakdown> group) {
  return normalize_and_aggregate(std::move(group), ChannelMask{});
}

std::vector<RewardBreakdown> normalize_and_aggregate(std::vector<RewardBreakdown> group, const ChannelMask& mask) {
  if (group.empty()) throw std::invalid_argument("normalize_and_aggregate: empty group");
  double max_loc = 0.0;
  double max_att = 0.0;
  for (const auto& r : group) {
    max_loc = std::max(max_loc, r.r_loc);
    max_att = std::max(max_att, r.r_att);
  }
  for (auto& r : group) {
    r.r_loc_norm = max_loc > 0.0 ? r.r_loc / max_loc : 0.0;
    r.r_att_norm = max_att > 0.0 ? r.r_att / max_att : 0.0;
    r.r_combined = (mask.llm ? r.r_llm : 0.0) + (mask.loc ? *r.r_loc_norm : 0.0) + (mask.att ? *r.r_att_norm : 0.0);
  }
  return group;
}

BellmanStep bellman_q_update(double q, double r, double gamma, double max_next_q, double alpha) {
  if (alpha < 0 || alpha > 1) throw std::invalid_argument("bellman: alpha must be in [0,1]");
  if (gamma < 0 || gamma > 1) throw std::invalid_argument("bellman: gamma must be in [0,1]");
  const double delta = alpha * (r + gamma * max_next_q - q);
  return {delta, q + delta};
}

}  // namespace unveil::rewards
