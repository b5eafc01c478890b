#pragma once

#include "unveil/core.hpp"
#include "unveil/judge.hpp"
#include "unveil/model.hpp"
#include "unveil/nn.hpp"
#include "unveil/rewards.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace unveil::train {

/// Raised when a loss, ratio or objective becomes non-finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SftConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  int batch_size = 1;
  int epochs = 4;
  bool linear_decay = true;
  double warmup_fraction = 0.0;  // share of steps with linear warmup
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  bool eval_train_each_epoch = true;
  std::uint64_t seed = 0;

  static SftConfig low_lr();  // lr 1e-5, batch 128
  void validate() const;
  nlohmann::json to_json() const;
  static SftConfig from_json(const nlohmann::json& j);
};

enum class RewardTermMode {
  Constant,   // c1 * mean(r) is logged and carries no gradient
  Reinforce,  // adds c1 * mean(r * log pi) as a score-function term
};

struct AarConfig {
  double gamma = 0.99;
  double c1 = 0.5;
  double c2 = 0.5;
  double c3 = 0.01;
  double clip_epsilon = 0.2;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  int k = 8;
  double temperature = 0.9;
  double top_p = 0.9;
  int epochs = 1;
  int batch_size = 8;    // queries per optimizer step
  int ppo_epochs = 1;
  /// Whiten advantages over each optimizer batch before the clipped surrogate.
  bool normalize_advantages = true;
  double grad_clip = 1.0;
  rewards::ChannelMask channels;
  RewardTermMode reward_term = RewardTermMode::Constant;
  int dev_eval_every = 0;   // 0: only after the last iteration
  int dev_eval_size = 0;    // 0: whole dev split
  std::uint64_t seed = 0;

  static AarConfig low_lr();  // lr 1e-6
  void validate() const;
  nlohmann::json to_json() const;
  static AarConfig from_json(const nlohmann::json& j);
};

/// AdamW with decoupled weight decay on tensors flagged for decay.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const nn::Tensors& params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(nn::Tensors& params, const nn::Grads& grads, double lr);
  long steps() const { return t_; }

 private:
  nn::Grads m_, v_;
  double wd_ = 0.0, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

/// Scales `g` so its global norm is at most `max_norm`; returns the norm before clipping.
double clip_global_norm(nn::Grads& g, double max_norm);

struct SftLoss {
  double loss = 0.0;  // summed over reference tokens
  int correct = 0;    // argmax hits under teacher forcing
  int tokens = 0;
};

/// Teacher-forced token cross-entropy. When `grads` is given the gradient of
/// `scale * loss` is accumulated into it.
SftLoss sft_loss(const model::PolicyModel& model, const Sample& sample, nn::Grads* grads = nullptr, double scale = 1.0);

/// Token-level argmax accuracy under teacher forcing over a set of samples.
double teacher_forced_accuracy(const model::PolicyModel& model, const std::vector<Sample>& samples);

struct SftEpoch {
  int epoch = 0;
  double mean_loss = 0.0;       // per sample, running during the epoch
  double running_accuracy = 0.0;
  std::optional<double> train_accuracy;  // after the epoch, if enabled
};

struct SftResult {
  model::PolicyModel model;
  std::vector<SftEpoch> epochs;
  std::set<std::string> trained_ids;
};

SftResult run_sft(model::PolicyModel model, const std::vector<Sample>& train, const SftConfig& cfg);

struct Candidate {
  Response response;
  model::SampledSequence seq;
  rewards::RewardBreakdown reward;
  std::vector<double> returns;
  std::vector<double> advantages;
};

struct RolloutGroup {
  std::string sample_id;
  std::vector<Candidate> candidates;
};

/// Terminal-reward returns G_t = gamma^(T-1-t) * r (0-based t, T steps) and A_t = G_t - V(s_t).
void compute_returns(const std::vector<double>& values, double r, double gamma, std::vector<double>& returns,
                     std::vector<double>& advantages);
RolloutGroup compute_returns_and_advantages(RolloutGroup group, double gamma);

/// Objective terms over aligned per-step arrays, plus the derivative of the objective
/// with respect to each step's new log-prob, value and entropy.
struct PpoTerms {
  double objective = 0.0;
  double l_clip = 0.0;
  double l_vf = 0.0;
  double entropy = 0.0;
  double reward_term = 0.0;
  std::vector<double> d_logp;
  std::vector<double> d_value;
  std::vector<double> d_entropy;
};

struct PpoInputs {
  std::vector<double> new_logp;
  std::vector<double> old_logp;
  std::vector<double> advantages;
  std::vector<double> values;
  std::vector<double> returns;
  std::vector<double> entropy;
  std::vector<double> step_reward;  // r_combined of the step's candidate
};

PpoTerms ppo_objective(const PpoInputs& in, const AarConfig& cfg);

struct AarIteration {
  int iteration = 0;
  double mean_r_llm = 0.0;
  double mean_r_loc = 0.0;
  double mean_r_att = 0.0;
  double mean_r_combined = 0.0;
  double objective = 0.0;
  std::optional<double> dev_acc;
  std::optional<double> dev_mean_iou;
};

std::string aar_metrics_csv_header();
std::string aar_metrics_csv_row(const AarIteration& it);

using RolloutObserver = std::function<void(int iteration, const std::vector<RolloutGroup>& groups)>;

struct AarResult {
  model::PolicyModel model;
  std::vector<AarIteration> curve;
  std::set<std::string> trained_ids;
};

/// Token steps of a response that generate its category name (step i emits token i).
std::vector<int> category_token_steps(const TokenSeq& tokens, const Vocab& vocab);

AarResult run_aar(model::PolicyModel model, const std::vector<Sample>& train, const std::vector<Sample>& dev,
                  const AarConfig& cfg, rewards::RelevanceJudge& judge, const RolloutObserver& observer = {});

}  // namespace unveil::train
