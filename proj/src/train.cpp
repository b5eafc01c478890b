#include "unveil/train.hpp"

#include "unveil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace unveil::train {

namespace {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<size_t> shuffled_order(size_t n, std::mt19937_64& rng) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  // Fisher-Yates with an explicit draw so the order does not depend on the library's shuffle.
  for (size_t i = n; i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& z) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

// Temperature-scaled log-probabilities restricted to `support` (others untouched).
struct Restricted {
  std::vector<double> logq;  // aligned with support
  double entropy = 0.0;
};

Restricted restricted_distribution(const Eigen::RowVectorXd& z, const std::vector<Token>& support, double temperature) {
  Restricted r;
  double mx = -std::numeric_limits<double>::infinity();
  for (Token t : support) mx = std::max(mx, z(t) / temperature);
  double s = 0.0;
  for (Token t : support) s += std::exp(z(t) / temperature - mx);
  const double lse = mx + std::log(s);
  r.logq.reserve(support.size());
  for (Token t : support) r.logq.push_back(z(t) / temperature - lse);
  for (double lq : r.logq) r.entropy -= std::exp(lq) * lq;
  return r;
}

}  // namespace

// ---------------------------------------------------------------- configs

SftConfig SftConfig::low_lr() {
  SftConfig c;
  c.learning_rate = 1e-5;
  c.batch_size = 128;
  return c;
}

void SftConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw std::invalid_argument("sft.learning_rate must be > 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("sft.weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("sft.batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("sft.epochs must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw std::invalid_argument("sft adam betas must lie in [0,1)");
  }
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw std::invalid_argument("sft.warmup_fraction must lie in [0,1)");
}

nlohmann::json SftConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"batch_size", batch_size},
          {"epochs", epochs},               {"linear_decay", linear_decay}, {"warmup_fraction", warmup_fraction}, {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2}, {"grad_clip", grad_clip},
          {"eval_train_each_epoch", eval_train_each_epoch}, {"seed", seed}};
}

SftConfig SftConfig::from_json(const nlohmann::json& j) {
  SftConfig c;
  if (j.contains("preset") && j.at("preset") == "low_lr") c = low_lr();
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "linear_decay", c.linear_decay);
  read_opt(j, "warmup_fraction", c.warmup_fraction);
  read_opt(j, "adam_beta1", c.adam_beta1);
  read_opt(j, "adam_beta2", c.adam_beta2);
  read_opt(j, "grad_clip", c.grad_clip);
  read_opt(j, "eval_train_each_epoch", c.eval_train_each_epoch);
  read_opt(j, "seed", c.seed);
  c.validate();
  return c;
}

AarConfig AarConfig::low_lr() {
  AarConfig c;
  c.learning_rate = 1e-6;
  return c;
}

void AarConfig::validate() const {
  if (!(gamma >= 0 && gamma <= 1)) throw std::invalid_argument("aar.gamma must lie in [0,1]");
  if (!(clip_epsilon > 0)) throw std::invalid_argument("aar.clip_epsilon must be > 0");
  if (k < 2) throw std::invalid_argument("aar.k must be >= 2 for group normalization");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw std::invalid_argument("aar.learning_rate must be > 0");
  if (!(temperature > 0)) throw std::invalid_argument("aar.temperature must be > 0");
  if (!(top_p > 0 && top_p <= 1)) throw std::invalid_argument("aar.top_p must lie in (0,1]");
  if (epochs < 0) throw std::invalid_argument("aar.epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("aar.batch_size must be >= 1");
  if (ppo_epochs < 1) throw std::invalid_argument("aar.ppo_epochs must be >= 1");
  if (!(c1 >= 0 && c2 >= 0 && c3 >= 0)) throw std::invalid_argument("aar coefficients must be >= 0");
  if (dev_eval_every < 0 || dev_eval_size < 0) throw std::invalid_argument("aar dev evaluation settings must be >= 0");
}

nlohmann::json AarConfig::to_json() const {
  return {{"gamma", gamma},
          {"c1", c1},
          {"c2", c2},
          {"c3", c3},
          {"clip_epsilon", clip_epsilon},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"k", k},
          {"temperature", temperature},
          {"top_p", top_p},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"ppo_epochs", ppo_epochs},
          {"normalize_advantages", normalize_advantages},
          {"grad_clip", grad_clip},
          {"use_llm", channels.llm},
          {"use_loc", channels.loc},
          {"use_att", channels.att},
          {"reward_term", reward_term == RewardTermMode::Reinforce ? "reinforce" : "constant"},
          {"dev_eval_every", dev_eval_every},
          {"dev_eval_size", dev_eval_size},
          {"seed", seed}};
}

AarConfig AarConfig::from_json(const nlohmann::json& j) {
  AarConfig c;
  if (j.contains("preset") && j.at("preset") == "low_lr") c = low_lr();
  read_opt(j, "gamma", c.gamma);
  read_opt(j, "c1", c.c1);
  read_opt(j, "c2", c.c2);
  read_opt(j, "c3", c.c3);
  read_opt(j, "clip_epsilon", c.clip_epsilon);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "k", c.k);
  read_opt(j, "temperature", c.temperature);
  read_opt(j, "top_p", c.top_p);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "ppo_epochs", c.ppo_epochs);
  read_opt(j, "normalize_advantages", c.normalize_advantages);
  read_opt(j, "grad_clip", c.grad_clip);
  read_opt(j, "use_llm", c.channels.llm);
  read_opt(j, "use_loc", c.channels.loc);
  read_opt(j, "use_att", c.channels.att);
  if (j.contains("reward_term")) {
    const auto m = j.at("reward_term").get<std::string>();
    if (m == "constant") c.reward_term = RewardTermMode::Constant;
    else if (m == "reinforce") c.reward_term = RewardTermMode::Reinforce;
    else throw std::invalid_argument("aar.reward_term must be 'constant' or 'reinforce'");
  }
  read_opt(j, "dev_eval_every", c.dev_eval_every);
  read_opt(j, "dev_eval_size", c.dev_eval_size);
  read_opt(j, "seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- optimizer

AdamW::AdamW(const nn::Tensors& params, double weight_decay, double beta1, double beta2, double eps)
    : m_(nn::zeros_like(params)), v_(nn::zeros_like(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(nn::Tensors& params, const nn::Grads& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grads[i];
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grads[i].cwiseProduct(grads[i]);
    if (params.decay[i] && wd_ > 0) params[i] *= (1.0 - lr * wd_);
    params[i].array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

double clip_global_norm(nn::Grads& g, double max_norm) {
  const double n = nn::global_norm(g);
  if (max_norm > 0 && n > max_norm) {
    const double s = max_norm / n;
    for (auto& m : g) m *= s;
  }
  return n;
}

// ---------------------------------------------------------------- SFT

SftLoss sft_loss(const model::PolicyModel& model, const Sample& sample, nn::Grads* grads, double scale) {
  const auto& ref = sample.reference_response;
  if (ref.empty()) throw std::invalid_argument("sft_loss: empty reference response for " + sample.id);
  const model::Encoding enc = model.encode(sample.image);
  const TokenSeq prefix(ref.begin(), ref.end() - 1);
  const model::DecodeResult res = model.decode(enc, sample.query, prefix);
  SftLoss out;
  Matrix dlogits = Matrix::Zero(res.logits.rows(), res.logits.cols());
  for (Eigen::Index t = 0; t < res.logits.rows(); ++t) {
    const Token target = ref[static_cast<size_t>(t)];
    const Eigen::RowVectorXd lp = log_softmax(res.logits.row(t));
    out.loss -= lp(target);
    Eigen::Index best = 0;
    res.logits.row(t).maxCoeff(&best);
    out.correct += best == target ? 1 : 0;
    ++out.tokens;
    if (grads) {
      dlogits.row(t) = lp.array().exp() * scale;
      dlogits(t, target) -= scale;
    }
  }
  if (grads) {
    auto dkv = model.zero_cross_kv_grads(enc);
    model.backward_decode(enc, res, dlogits, Vector::Zero(res.values.size()), *grads, dkv);
    model.backward_encode(enc, dkv, *grads);
  }
  return out;
}

double teacher_forced_accuracy(const model::PolicyModel& model, const std::vector<Sample>& samples) {
  long correct = 0, total = 0;
  for (const auto& s : samples) {
    const auto r = sft_loss(model, s);
    correct += r.correct;
    total += r.tokens;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

SftResult run_sft(model::PolicyModel model, const std::vector<Sample>& train, const SftConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("run_sft: empty train split");
  SftResult out;
  std::mt19937_64 rng(cfg.seed);
  AdamW opt(model.params(), cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2);
  const size_t n = train.size();
  const size_t B = static_cast<size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + B - 1) / B);
  const long total_steps = steps_per_epoch * cfg.epochs;
  long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffled_order(n, rng);
    double loss_sum = 0.0;
    long correct = 0, tokens = 0;
    for (size_t start = 0; start < n; start += B) {
      const size_t end = std::min(n, start + B);
      nn::Grads g = nn::zeros_like(model.params());
      const double scale = 1.0 / static_cast<double>(end - start);
      for (size_t i = start; i < end; ++i) {
        const Sample& s = train[order[i]];
        out.trained_ids.insert(s.id);
        const auto r = sft_loss(model, s, &g, scale);
        if (!std::isfinite(r.loss)) {
          throw DivergenceError("sft: non-finite loss at epoch " + std::to_string(e) + " sample " + s.id);
        }
        loss_sum += r.loss;
        correct += r.correct;
        tokens += r.tokens;
      }
      if (!std::isfinite(clip_global_norm(g, cfg.grad_clip))) {
        throw DivergenceError("sft: non-finite gradient at epoch " + std::to_string(e));
      }
      double lr = cfg.linear_decay
                      ? cfg.learning_rate * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps))
                      : cfg.learning_rate;
      const double warm = std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps));
      if (warm > 0 && static_cast<double>(step) < warm) lr *= static_cast<double>(step + 1) / warm;
      opt.step(model.params(), g, lr);
      ++step;
    }
    SftEpoch m;
    m.epoch = e + 1;
    m.mean_loss = loss_sum / static_cast<double>(n);
    m.running_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
    if (cfg.eval_train_each_epoch) m.train_accuracy = teacher_forced_accuracy(model, train);
    out.epochs.push_back(m);
  }
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------- returns and objective

void compute_returns(const std::vector<double>& values, double r, double gamma, std::vector<double>& returns,
                     std::vector<double>& advantages) {
  const size_t T = values.size();
  returns.assign(T, 0.0);
  advantages.assign(T, 0.0);
  double g = r;
  for (size_t i = T; i-- > 0;) {
    returns[i] = g;
    advantages[i] = g - values[i];
    g *= gamma;
  }
}

RolloutGroup compute_returns_and_advantages(RolloutGroup group, double gamma) {
  for (auto& c : group.candidates) {
    if (!c.reward.r_combined) throw std::invalid_argument("returns: candidate reward not aggregated");
    compute_returns(c.seq.values, *c.reward.r_combined, gamma, c.returns, c.advantages);
  }
  return group;
}

PpoTerms ppo_objective(const PpoInputs& in, const AarConfig& cfg) {
  const size_t n = in.new_logp.size();
  const auto aligned = [n](const std::vector<double>& v) { return v.size() == n; };
  if (!aligned(in.old_logp) || !aligned(in.advantages) || !aligned(in.values) || !aligned(in.returns) ||
      !aligned(in.entropy) || !aligned(in.step_reward)) {
    throw std::invalid_argument("ppo_objective: misaligned inputs");
  }
  PpoTerms t;
  t.d_logp.assign(n, 0.0);
  t.d_value.assign(n, 0.0);
  t.d_entropy.assign(n, 0.0);
  if (n == 0) return t;
  const double inv = 1.0 / static_cast<double>(n);
  const double lo = 1.0 - cfg.clip_epsilon, hi = 1.0 + cfg.clip_epsilon;
  for (size_t i = 0; i < n; ++i) {
    const double rho = std::exp(in.new_logp[i] - in.old_logp[i]);
    if (!std::isfinite(rho)) throw DivergenceError("ppo_objective: non-finite ratio at step " + std::to_string(i));
    const double a = in.advantages[i];
    const double unclipped = rho * a;
    const double clipped = std::clamp(rho, lo, hi) * a;
    if (unclipped <= clipped) {
      t.l_clip += unclipped;
      t.d_logp[i] += inv * a * rho;
    } else {
      t.l_clip += clipped;  // gradient only while rho lies strictly inside the clip range
      if (rho > lo && rho < hi) t.d_logp[i] += inv * a * rho;
    }
    const double diff = in.values[i] - in.returns[i];
    t.l_vf += diff * diff;
    t.d_value[i] = -cfg.c2 * 2.0 * diff * inv;
    t.entropy += in.entropy[i];
    t.d_entropy[i] = cfg.c3 * inv;
    if (cfg.reward_term == RewardTermMode::Reinforce) {
      t.reward_term += in.step_reward[i] * in.new_logp[i];
      t.d_logp[i] += cfg.c1 * in.step_reward[i] * inv;
    } else {
      t.reward_term += in.step_reward[i];
    }
  }
  t.l_clip *= inv;
  t.l_vf *= inv;
  t.entropy *= inv;
  t.reward_term *= inv;
  t.objective = t.l_clip + cfg.c1 * t.reward_term - cfg.c2 * t.l_vf + cfg.c3 * t.entropy;
  if (!std::isfinite(t.objective)) throw DivergenceError("ppo_objective: non-finite objective");
  return t;
}

// ---------------------------------------------------------------- AAR

std::string aar_metrics_csv_header() {
  return "iteration,mean_r_llm,mean_r_loc,mean_r_att,mean_r_combined,dev_acc,dev_mean_iou";
}

std::string aar_metrics_csv_row(const AarIteration& it) {
  std::ostringstream os;
  os.precision(10);
  os << it.iteration << ',' << it.mean_r_llm << ',' << it.mean_r_loc << ',' << it.mean_r_att << ','
     << it.mean_r_combined << ',';
  if (it.dev_acc) os << *it.dev_acc;
  os << ',';
  if (it.dev_mean_iou) os << *it.dev_mean_iou;
  return os.str();
}

std::vector<int> category_token_steps(const TokenSeq& tokens, const Vocab& vocab) {
  std::vector<int> steps;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == Vocab::kEos) break;
    if (vocab.is_category(tokens[i])) steps.push_back(static_cast<int>(i));
  }
  return steps;
}

namespace {

struct GroupWork {
  const Sample* sample = nullptr;
  model::Encoding enc;
  std::vector<model::DecodeResult> decoded;  // teacher-forced pass per candidate
};

TokenSeq prefix_of(const TokenSeq& tokens) { return TokenSeq(tokens.begin(), tokens.end() - 1); }

void whiten(std::vector<double>& a) {
  if (a.empty()) return;
  const double n = static_cast<double>(a.size());
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double var = 0.0;
  for (double v : a) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : a) v = sd > 1e-8 ? (v - mean) / sd : v - mean;
}

}  // namespace

AarResult run_aar(model::PolicyModel model, const std::vector<Sample>& train, const std::vector<Sample>& dev,
                  const AarConfig& cfg, rewards::RelevanceJudge& judge, const RolloutObserver& observer) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("run_aar: empty train split");
  AarResult out;
  const Vocab& vocab = model.vocab();
  const int P = model.image_shape().patch_count();
  std::mt19937_64 rng(mix(cfg.seed, 0xAA));
  AdamW opt(model.params(), cfg.weight_decay);
  const size_t n = train.size();
  const size_t B = static_cast<size_t>(cfg.batch_size);
  const int iters_per_epoch = static_cast<int>((n + B - 1) / B);
  const int total_iters = iters_per_epoch * cfg.epochs;
  std::vector<Sample> dev_subset = dev;
  if (cfg.dev_eval_size > 0 && dev_subset.size() > static_cast<size_t>(cfg.dev_eval_size)) {
    dev_subset.resize(static_cast<size_t>(cfg.dev_eval_size));
  }

  int iteration = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffled_order(n, rng);
    for (size_t start = 0; start < n; start += B, ++iteration) {
      const size_t end = std::min(n, start + B);

      // Rollout on the current (frozen) parameters.
      std::vector<RolloutGroup> groups;
      std::vector<GroupWork> work;
      AarIteration log;
      log.iteration = iteration + 1;
      int n_candidates = 0;
      for (size_t i = start; i < end; ++i) {
        const Sample& s = train[order[i]];
        out.trained_ids.insert(s.id);
        GroupWork w;
        w.sample = &s;
        w.enc = model.encode(s.image);
        model::SamplingOptions so;
        so.k = cfg.k;
        so.temperature = cfg.temperature;
        so.top_p = cfg.top_p;
        so.seed = mix(cfg.seed, static_cast<std::uint64_t>(iteration) * 1000003ULL + (i - start));
        auto seqs = model::sample_candidates(model, w.enc, s.query, so);
        const auto abnormal = patches_in_region(s.image);
        RolloutGroup g;
        g.sample_id = s.id;
        std::vector<rewards::RewardBreakdown> raw;
        for (auto& seq : seqs) {
          Candidate c;
          c.response = parse_response(vocab, seq.tokens);
          model::DecodeResult res = model.decode(w.enc, s.query, prefix_of(seq.tokens));
          // values from the teacher-forced pass are the ones the gradient sees
          for (size_t t = 0; t < seq.values.size(); ++t) seq.values[t] = res.values(static_cast<Eigen::Index>(t));
          c.reward.r_llm = judge.judge(c.response, s, vocab).score;
          c.reward.r_loc = rewards::localization_reward(c.response.parsed_bbox, s.gt_bbox);
          const auto steps = category_token_steps(seq.tokens, vocab);
          c.reward.r_att = steps.empty() ? 0.0
                                         : rewards::vision_relevance_reward(
                                               model::cross_attention_slice(res.cross_logits, steps), abnormal, P);
          raw.push_back(c.reward);
          c.seq = std::move(seq);
          g.candidates.push_back(std::move(c));
          w.decoded.push_back(std::move(res));
        }
        raw = rewards::normalize_and_aggregate(std::move(raw), cfg.channels);
        for (size_t c = 0; c < raw.size(); ++c) {
          g.candidates[c].reward = raw[c];
          log.mean_r_llm += raw[c].r_llm;
          log.mean_r_loc += raw[c].r_loc;
          log.mean_r_att += raw[c].r_att;
          log.mean_r_combined += *raw[c].r_combined;
          ++n_candidates;
        }
        groups.push_back(compute_returns_and_advantages(std::move(g), cfg.gamma));
        work.push_back(std::move(w));
      }
      log.mean_r_llm /= n_candidates;
      log.mean_r_loc /= n_candidates;
      log.mean_r_att /= n_candidates;
      log.mean_r_combined /= n_candidates;
      if (observer) observer(log.iteration, groups);

      // Optimization.
      for (int pe = 0; pe < cfg.ppo_epochs; ++pe) {
        if (pe > 0) {
          for (size_t gi = 0; gi < groups.size(); ++gi) {
            work[gi].enc = model.encode(work[gi].sample->image);
            for (size_t c = 0; c < groups[gi].candidates.size(); ++c) {
              work[gi].decoded[c] =
                  model.decode(work[gi].enc, work[gi].sample->query, prefix_of(groups[gi].candidates[c].seq.tokens));
            }
          }
        }
        PpoInputs in;
        std::vector<Restricted> dists;
        for (size_t gi = 0; gi < groups.size(); ++gi) {
          for (size_t c = 0; c < groups[gi].candidates.size(); ++c) {
            const Candidate& cand = groups[gi].candidates[c];
            const auto& res = work[gi].decoded[c];
            for (size_t t = 0; t < cand.seq.tokens.size(); ++t) {
              const auto& support = cand.seq.nucleus[t];
              Restricted d = restricted_distribution(res.logits.row(static_cast<Eigen::Index>(t)), support,
                                                     cfg.temperature);
              const auto pos = std::find(support.begin(), support.end(), cand.seq.tokens[t]) - support.begin();
              in.new_logp.push_back(d.logq[static_cast<size_t>(pos)]);
              in.old_logp.push_back(cand.seq.logprobs[t]);
              in.advantages.push_back(cand.advantages[t]);
              in.values.push_back(res.values(static_cast<Eigen::Index>(t)));
              in.returns.push_back(cand.returns[t]);
              in.entropy.push_back(d.entropy);
              in.step_reward.push_back(*cand.reward.r_combined);
              dists.push_back(std::move(d));
            }
          }
        }
        if (cfg.normalize_advantages) whiten(in.advantages);
        const PpoTerms terms = ppo_objective(in, cfg);
        log.objective = terms.objective;

        nn::Grads grads = nn::zeros_like(model.params());
        size_t idx = 0;
        for (size_t gi = 0; gi < groups.size(); ++gi) {
          auto dkv = model.zero_cross_kv_grads(work[gi].enc);
          for (size_t c = 0; c < groups[gi].candidates.size(); ++c) {
            const Candidate& cand = groups[gi].candidates[c];
            const auto& res = work[gi].decoded[c];
            Matrix dlogits = Matrix::Zero(res.logits.rows(), res.logits.cols());
            Vector dvalues = Vector::Zero(res.values.size());
            for (size_t t = 0; t < cand.seq.tokens.size(); ++t, ++idx) {
              const auto& support = cand.seq.nucleus[t];
              const Restricted& d = dists[idx];
              const auto row = static_cast<Eigen::Index>(t);
              // descent on -objective
              for (size_t j = 0; j < support.size(); ++j) {
                const double q = std::exp(d.logq[j]);
                const double dlogp = ((support[j] == cand.seq.tokens[t] ? 1.0 : 0.0) - q) / cfg.temperature;
                const double dent = -q * (d.logq[j] + d.entropy) / cfg.temperature;
                dlogits(row, support[j]) -= terms.d_logp[idx] * dlogp + terms.d_entropy[idx] * dent;
              }
              dvalues(row) = -terms.d_value[idx];
            }
            model.backward_decode(work[gi].enc, res, dlogits, dvalues, grads, dkv);
          }
          model.backward_encode(work[gi].enc, dkv, grads);
        }
        if (!std::isfinite(clip_global_norm(grads, cfg.grad_clip))) {
          throw DivergenceError("aar: non-finite gradient at iteration " + std::to_string(log.iteration));
        }
        opt.step(model.params(), grads, cfg.learning_rate);
      }

      const bool last = iteration + 1 == total_iters;
      const bool scheduled = cfg.dev_eval_every > 0 && (iteration + 1) % cfg.dev_eval_every == 0;
      if (!dev_subset.empty() && (last || scheduled)) {
        const auto m = eval::evaluate_split(model, dev_subset);
        log.dev_acc = m.acc;
        log.dev_mean_iou = m.mean_iou;
      }
      out.curve.push_back(log);
    }
  }
  out.model = std::move(model);
  return out;
}

}  // namespace unveil::train
