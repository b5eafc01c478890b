#include "unveil/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace unveil::model {

using nlohmann::json;

void ModelConfig::validate() const {
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0) {
    throw std::invalid_argument("model: d_model must be a positive multiple of heads");
  }
  if (encoder_layers < 1 || decoder_layers < 1) throw std::invalid_argument("model: need at least one layer each");
  if (d_ff <= 0) throw std::invalid_argument("model: d_ff must be positive");
  if (max_query_len < 1 || max_response_len < 1) throw std::invalid_argument("model: max lengths must be positive");
}

json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"heads", heads},
          {"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers},
          {"d_ff", d_ff},
          {"max_query_len", max_query_len},
          {"max_response_len", max_response_len},
          {"patch_context", patch_context},
          {"value_trunk_grad", value_trunk_grad},
          {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_query_len = j.value("max_query_len", c.max_query_len);
  c.max_response_len = j.value("max_response_len", c.max_response_len);
  c.patch_context = j.value("patch_context", c.patch_context);
  c.value_trunk_grad = j.value("value_trunk_grad", c.value_trunk_grad);
  c.init_seed = j.value("init_seed", c.init_seed);
  return c;
}

PolicyModel::PolicyModel(ModelConfig cfg, Vocab vocab, ImageShape shape)
    : cfg_(cfg), vocab_(std::move(vocab)), shape_(shape) {
  cfg_.validate();
  if (shape_.patch_count() <= 0 || shape_.feature_dim <= 0) throw std::invalid_argument("model: invalid image shape");
  std::mt19937_64 rng(cfg_.init_seed);
  const int D = cfg_.d_model;
  const int in_dim = shape_.feature_dim * (cfg_.patch_context ? 5 : 1) + shape_.height_patches + shape_.width_patches;
  patch_in_ = nn::Linear::create(params_, "enc.patch_in", in_dim, D, rng);
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "enc.layer" + std::to_string(l);
    EncoderLayer layer;
    layer.ln1 = nn::LayerNorm::create(params_, p + ".ln1", D);
    layer.attn = nn::MultiHeadAttention::create(params_, p + ".attn", D, cfg_.heads, rng);
    layer.ln2 = nn::LayerNorm::create(params_, p + ".ln2", D);
    layer.ffn = nn::FeedForward::create(params_, p + ".ffn", D, cfg_.d_ff, rng);
    enc_.push_back(layer);
  }
  enc_ln_ = nn::LayerNorm::create(params_, "enc.ln_final", D);
  tok_emb_ = params_.add("dec.tok_emb", nn::random_normal(vocab_.size(), D, 0.5, rng), false);
  pos_emb_ = params_.add("dec.pos_emb", nn::random_normal(max_input_len(), D, 0.5, rng), false);
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "dec.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.ln1 = nn::LayerNorm::create(params_, p + ".ln1", D);
    layer.self_attn = nn::MultiHeadAttention::create(params_, p + ".self_attn", D, cfg_.heads, rng);
    layer.ln2 = nn::LayerNorm::create(params_, p + ".ln2", D);
    layer.cross_attn = nn::MultiHeadAttention::create(params_, p + ".cross_attn", D, cfg_.heads, rng);
    layer.ln3 = nn::LayerNorm::create(params_, p + ".ln3", D);
    layer.ffn = nn::FeedForward::create(params_, p + ".ffn", D, cfg_.d_ff, rng);
    dec_.push_back(layer);
  }
  dec_ln_ = nn::LayerNorm::create(params_, "dec.ln_final", D);
  lm_head_ = nn::Linear::create(params_, "policy_head", D, vocab_.size(), rng);
  value_head_ = nn::Linear::create(params_, "value_head", D, 1, rng, 0.1);
}

Encoding PolicyModel::encode(const GridImage& image) const {
  if (image.height_patches != shape_.height_patches || image.width_patches != shape_.width_patches ||
      image.feature_dim() != shape_.feature_dim) {
    throw std::invalid_argument("model: image shape does not match the model");
  }
  const int P = shape_.patch_count();
  const int F = shape_.feature_dim;
  const int H = shape_.height_patches, W = shape_.width_patches;
  const int FC = F * (cfg_.patch_context ? 5 : 1);
  Encoding enc;
  enc.input = Matrix::Zero(P, FC + H + W);
  enc.input.leftCols(F) = image.patch_features;
  for (int p = 0; p < P; ++p) {
    const int r = p / W, c = p % W;
    if (cfg_.patch_context) {
      // neighbours left, right, up, down; zero outside the grid
      const int nr[4] = {r, r, r - 1, r + 1};
      const int nc[4] = {c - 1, c + 1, c, c};
      for (int n = 0; n < 4; ++n) {
        if (nr[n] < 0 || nr[n] >= H || nc[n] < 0 || nc[n] >= W) continue;
        enc.input.block(p, F * (n + 1), 1, F) = image.patch_features.row(nr[n] * W + nc[n]);
      }
    }
    enc.input(p, FC + r) = 1.0;
    enc.input(p, FC + H + c) = 1.0;
  }
  Matrix x = patch_in_.forward(params_, enc.input);
  enc.layers.resize(enc_.size());
  for (size_t l = 0; l < enc_.size(); ++l) {
    const auto& L = enc_[l];
    auto& c = enc.layers[l];
    c.x_in = x;
    c.ln1_out = L.ln1.forward(params_, x, c.ln1);
    c.kv = L.attn.project(params_, c.ln1_out);
    c.x_mid = x + L.attn.attend(params_, c.ln1_out, c.kv, false, c.attn);
    c.ln2_out = L.ln2.forward(params_, c.x_mid, c.ln2);
    x = c.x_mid + L.ffn.forward(params_, c.ln2_out, c.ffn);
  }
  enc.pre_final = x;
  enc.memory = enc_ln_.forward(params_, x, enc.ln_final);
  enc.cross_kv.reserve(dec_.size());
  for (const auto& L : dec_) enc.cross_kv.push_back(L.cross_attn.project(params_, enc.memory));
  return enc;
}

DecodeResult PolicyModel::decode(const Encoding& enc, const TokenSeq& query, const TokenSeq& prefix) const {
  if (static_cast<int>(query.size()) > cfg_.max_query_len) throw std::length_error("model: query exceeds max_query_len");
  if (static_cast<int>(prefix.size()) + 1 > cfg_.max_response_len) {
    throw std::length_error("model: response exceeds max_response_len");
  }
  DecodeResult res;
  res.input.reserve(query.size() + prefix.size() + 2);
  res.input.push_back(Vocab::kBos);
  res.input.insert(res.input.end(), query.begin(), query.end());
  res.input.push_back(Vocab::kSep);
  res.input.insert(res.input.end(), prefix.begin(), prefix.end());
  const int L = static_cast<int>(res.input.size());
  const int steps = static_cast<int>(prefix.size()) + 1;
  res.first_step = L - steps;

  Matrix x(L, cfg_.d_model);
  for (int i = 0; i < L; ++i) {
    const Token t = res.input[static_cast<size_t>(i)];
    if (!vocab_.valid(t)) throw std::out_of_range("model: token id outside the vocabulary");
    x.row(i) = params_[tok_emb_].row(t) + params_[pos_emb_].row(position_id(i, res.first_step));
  }
  res.layers.resize(dec_.size());
  res.cross_logits.resize(dec_.size());
  for (size_t l = 0; l < dec_.size(); ++l) {
    const auto& D = dec_[l];
    auto& c = res.layers[l];
    c.x_in = x;
    c.ln1_out = D.ln1.forward(params_, x, c.ln1);
    c.self_kv = D.self_attn.project(params_, c.ln1_out);
    c.x_mid1 = x + D.self_attn.attend(params_, c.ln1_out, c.self_kv, true, c.self_attn);
    c.ln2_out = D.ln2.forward(params_, c.x_mid1, c.ln2);
    c.x_mid2 = c.x_mid1 + D.cross_attn.attend(params_, c.ln2_out, enc.cross_kv[l], false, c.cross_attn);
    c.ln3_out = D.ln3.forward(params_, c.x_mid2, c.ln3);
    x = c.x_mid2 + D.ffn.forward(params_, c.ln3_out, c.ffn);
    auto& maps = res.cross_logits[l];
    for (const auto& s : c.cross_attn.logits) maps.push_back(s.bottomRows(steps));
  }
  res.pre_final = x;
  const Matrix h = dec_ln_.forward(params_, x, res.ln_final);
  res.hidden_steps = h.bottomRows(steps);
  res.logits = lm_head_.forward(params_, res.hidden_steps);
  res.values = value_head_.forward(params_, res.hidden_steps).col(0);
  return res;
}

std::vector<nn::KV> PolicyModel::zero_cross_kv_grads(const Encoding& enc) const {
  std::vector<nn::KV> out;
  out.reserve(enc.cross_kv.size());
  for (const auto& kv : enc.cross_kv) {
    out.push_back({Matrix::Zero(kv.k.rows(), kv.k.cols()), Matrix::Zero(kv.v.rows(), kv.v.cols())});
  }
  return out;
}

void PolicyModel::backward_decode(const Encoding& enc, const DecodeResult& res, const Matrix& dlogits,
                                  const Vector& dvalues, nn::Grads& g, std::vector<nn::KV>& dcross_kv) const {
  const int L = static_cast<int>(res.input.size());
  const int steps = L - res.first_step;
  Matrix dh_steps = lm_head_.backward(params_, g, res.hidden_steps, dlogits);
  const Matrix dh_value = value_head_.backward(params_, g, res.hidden_steps, Matrix(dvalues));
  if (cfg_.value_trunk_grad) dh_steps += dh_value;
  Matrix dh = Matrix::Zero(L, cfg_.d_model);
  dh.bottomRows(steps) = dh_steps;
  Matrix dx = dec_ln_.backward(params_, g, res.ln_final, dh);
  for (size_t li = dec_.size(); li-- > 0;) {
    const auto& D = dec_[li];
    const auto& c = res.layers[li];
    Matrix dx_mid2 = dx + D.ln3.backward(params_, g, c.ln3, D.ffn.backward(params_, g, c.ln3_out, c.ffn, dx));
    const Matrix dln2 = D.cross_attn.backward_attend(params_, g, c.ln2_out, enc.cross_kv[li], false, c.cross_attn,
                                                     dx_mid2, dcross_kv[li]);
    Matrix dx_mid1 = dx_mid2 + D.ln2.backward(params_, g, c.ln2, dln2);
    nn::KV dkv{Matrix::Zero(c.self_kv.k.rows(), c.self_kv.k.cols()),
               Matrix::Zero(c.self_kv.v.rows(), c.self_kv.v.cols())};
    Matrix dln1 = D.self_attn.backward_attend(params_, g, c.ln1_out, c.self_kv, true, c.self_attn, dx_mid1, dkv);
    dln1 += D.self_attn.backward_project(params_, g, c.ln1_out, dkv);
    dx = dx_mid1 + D.ln1.backward(params_, g, c.ln1, dln1);
  }
  for (int i = 0; i < L; ++i) {
    g[tok_emb_].row(res.input[static_cast<size_t>(i)]) += dx.row(i);
    g[pos_emb_].row(position_id(i, res.first_step)) += dx.row(i);
  }
}

void PolicyModel::backward_encode(const Encoding& enc, const std::vector<nn::KV>& dcross_kv, nn::Grads& g) const {
  Matrix dmem = Matrix::Zero(enc.memory.rows(), enc.memory.cols());
  for (size_t l = 0; l < dec_.size(); ++l) dmem += dec_[l].cross_attn.backward_project(params_, g, enc.memory, dcross_kv[l]);
  Matrix dx = enc_ln_.backward(params_, g, enc.ln_final, dmem);
  for (size_t li = enc_.size(); li-- > 0;) {
    const auto& E = enc_[li];
    const auto& c = enc.layers[li];
    Matrix dx_mid = dx + E.ln2.backward(params_, g, c.ln2, E.ffn.backward(params_, g, c.ln2_out, c.ffn, dx));
    nn::KV dkv{Matrix::Zero(c.kv.k.rows(), c.kv.k.cols()), Matrix::Zero(c.kv.v.rows(), c.kv.v.cols())};
    Matrix dln1 = E.attn.backward_attend(params_, g, c.ln1_out, c.kv, false, c.attn, dx_mid, dkv);
    dln1 += E.attn.backward_project(params_, g, c.ln1_out, dkv);
    dx = dx_mid + E.ln1.backward(params_, g, c.ln1, dln1);
  }
  (void)patch_in_.backward(params_, g, enc.input, dx);
}

ForwardOutput forward(const PolicyModel& model, const GridImage& image, const TokenSeq& query,
                      const TokenSeq& response_prefix) {
  const Encoding enc = model.encode(image);
  DecodeResult res = model.decode(enc, query, response_prefix);
  return ForwardOutput{std::move(res.logits), std::move(res.values), std::move(res.cross_logits)};
}

Nucleus make_nucleus(const Eigen::RowVectorXd& logits, double temperature, double top_p) {
  if (!(temperature > 0)) throw std::invalid_argument("nucleus: temperature must be > 0");
  if (!(top_p > 0 && top_p <= 1)) throw std::invalid_argument("nucleus: top_p must be in (0,1]");
  const auto V = static_cast<int>(logits.size());
  const double mx = logits.maxCoeff();
  std::vector<double> p(static_cast<size_t>(V));
  double z = 0.0;
  for (int i = 0; i < V; ++i) {
    p[static_cast<size_t>(i)] = std::exp((logits(i) - mx) / temperature);
    z += p[static_cast<size_t>(i)];
  }
  for (auto& v : p) v /= z;
  std::vector<Token> order(static_cast<size_t>(V));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Token a, Token b) { return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)]; });
  Nucleus n;
  double cum = 0.0;
  for (Token t : order) {
    n.tokens.push_back(t);
    n.probs.push_back(p[static_cast<size_t>(t)]);
    cum += p[static_cast<size_t>(t)];
    if (top_p < 1.0 && cum >= top_p) break;
  }
  for (auto& v : n.probs) v /= cum;
  return n;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t k) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (k + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct StepOutput {
  Eigen::RowVectorXd logits;
  double value = 0.0;
};

}  // namespace

std::vector<SampledSequence> sample_candidates(const PolicyModel& model, const Encoding& enc, const TokenSeq& query,
                                               const SamplingOptions& opts) {
  if (opts.k < 1) throw std::invalid_argument("sampling: k must be >= 1");
  if (!opts.greedy) (void)make_nucleus(Eigen::RowVectorXd::Zero(1), opts.temperature, opts.top_p);
  const int max_len = model.config().max_response_len;
  // Candidates sharing a prefix see identical logits; compute each prefix once.
  std::map<TokenSeq, StepOutput> memo;
  std::vector<SampledSequence> out;
  out.reserve(static_cast<size_t>(opts.k));
  for (int c = 0; c < opts.k; ++c) {
    std::mt19937_64 rng(mix_seed(opts.seed, static_cast<std::uint64_t>(c)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SampledSequence seq;
    while (static_cast<int>(seq.tokens.size()) < max_len) {
      auto it = memo.find(seq.tokens);
      if (it == memo.end()) {
        const DecodeResult res = model.decode(enc, query, seq.tokens);
        it = memo.emplace(seq.tokens, StepOutput{res.logits.bottomRows(1), res.values(res.values.size() - 1)}).first;
      }
      const StepOutput& step = it->second;
      Nucleus nuc;
      if (opts.greedy) {
        Eigen::Index best = 0;
        step.logits.maxCoeff(&best);
        nuc.tokens = {static_cast<Token>(best)};
        nuc.probs = {1.0};
      } else {
        nuc = make_nucleus(step.logits, opts.temperature, opts.top_p);
      }
      size_t pick = nuc.tokens.size() - 1;
      if (nuc.tokens.size() > 1) {
        const double u = unit(rng);
        double cum = 0.0;
        for (size_t i = 0; i < nuc.tokens.size(); ++i) {
          cum += nuc.probs[i];
          if (u < cum) {
            pick = i;
            break;
          }
        }
      }
      const Token tok = nuc.tokens[pick];
      seq.logprobs.push_back(std::log(nuc.probs[pick]));
      seq.values.push_back(step.value);
      seq.nucleus.push_back(std::move(nuc.tokens));
      seq.tokens.push_back(tok);
      if (tok == Vocab::kEos) break;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<SampledSequence> sample_candidates(const PolicyModel& model, const GridImage& image, const TokenSeq& query,
                                               const SamplingOptions& opts) {
  return sample_candidates(model, model.encode(image), query, opts);
}

TokenSeq greedy_decode(const PolicyModel& model, const GridImage& image, const TokenSeq& query) {
  SamplingOptions opts;
  opts.k = 1;
  opts.greedy = true;
  return sample_candidates(model, image, query, opts).front().tokens;
}

Matrix cross_attention_slice(const AttentionMaps& maps, const std::vector<int>& token_steps, int layer,
                             HeadReduce reduce) {
  (void)reduce;
  if (maps.empty()) throw std::invalid_argument("attention slice: no layers");
  const int L = static_cast<int>(maps.size());
  const int li = layer < 0 ? L - 1 : layer;
  if (li >= L) throw std::out_of_range("attention slice: layer out of range");
  const auto& heads = maps[static_cast<size_t>(li)];
  const auto P = heads.front().cols();
  const auto steps = heads.front().rows();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(token_steps.size()), P);
  for (size_t r = 0; r < token_steps.size(); ++r) {
    const int t = token_steps[r];
    if (t < 0 || t >= steps) throw std::out_of_range("attention slice: token position out of range");
    for (const auto& h : heads) out.row(static_cast<Eigen::Index>(r)) += h.row(t);
  }
  if (!heads.empty()) out /= static_cast<double>(heads.size());
  return out;
}

}  // namespace unveil::model
