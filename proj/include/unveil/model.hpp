#pragma once

#include "unveil/core.hpp"
#include "unveil/nn.hpp"
#include "unveil/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace unveil::model {

struct ModelConfig {
  int d_model = 96;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int d_ff = 192;
  int max_query_len = 16;
  int max_response_len = 12;
  /// Each patch token also sees its 4-neighbours' features (a convolutional stem).
  bool patch_context = true;
  /// When false the value loss trains only the value head; the trunk follows the policy.
  bool value_trunk_grad = false;
  std::uint64_t init_seed = 1;

  int d_k() const { return d_model / heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Shape of the image input the model was built for.
struct ImageShape {
  int height_patches = 0;
  int width_patches = 0;
  int feature_dim = 0;

  int patch_count() const { return height_patches * width_patches; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Per-layer exports of the decoder cross-attention: [layer][head] is a (steps x P)
/// matrix of pre-softmax logits Q_i K_j^T / sqrt(d_k).
using AttentionMaps = std::vector<std::vector<Matrix>>;

/// Image encoding plus everything the encoder backward pass needs.
struct Encoding {
  struct Layer {
    Matrix x_in;
    nn::LayerNorm::Cache ln1;
    Matrix ln1_out;
    nn::KV kv;
    nn::AttentionCache attn;
    Matrix x_mid;
    nn::LayerNorm::Cache ln2;
    Matrix ln2_out;
    nn::FeedForward::Cache ffn;
  };
  Matrix input;  // patch features with row/col one-hots appended
  std::vector<Layer> layers;
  Matrix pre_final;
  nn::LayerNorm::Cache ln_final;
  Matrix memory;                  // P x d_model
  std::vector<nn::KV> cross_kv;   // one per decoder layer
};

/// Decoder output for one (query, prefix). Step t (0-based) holds the distribution of
/// response token t given the first t prefix tokens, so there are |prefix| + 1 steps.
struct DecodeResult {
  Matrix logits;   // steps x vocab
  Vector values;   // steps
  AttentionMaps cross_logits;

  struct Layer {
    Matrix x_in;
    nn::LayerNorm::Cache ln1;
    Matrix ln1_out;
    nn::KV self_kv;
    nn::AttentionCache self_attn;
    Matrix x_mid1;
    nn::LayerNorm::Cache ln2;
    Matrix ln2_out;
    nn::AttentionCache cross_attn;
    Matrix x_mid2;
    nn::LayerNorm::Cache ln3;
    Matrix ln3_out;
    nn::FeedForward::Cache ffn;
  };
  TokenSeq input;
  int first_step = 0;
  std::vector<Layer> layers;
  Matrix pre_final;
  nn::LayerNorm::Cache ln_final;
  Matrix hidden_steps;
};

/// Tiny pre-LayerNorm encoder-decoder. The LM head is the policy, the scalar value
/// head reads the same decoder state.
class PolicyModel {
 public:
  PolicyModel() = default;
  PolicyModel(ModelConfig cfg, Vocab vocab, ImageShape shape);

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  const ImageShape& image_shape() const { return shape_; }
  nn::Tensors& params() { return params_; }
  const nn::Tensors& params() const { return params_; }

  Encoding encode(const GridImage& image) const;
  DecodeResult decode(const Encoding& enc, const TokenSeq& query, const TokenSeq& prefix) const;

  /// Accumulates parameter gradients of the decoder and the K/V gradients of the
  /// cross-attention memory projections into `dcross_kv`.
  void backward_decode(const Encoding& enc, const DecodeResult& res, const Matrix& dlogits, const Vector& dvalues,
                       nn::Grads& g, std::vector<nn::KV>& dcross_kv) const;
  void backward_encode(const Encoding& enc, const std::vector<nn::KV>& dcross_kv, nn::Grads& g) const;
  std::vector<nn::KV> zero_cross_kv_grads(const Encoding& enc) const;

  int max_input_len() const { return cfg_.max_query_len + 2 + cfg_.max_response_len; }
  /// Position-embedding row of input index i. Query-side rows count backwards from SEP
  /// and response rows forwards from it, so trailing hint tokens and response steps keep
  /// their positions for any query length.
  int position_id(int i, int first_step) const {
    return i < first_step ? first_step - i : cfg_.max_query_len + 2 + (i - first_step);
  }

 private:
  struct EncoderLayer {
    nn::LayerNorm ln1, ln2;
    nn::MultiHeadAttention attn;
    nn::FeedForward ffn;
  };
  struct DecoderLayer {
    nn::LayerNorm ln1, ln2, ln3;
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::FeedForward ffn;
  };

  ModelConfig cfg_;
  Vocab vocab_;
  ImageShape shape_;
  nn::Tensors params_;
  nn::Linear patch_in_;
  std::vector<EncoderLayer> enc_;
  nn::LayerNorm enc_ln_;
  size_t tok_emb_ = 0;
  size_t pos_emb_ = 0;
  std::vector<DecoderLayer> dec_;
  nn::LayerNorm dec_ln_;
  nn::Linear lm_head_;
  nn::Linear value_head_;
};

struct ForwardOutput {
  Matrix logits;
  Vector values;
  AttentionMaps attention;
};

/// Teacher-forced forward pass; see DecodeResult for the step convention.
/// Throws std::length_error when the query or prefix exceeds the configured maxima.
ForwardOutput forward(const PolicyModel& model, const GridImage& image, const TokenSeq& query,
                      const TokenSeq& response_prefix);

/// Truncated, renormalized next-token distribution used for sampling and for the
/// policy ratio during optimization.
struct Nucleus {
  std::vector<Token> tokens;
  std::vector<double> probs;
};
Nucleus make_nucleus(const Eigen::RowVectorXd& logits, double temperature, double top_p);

struct SamplingOptions {
  int k = 8;
  double temperature = 0.9;
  double top_p = 0.9;
  bool greedy = false;
  std::uint64_t seed = 0;
};

struct SampledSequence {
  TokenSeq tokens;
  std::vector<double> logprobs;              // log-prob under the step's nucleus distribution
  std::vector<double> values;                // V(s_t) at sampling time
  std::vector<std::vector<Token>> nucleus;   // allowed tokens per step
};

std::vector<SampledSequence> sample_candidates(const PolicyModel& model, const Encoding& enc, const TokenSeq& query,
                                               const SamplingOptions& opts);
std::vector<SampledSequence> sample_candidates(const PolicyModel& model, const GridImage& image, const TokenSeq& query,
                                               const SamplingOptions& opts);

/// Argmax decoding to EOS or max length.
TokenSeq greedy_decode(const PolicyModel& model, const GridImage& image, const TokenSeq& query);

enum class HeadReduce { Mean };

/// Rows `token_steps` of the selected layer's pre-softmax cross-attention logits,
/// reduced over heads. layer < 0 selects the last layer.
Matrix cross_attention_slice(const AttentionMaps& maps, const std::vector<int>& token_steps, int layer = -1,
                             HeadReduce reduce = HeadReduce::Mean);

/// Self-describing binary checkpoint: magic, JSON header (config, vocab, shape,
/// tensor table), then raw little-endian doubles.
void save_checkpoint(const PolicyModel& model, const std::string& path);
PolicyModel load_checkpoint(const std::string& path);

}  // namespace unveil::model
