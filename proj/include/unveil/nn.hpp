#pragma once

#include "unveil/core.hpp"

#include <random>
#include <string>
#include <vector>

namespace unveil::nn {

/// Flat, named parameter storage. Layers hold indices into it, so copying a model
/// is a plain value copy of this struct.
struct Tensors {
  std::vector<std::string> names;
  std::vector<Matrix> values;
  std::vector<char> decay;  // weight decay applies to this tensor

  size_t add(std::string name, Matrix init, bool apply_decay);
  size_t size() const { return values.size(); }
  Matrix& operator[](size_t i) { return values[i]; }
  const Matrix& operator[](size_t i) const { return values[i]; }
  size_t parameter_count() const;
};

using Grads = std::vector<Matrix>;

Grads zeros_like(const Tensors& t);
void add_into(Grads& acc, const Grads& g, double scale = 1.0);
double global_norm(const Grads& g);

Matrix random_normal(int rows, int cols, double stddev, std::mt19937_64& rng);

/// Row-wise softmax; a row whose maximum is -inf becomes all zeros.
Matrix softmax_rows(const Matrix& logits);

struct Linear {
  size_t w = 0;
  size_t b = 0;

  static Linear create(Tensors& t, const std::string& name, int in, int out, std::mt19937_64& rng, double gain = 1.0);
  Matrix forward(const Tensors& p, const Matrix& x) const;
  /// Accumulates parameter gradients, returns dL/dx.
  Matrix backward(const Tensors& p, Grads& g, const Matrix& x, const Matrix& dy) const;
};

struct LayerNorm {
  size_t gamma = 0;
  size_t beta = 0;
  struct Cache {
    Matrix xhat;
    Vector rstd;
  };

  static LayerNorm create(Tensors& t, const std::string& name, int dim);
  Matrix forward(const Tensors& p, const Matrix& x, Cache& cache) const;
  Matrix backward(const Tensors& p, Grads& g, const Cache& cache, const Matrix& dy) const;
};

struct KV {
  Matrix k;
  Matrix v;
};

struct AttentionCache {
  Matrix q;
  std::vector<Matrix> logits;  // per head, pre-softmax Q K^T / sqrt(d_k)
  std::vector<Matrix> probs;   // per head
  Matrix context;              // concatenated head outputs, before the output projection
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;
  int d_model = 0;

  static MultiHeadAttention create(Tensors& t, const std::string& name, int d_model, int heads, std::mt19937_64& rng);
  int d_k() const { return d_model / heads; }

  KV project(const Tensors& p, const Matrix& source) const;
  Matrix attend(const Tensors& p, const Matrix& x, const KV& kv, bool causal, AttentionCache& cache) const;
  /// Returns dL/dx and accumulates dL/dK, dL/dV into `dkv` (which must be sized like kv).
  Matrix backward_attend(const Tensors& p, Grads& g, const Matrix& x, const KV& kv, bool causal,
                         const AttentionCache& cache, const Matrix& dy, KV& dkv) const;
  /// Backpropagates accumulated K/V gradients into the projection and returns dL/dsource.
  Matrix backward_project(const Tensors& p, Grads& g, const Matrix& source, const KV& dkv) const;
};

struct FeedForward {
  Linear in, out;
  struct Cache {
    Matrix pre;
    Matrix act;
  };

  static FeedForward create(Tensors& t, const std::string& name, int d_model, int d_ff, std::mt19937_64& rng);
  Matrix forward(const Tensors& p, const Matrix& x, Cache& cache) const;
  Matrix backward(const Tensors& p, Grads& g, const Matrix& x, const Cache& cache, const Matrix& dy) const;
};

/// tanh-approximated GELU and its derivative.
Matrix gelu(const Matrix& x);
Matrix gelu_grad(const Matrix& x);

}  // namespace unveil::nn
