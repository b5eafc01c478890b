#include "unveil/nn.hpp"

#include <cmath>
#include <limits>

namespace unveil::nn {

size_t Tensors::add(std::string name, Matrix init, bool apply_decay) {
  names.push_back(std::move(name));
  values.push_back(std::move(init));
  decay.push_back(apply_decay ? 1 : 0);
  return values.size() - 1;
}

size_t Tensors::parameter_count() const {
  size_t n = 0;
  for (const auto& v : values) n += static_cast<size_t>(v.size());
  return n;
}

Grads zeros_like(const Tensors& t) {
  Grads g;
  g.reserve(t.size());
  for (const auto& v : t.values) g.push_back(Matrix::Zero(v.rows(), v.cols()));
  return g;
}

void add_into(Grads& acc, const Grads& g, double scale) {
  for (size_t i = 0; i < acc.size(); ++i) acc[i] += scale * g[i];
}

double global_norm(const Grads& g) {
  double s = 0.0;
  for (const auto& m : g) s += m.squaredNorm();
  return std::sqrt(s);
}

Matrix random_normal(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) m(i, j) = normal(rng);
  }
  return m;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    if (!std::isfinite(mx)) {
      out.row(i).setZero();
      continue;
    }
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Linear Linear::create(Tensors& t, const std::string& name, int in, int out, std::mt19937_64& rng, double gain) {
  Linear l;
  l.w = t.add(name + ".w", random_normal(in, out, gain / std::sqrt(static_cast<double>(in)), rng), true);
  l.b = t.add(name + ".b", Matrix::Zero(1, out), false);
  return l;
}

Matrix Linear::forward(const Tensors& p, const Matrix& x) const {
  Matrix y = x * p[w];
  y.rowwise() += p[b].row(0);
  return y;
}

Matrix Linear::backward(const Tensors& p, Grads& g, const Matrix& x, const Matrix& dy) const {
  g[w].noalias() += x.transpose() * dy;
  g[b] += dy.colwise().sum();
  return dy * p[w].transpose();
}

LayerNorm LayerNorm::create(Tensors& t, const std::string& name, int dim) {
  LayerNorm ln;
  ln.gamma = t.add(name + ".gamma", Matrix::Ones(1, dim), false);
  ln.beta = t.add(name + ".beta", Matrix::Zero(1, dim), false);
  return ln;
}

namespace {
constexpr double kLnEps = 1e-5;
}

Matrix LayerNorm::forward(const Tensors& p, const Matrix& x, Cache& cache) const {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).sum() / d;
    const auto xc = (x.row(i).array() - mu).matrix();
    const double var = xc.squaredNorm() / d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = xc * rstd;
  }
  Matrix y = cache.xhat.array().rowwise() * p[gamma].row(0).array();
  y.rowwise() += p[beta].row(0);
  return y;
}

Matrix LayerNorm::backward(const Tensors& p, Grads& g, const Cache& cache, const Matrix& dy) const {
  g[gamma] += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  g[beta] += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * p[gamma].row(0).array();
  const auto d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).sum() / d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(cache.xhat.row(i)) / d;
    dx.row(i) = cache.rstd(i) *
                (dxhat.row(i).array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

MultiHeadAttention MultiHeadAttention::create(Tensors& t, const std::string& name, int d_model, int heads,
                                              std::mt19937_64& rng) {
  if (heads <= 0 || d_model % heads != 0) throw std::invalid_argument("attention: d_model must be divisible by heads");
  MultiHeadAttention a;
  a.heads = heads;
  a.d_model = d_model;
  a.q = Linear::create(t, name + ".q", d_model, d_model, rng);
  a.k = Linear::create(t, name + ".k", d_model, d_model, rng);
  a.v = Linear::create(t, name + ".v", d_model, d_model, rng);
  a.o = Linear::create(t, name + ".o", d_model, d_model, rng);
  return a;
}

KV MultiHeadAttention::project(const Tensors& p, const Matrix& source) const {
  return KV{k.forward(p, source), v.forward(p, source)};
}

Matrix MultiHeadAttention::attend(const Tensors& p, const Matrix& x, const KV& kv, bool causal,
                                  AttentionCache& cache) const {
  const int dk = d_k();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  cache.q = q.forward(p, x);
  cache.logits.resize(static_cast<size_t>(heads));
  cache.probs.resize(static_cast<size_t>(heads));
  cache.context.resize(x.rows(), d_model);
  for (int h = 0; h < heads; ++h) {
    Matrix s = (cache.q.middleCols(h * dk, dk) * kv.k.middleCols(h * dk, dk).transpose()) * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = -std::numeric_limits<double>::infinity();
      }
    }
    Matrix a = softmax_rows(s);
    cache.context.middleCols(h * dk, dk).noalias() = a * kv.v.middleCols(h * dk, dk);
    cache.logits[static_cast<size_t>(h)] = std::move(s);
    cache.probs[static_cast<size_t>(h)] = std::move(a);
  }
  return o.forward(p, cache.context);
}

Matrix MultiHeadAttention::backward_attend(const Tensors& p, Grads& g, const Matrix& x, const KV& kv, bool causal,
                                           const AttentionCache& cache, const Matrix& dy, KV& dkv) const {
  (void)causal;  // masked entries have zero probability, so their gradient vanishes
  const int dk = d_k();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const Matrix dctx = o.backward(p, g, cache.context, dy);
  Matrix dq(x.rows(), d_model);
  for (int h = 0; h < heads; ++h) {
    const Matrix& a = cache.probs[static_cast<size_t>(h)];
    const auto dctx_h = dctx.middleCols(h * dk, dk);
    const Matrix da = dctx_h * kv.v.middleCols(h * dk, dk).transpose();
    dkv.v.middleCols(h * dk, dk).noalias() += a.transpose() * dctx_h;
    const Eigen::VectorXd row_dot = (da.array() * a.array()).rowwise().sum();
    Matrix ds = (a.array() * (da.array().colwise() - row_dot.array())).matrix() * scale;
    dq.middleCols(h * dk, dk).noalias() = ds * kv.k.middleCols(h * dk, dk);
    dkv.k.middleCols(h * dk, dk).noalias() += ds.transpose() * cache.q.middleCols(h * dk, dk);
  }
  return q.backward(p, g, x, dq);
}

Matrix MultiHeadAttention::backward_project(const Tensors& p, Grads& g, const Matrix& source, const KV& dkv) const {
  Matrix dsrc = k.backward(p, g, source, dkv.k);
  dsrc += v.backward(p, g, source, dkv.v);
  return dsrc;
}

FeedForward FeedForward::create(Tensors& t, const std::string& name, int d_model, int d_ff, std::mt19937_64& rng) {
  FeedForward f;
  f.in = Linear::create(t, name + ".in", d_model, d_ff, rng);
  f.out = Linear::create(t, name + ".out", d_ff, d_model, rng);
  return f;
}

Matrix FeedForward::forward(const Tensors& p, const Matrix& x, Cache& cache) const {
  cache.pre = in.forward(p, x);
  cache.act = gelu(cache.pre);
  return out.forward(p, cache.act);
}

Matrix FeedForward::backward(const Tensors& p, Grads& g, const Matrix& x, const Cache& cache, const Matrix& dy) const {
  const Matrix dact = out.backward(p, g, cache.act, dy);
  const Matrix dpre = (dact.array() * gelu_grad(cache.pre).array()).matrix();
  return in.backward(p, g, x, dpre);
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); });
}

Matrix gelu_grad(const Matrix& x) {
  return x.unaryExpr([](double v) {
    const double u = kGeluC * (v + kGeluA * v * v * v);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
  });
}

}  // namespace unveil::nn
