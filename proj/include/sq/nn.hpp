#pragma once

// Transformer building blocks with explicit forward/backward passes.
//
// Parameters live in plain structs; a forward call returns its activations
// in a cache object that the matching backward call consumes. Gradients are
// accumulated into a second instance of the parameter struct, so several
// forward/backward pairs can share one gradient buffer.

#include "sq/core.hpp"

#include <string>
#include <utility>
#include <vector>

namespace sq::nn {

template <typename T>
Mat<T> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
  return m;
}

// ---------------------------------------------------------------------------
// Parameter visitation helpers
// ---------------------------------------------------------------------------

template <typename T>
using NamedParam = std::pair<std::string, Mat<T>*>;

template <typename T, typename P>
std::vector<NamedParam<T>> param_list(P& params, const std::string& prefix = "") {
  std::vector<NamedParam<T>> out;
  params.visit(prefix, [&](const std::string& name, Mat<T>& m) { out.emplace_back(name, &m); });
  return out;
}

template <typename P>
P zeros_like(const P& params) {
  P z = params;
  z.visit("", [](const std::string&, auto& m) { m.setZero(); });
  return z;
}

template <typename P>
void set_zero(P& params) {
  params.visit("", [](const std::string&, auto& m) { m.setZero(); });
}

template <typename P>
size_t parameter_count(P& params) {
  size_t n = 0;
  params.visit("", [&](const std::string&, auto& m) { n += static_cast<size_t>(m.size()); });
  return n;
}

/// Converts a parameter struct between scalar types.
template <typename To, typename From, typename PTo, typename PFrom>
void cast_params(PFrom& from, PTo& to) {
  auto src = param_list<From>(from);
  auto dst = param_list<To>(to);
  if (src.size() != dst.size()) throw ShapeError("cast_params: parameter layout mismatch");
  for (size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<To>();
}

// ---------------------------------------------------------------------------
// Linear: y = x W + b, rows are tokens.
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Mat<T> weight;  // in x out
  Mat<T> bias;    // 1 x out, empty when the layer has no bias

  Linear() = default;
  Linear(int in, int out, Rng& rng, double stddev, bool with_bias = true)
      : weight(random_normal<T>(in, out, stddev, rng)) {
    if (with_bias) bias = Mat<T>::Zero(1, out);
  }

  Mat<T> forward(const Mat<T>& x) const {
    Mat<T> y = x * weight;
    if (bias.size() != 0) y.rowwise() += bias.row(0);
    return y;
  }

  /// Accumulates parameter gradients into `grad`; returns dL/dx unless
  /// `need_input_grad` is false.
  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, Linear& grad, bool need_input_grad = true) const {
    grad.weight.noalias() += x.transpose() * dy;
    if (bias.size() != 0) grad.bias.row(0) += dy.colwise().sum();
    if (!need_input_grad) return {};
    return dy * weight.transpose();
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    if (bias.size() != 0) f(prefix + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over the feature dimension of each row.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNorm {
  Mat<T> gamma;  // 1 x width
  Mat<T> beta;   // 1 x width
  static constexpr double eps = 1e-5;

  struct Cache {
    Mat<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
  };

  LayerNorm() = default;
  explicit LayerNorm(int width) : gamma(Mat<T>::Ones(1, width)), beta(Mat<T>::Zero(1, width)) {}

  Mat<T> forward(const Mat<T>& x, Cache& cache) const {
    const Eigen::Index n = x.rows(), w = x.cols();
    cache.xhat.resize(n, w);
    cache.rstd.resize(n);
    Mat<T> y(n, w);
    for (Eigen::Index i = 0; i < n; ++i) {
      const T mu = x.row(i).mean();
      const T var = (x.row(i).array() - mu).square().mean();
      const T rstd = T(1) / std::sqrt(var + T(eps));
      cache.rstd(i) = rstd;
      cache.xhat.row(i) = (x.row(i).array() - mu) * rstd;
      y.row(i) = cache.xhat.row(i).cwiseProduct(gamma.row(0)) + beta.row(0);
    }
    return y;
  }

  Mat<T> backward(const Cache& cache, const Mat<T>& dy, LayerNorm& grad) const {
    const Eigen::Index n = dy.rows(), w = dy.cols();
    grad.gamma.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
    grad.beta.row(0) += dy.colwise().sum();
    Mat<T> dx(n, w);
    for (Eigen::Index i = 0; i < n; ++i) {
      const RowVec<T> dxhat = dy.row(i).cwiseProduct(gamma.row(0));
      const T mean_d = dxhat.mean();
      const T mean_dx = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
      dx.row(i) = (dxhat.array() - mean_d - cache.xhat.row(i).array() * mean_dx) * cache.rstd(i);
    }
    return dx;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Mat<T> gelu(const Mat<T>& u) {
  const T k = T(0.7978845608028654);
  return u.unaryExpr([k](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + T(0.044715) * v * v * v))); });
}

template <typename T>
Mat<T> gelu_backward(const Mat<T>& u, const Mat<T>& dy) {
  const T k = T(0.7978845608028654);
  Mat<T> d = u.unaryExpr([k](T v) {
    const T t = std::tanh(k * (v + T(0.044715) * v * v * v));
    return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * T(0.044715) * v * v);
  });
  return d.cwiseProduct(dy);
}

template <typename T>
Mat<T> relu(const Mat<T>& u) {
  return u.cwiseMax(T(0));
}

template <typename T>
Mat<T> relu_backward(const Mat<T>& u, const Mat<T>& dy) {
  return (u.array() > T(0)).select(dy, T(0));
}

/// Row-wise softmax. Entries above the diagonal are excluded when `causal`.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& s, bool causal = false) {
  Mat<T> p = Mat<T>::Zero(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index n = causal ? std::min<Eigen::Index>(i + 1, s.cols()) : s.cols();
    const T m = s.row(i).head(n).maxCoeff();
    T z = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      p(i, j) = std::exp(s(i, j) - m);
      z += p(i, j);
    }
    p.row(i).head(n) /= z;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

template <typename T>
struct Attention {
  Linear<T> qkv;  // width -> 3*width
  Linear<T> out;  // width -> width
  int heads = 1;

  struct Cache {
    Mat<T> x;
    Mat<T> qkv;
    std::vector<Mat<T>> probs;
    Mat<T> context;
  };

  Attention() = default;
  Attention(int width, int n_heads, Rng& rng, double stddev, double out_stddev)
      : qkv(width, 3 * width, rng, stddev), out(width, width, rng, out_stddev), heads(n_heads) {}

  Mat<T> forward(const Mat<T>& x, bool causal, Cache& cache) const {
    const Eigen::Index n = x.rows(), w = out.weight.rows(), dh = w / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    cache.x = x;
    cache.qkv = qkv.forward(x);
    cache.probs.resize(heads);
    cache.context.resize(n, w);
    for (int h = 0; h < heads; ++h) {
      const auto q = cache.qkv.middleCols(h * dh, dh);
      const auto k = cache.qkv.middleCols(w + h * dh, dh);
      const auto v = cache.qkv.middleCols(2 * w + h * dh, dh);
      Mat<T> s = (q * k.transpose()) * scale;
      cache.probs[h] = softmax_rows<T>(s, causal);
      cache.context.middleCols(h * dh, dh).noalias() = cache.probs[h] * v;
    }
    return out.forward(cache.context);
  }

  Mat<T> backward(const Cache& cache, const Mat<T>& dy, Attention& grad) const {
    const Eigen::Index n = cache.x.rows(), w = out.weight.rows(), dh = w / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const Mat<T> dctx = out.backward(cache.context, dy, grad.out);
    Mat<T> dqkv(n, 3 * w);
    for (int h = 0; h < heads; ++h) {
      const auto q = cache.qkv.middleCols(h * dh, dh);
      const auto k = cache.qkv.middleCols(w + h * dh, dh);
      const auto v = cache.qkv.middleCols(2 * w + h * dh, dh);
      const Mat<T>& p = cache.probs[h];
      const auto dc = dctx.middleCols(h * dh, dh);
      const Mat<T> dp = dc * v.transpose();
      dqkv.middleCols(2 * w + h * dh, dh).noalias() = p.transpose() * dc;
      Mat<T> ds = p.cwiseProduct(dp);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = ds.rowwise().sum();
      ds -= p.cwiseProduct(rowdot.replicate(1, p.cols()));
      ds *= scale;
      dqkv.middleCols(h * dh, dh).noalias() = ds * k;
      dqkv.middleCols(w + h * dh, dh).noalias() = ds.transpose() * q;
    }
    return qkv.backward(cache.x, dqkv, grad.qkv);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    qkv.visit(prefix + ".qkv", f);
    out.visit(prefix + ".out", f);
  }
};

// ---------------------------------------------------------------------------
// Pre-norm transformer block: x + attn(ln(x)), then h + mlp(ln(h)).
// ---------------------------------------------------------------------------

template <typename T>
struct Block {
  LayerNorm<T> ln1;
  Attention<T> attn;
  LayerNorm<T> ln2;
  Linear<T> fc1;
  Linear<T> fc2;

  struct Cache {
    typename LayerNorm<T>::Cache ln1;
    typename Attention<T>::Cache attn;
    typename LayerNorm<T>::Cache ln2;
    Mat<T> mlp_in;
    Mat<T> pre_act;
    Mat<T> act;
  };

  Block() = default;
  Block(int width, int heads, int mlp_ratio, int depth, Rng& rng)
      : ln1(width),
        attn(width, heads, rng, 0.02, 0.02 / std::sqrt(2.0 * depth)),
        ln2(width),
        fc1(width, mlp_ratio * width, rng, 0.02),
        fc2(mlp_ratio * width, width, rng, 0.02 / std::sqrt(2.0 * depth)) {}

  Mat<T> forward(const Mat<T>& x, bool causal, Cache& c) const {
    Mat<T> h = x + attn.forward(ln1.forward(x, c.ln1), causal, c.attn);
    c.mlp_in = ln2.forward(h, c.ln2);
    c.pre_act = fc1.forward(c.mlp_in);
    c.act = gelu<T>(c.pre_act);
    h += fc2.forward(c.act);
    return h;
  }

  Mat<T> backward(const Cache& c, const Mat<T>& dy, Block& g) const {
    Mat<T> dact = fc2.backward(c.act, dy, g.fc2);
    Mat<T> dpre = gelu_backward<T>(c.pre_act, dact);
    Mat<T> dmlp_in = fc1.backward(c.mlp_in, dpre, g.fc1);
    Mat<T> dh = dy + ln2.backward(c.ln2, dmlp_in, g.ln2);
    Mat<T> da = attn.backward(c.attn, dh, g.attn);
    return dh + ln1.backward(c.ln1, da, g.ln1);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(prefix + ".ln1", f);
    attn.visit(prefix + ".attn", f);
    ln2.visit(prefix + ".ln2", f);
    fc1.visit(prefix + ".fc1", f);
    fc2.visit(prefix + ".fc2", f);
  }
};

template <typename T>
struct Transformer {
  std::vector<Block<T>> blocks;
  bool causal = false;

  using Cache = std::vector<typename Block<T>::Cache>;

  Transformer() = default;
  Transformer(int width, int depth, int heads, int mlp_ratio, bool is_causal, Rng& rng) : causal(is_causal) {
    blocks.reserve(depth);
    for (int i = 0; i < depth; ++i) blocks.emplace_back(width, heads, mlp_ratio, depth, rng);
  }

  Mat<T> forward(Mat<T> x, Cache& cache) const {
    cache.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) x = blocks[i].forward(x, causal, cache[i]);
    return x;
  }

  Mat<T> backward(const Cache& cache, Mat<T> dy, Transformer& grad) const {
    for (size_t i = blocks.size(); i-- > 0;) dy = blocks[i].backward(cache[i], dy, grad.blocks[i]);
    return dy;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".blocks." + std::to_string(i), f);
  }
};

/// Backward of y = x / ||x|| for a row vector.
template <typename T>
RowVec<T> normalize_backward(const RowVec<T>& raw, const RowVec<T>& dy) {
  const T n = raw.norm();
  const RowVec<T> y = raw / n;
  return (dy - y * y.dot(dy)) / n;
}

}  // namespace sq::nn
