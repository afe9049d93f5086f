#pragma once

// Decoder-only caption generator conditioned on a single embedding, which
// enters the sequence as a prefix token ahead of BOS.

#include "sq/core.hpp"
#include "sq/encoders.hpp"
#include "sq/nn.hpp"

namespace sq {

template <typename T>
struct DecoderParams {
  Mat<T> tok;              // V x width
  Mat<T> pos;              // (T + 1) x width, slot 0 is the conditioning prefix
  nn::Linear<T> cond;      // embed_dim -> width
  nn::Transformer<T> tower;
  nn::LayerNorm<T> ln_final;
  nn::Linear<T> head;      // width -> V

  DecoderParams() = default;
  DecoderParams(const ModelConfig& cfg, Rng& rng)
      : tok(nn::random_normal<T>(cfg.vocab_size, cfg.dec_width, 0.02, rng)),
        pos(nn::random_normal<T>(cfg.max_len + 1, cfg.dec_width, 0.01, rng)),
        cond(cfg.embed_dim, cfg.dec_width, rng, 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim))),
        tower(cfg.dec_width, cfg.dec_depth, cfg.dec_heads, cfg.mlp_ratio, true, rng),
        ln_final(cfg.dec_width),
        head(cfg.dec_width, cfg.vocab_size, rng, 0.02) {}

  int vocab_size() const { return static_cast<int>(tok.rows()); }
  int max_len() const { return static_cast<int>(pos.rows()) - 1; }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".tok", tok);
    f(prefix + ".pos", pos);
    cond.visit(prefix + ".cond", f);
    tower.visit(prefix + ".tower", f);
    ln_final.visit(prefix + ".ln_final", f);
    head.visit(prefix + ".head", f);
  }
};

template <typename T>
struct DecoderCache {
  Mat<T> cond_in;
  TokenSequence tokens;
  typename nn::Transformer<T>::Cache tower;
  typename nn::LayerNorm<T>::Cache ln_final;
  Mat<T> normed;
};

/// Row t of the result holds the logits for token t+1 of `target`.
template <typename T>
Mat<T> teacher_forced_logits(const RowVec<T>& conditioning, const TokenSequence& target, const DecoderParams<T>& params,
                             DecoderCache<T>& cache) {
  if (target.empty() || target.front() != kBos) throw ShapeError("teacher_forced_logits: target must start with BOS");
  check_tokens(target, params.vocab_size(), params.max_len(), "teacher_forced_logits");
  if (conditioning.size() != params.cond.weight.rows()) throw ShapeError("teacher_forced_logits: conditioning dimension mismatch");
  const Eigen::Index n = static_cast<Eigen::Index>(target.size());
  cache.cond_in = conditioning;
  cache.tokens = target;
  Mat<T> x(n + 1, params.tok.cols());
  x.row(0) = params.cond.forward(cache.cond_in).row(0) + params.pos.row(0);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i + 1) = params.tok.row(target[i]) + params.pos.row(i + 1);
  const Mat<T> h = params.tower.forward(std::move(x), cache.tower);
  cache.normed = params.ln_final.forward(h.bottomRows(n), cache.ln_final);
  return params.head.forward(cache.normed);
}

template <typename T>
Mat<T> teacher_forced_logits(const RowVec<T>& conditioning, const TokenSequence& target, const DecoderParams<T>& params) {
  DecoderCache<T> cache;
  return teacher_forced_logits(conditioning, target, params, cache);
}

/// Accumulates parameter gradients; returns dL/d(conditioning).
template <typename T>
RowVec<T> teacher_forced_backward(const DecoderParams<T>& params, const DecoderCache<T>& cache, const Mat<T>& d_logits,
                                  DecoderParams<T>& grad) {
  const Eigen::Index n = static_cast<Eigen::Index>(cache.tokens.size());
  const Mat<T> d_normed = params.head.backward(cache.normed, d_logits, grad.head);
  Mat<T> dh = Mat<T>::Zero(n + 1, params.tok.cols());
  dh.bottomRows(n) = params.ln_final.backward(cache.ln_final, d_normed, grad.ln_final);
  const Mat<T> dx = params.tower.backward(cache.tower, std::move(dh), grad.tower);
  grad.pos.topRows(n + 1) += dx;
  for (Eigen::Index i = 0; i < n; ++i) grad.tok.row(cache.tokens[i]) += dx.row(i + 1);
  return params.cond.backward(cache.cond_in, dx.topRows(1), grad.cond).row(0);
}

/// Greedy decoding from BOS until EOS or `max_len` tokens. Ties resolve to
/// the lowest token id.
template <typename T>
TokenSequence generate_caption(const RowVec<T>& conditioning, const DecoderParams<T>& params, int max_len) {
  if (max_len > params.max_len()) throw ShapeError("generate_caption: max_len exceeds decoder context");
  TokenSequence seq{kBos};
  while (static_cast<int>(seq.size()) < max_len) {
    const Mat<T> logits = teacher_forced_logits(conditioning, seq, params);
    Eigen::Index next = 0;
    logits.row(logits.rows() - 1).maxCoeff(&next);
    seq.push_back(static_cast<int>(next));
    if (next == kEos) break;
  }
  return seq;
}

template <typename T>
TokenSequence generate_caption(const Embedding<T>& conditioning, const DecoderParams<T>& params, int max_len) {
  return generate_caption<T>(conditioning.values, params, max_len);
}

}  // namespace sq
