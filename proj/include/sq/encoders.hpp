#pragma once

// Visual (image + sketch), text and classifier towers, plus query fusion.
//
// The sketch tower does not exist as a separate network: a sketch is
// rasterized and pushed through the image tower with the very same
// parameter object.

#include "sq/core.hpp"
#include "sq/nn.hpp"

namespace sq {

// ---------------------------------------------------------------------------
// Visual encoder (ViT)
// ---------------------------------------------------------------------------

template <typename T>
struct VisualEncoderParams {
  nn::Linear<T> patch;  // patch_dim -> width
  Mat<T> cls;           // 1 x width
  Mat<T> pos;           // (patches + 1) x width
  nn::Transformer<T> tower;
  nn::LayerNorm<T> ln_post;
  Mat<T> proj;  // width -> embed_dim
  int image_size = 0;
  int patch_size = 0;

  VisualEncoderParams() = default;
  VisualEncoderParams(const ModelConfig& cfg, Rng& rng)
      : patch(cfg.patch_dim(), cfg.enc_width, rng, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim()))),
        cls(nn::random_normal<T>(1, cfg.enc_width, 0.02, rng)),
        pos(nn::random_normal<T>(cfg.num_patches() + 1, cfg.enc_width, 0.02, rng)),
        tower(cfg.enc_width, cfg.enc_depth, cfg.enc_heads, cfg.mlp_ratio, false, rng),
        ln_post(cfg.enc_width),
        proj(nn::random_normal<T>(cfg.enc_width, cfg.embed_dim, 1.0 / std::sqrt(static_cast<double>(cfg.enc_width)), rng)),
        image_size(cfg.image_size),
        patch_size(cfg.patch_size) {}

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    patch.visit(prefix + ".patch", f);
    f(prefix + ".cls", cls);
    f(prefix + ".pos", pos);
    tower.visit(prefix + ".tower", f);
    ln_post.visit(prefix + ".ln_post", f);
    f(prefix + ".proj", proj);
  }
};

template <typename T>
struct VisualCache {
  Mat<T> patches;
  typename nn::Transformer<T>::Cache tower;
  typename nn::LayerNorm<T>::Cache ln_post;
  Mat<T> pooled;
  RowVec<T> raw;
};

/// Splits an image into flattened patches scaled to [-1, 1].
template <typename T>
Mat<T> image_to_patches(const RasterImage& img, int patch_size) {
  const int per_row = img.width / patch_size;
  const int n = per_row * (img.height / patch_size);
  const int dim = patch_size * patch_size * RasterImage::channels;
  Mat<T> out(n, dim);
  for (int p = 0; p < n; ++p) {
    const int py = (p / per_row) * patch_size, px = (p % per_row) * patch_size;
    int k = 0;
    for (int y = 0; y < patch_size; ++y)
      for (int x = 0; x < patch_size; ++x)
        for (int c = 0; c < RasterImage::channels; ++c) out(p, k++) = static_cast<T>(img.at(py + y, px + x, c)) * T(2) - T(1);
  }
  return out;
}

template <typename T>
Embedding<T> encode_image(const RasterImage& img, const VisualEncoderParams<T>& params, VisualCache<T>& cache) {
  if (img.height != params.image_size || img.width != params.image_size ||
      img.pixels.size() != static_cast<size_t>(img.height) * img.width * RasterImage::channels)
    throw ShapeError("encode_image: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     ", model expects " + std::to_string(params.image_size));
  cache.patches = image_to_patches<T>(img, params.patch_size);
  const Eigen::Index n = cache.patches.rows(), w = params.cls.cols();
  Mat<T> x(n + 1, w);
  x.row(0) = params.cls.row(0);
  x.bottomRows(n) = params.patch.forward(cache.patches);
  x += params.pos;
  Mat<T> h = params.tower.forward(std::move(x), cache.tower);
  cache.pooled = params.ln_post.forward(h.topRows(1), cache.ln_post);
  cache.raw = cache.pooled * params.proj;
  return normalize<T>(cache.raw);
}

template <typename T>
Embedding<T> encode_image(const RasterImage& img, const VisualEncoderParams<T>& params) {
  VisualCache<T> cache;
  return encode_image(img, params, cache);
}

/// Accumulates parameter gradients given dL/d(normalized embedding).
template <typename T>
void encode_image_backward(const VisualEncoderParams<T>& params, const VisualCache<T>& cache, const RowVec<T>& d_embedding,
                           VisualEncoderParams<T>& grad) {
  const RowVec<T> d_raw = nn::normalize_backward<T>(cache.raw, d_embedding);
  grad.proj.noalias() += cache.pooled.transpose() * d_raw;
  const Mat<T> d_pooled = d_raw * params.proj.transpose();
  const Eigen::Index rows = params.pos.rows(), w = params.pos.cols();
  Mat<T> dh = Mat<T>::Zero(rows, w);
  dh.topRows(1) = params.ln_post.backward(cache.ln_post, d_pooled, grad.ln_post);
  const Mat<T> dx = params.tower.backward(cache.tower, std::move(dh), grad.tower);
  grad.pos += dx;
  grad.cls.row(0) += dx.row(0);
  params.patch.backward(cache.patches, dx.bottomRows(rows - 1), grad.patch, false);
}

template <typename T>
Embedding<T> encode_sketch(const StrokeSketch& sketch, const VisualEncoderParams<T>& params, VisualCache<T>& cache,
                           int stroke_width = 2) {
  return encode_image(rasterize(sketch, params.image_size, stroke_width), params, cache);
}

template <typename T>
Embedding<T> encode_sketch(const StrokeSketch& sketch, const VisualEncoderParams<T>& params, int stroke_width = 2) {
  VisualCache<T> cache;
  return encode_sketch(sketch, params, cache, stroke_width);
}

// ---------------------------------------------------------------------------
// Text encoder: causal transformer pooled at the EOS position.
// ---------------------------------------------------------------------------

template <typename T>
struct TextEncoderParams {
  Mat<T> tok;  // V x width
  Mat<T> pos;  // T x width
  nn::Transformer<T> tower;
  nn::LayerNorm<T> ln_final;
  Mat<T> proj;  // width -> embed_dim

  TextEncoderParams() = default;
  TextEncoderParams(const ModelConfig& cfg, Rng& rng)
      : tok(nn::random_normal<T>(cfg.vocab_size, cfg.text_width, 0.02, rng)),
        pos(nn::random_normal<T>(cfg.max_len, cfg.text_width, 0.01, rng)),
        tower(cfg.text_width, cfg.text_depth, cfg.text_heads, cfg.mlp_ratio, true, rng),
        ln_final(cfg.text_width),
        proj(nn::random_normal<T>(cfg.text_width, cfg.embed_dim, 1.0 / std::sqrt(static_cast<double>(cfg.text_width)), rng)) {}

  int vocab_size() const { return static_cast<int>(tok.rows()); }
  int max_len() const { return static_cast<int>(pos.rows()); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".tok", tok);
    f(prefix + ".pos", pos);
    tower.visit(prefix + ".tower", f);
    ln_final.visit(prefix + ".ln_final", f);
    f(prefix + ".proj", proj);
  }
};

template <typename T>
struct TextCache {
  TokenSequence tokens;
  typename nn::Transformer<T>::Cache tower;
  typename nn::LayerNorm<T>::Cache ln_final;
  Mat<T> pooled;
  RowVec<T> raw;
};

/// Drops everything after the first EOS.
inline TokenSequence trim_at_eos(const TokenSequence& seq) {
  auto it = std::find(seq.begin(), seq.end(), kEos);
  if (it == seq.end()) return seq;
  return TokenSequence(seq.begin(), it + 1);
}

inline void check_tokens(const TokenSequence& seq, int vocab_size, int max_len, const char* who) {
  if (seq.empty()) throw ShapeError(std::string(who) + ": empty token sequence");
  if (static_cast<int>(seq.size()) > max_len)
    throw ShapeError(std::string(who) + ": sequence length " + std::to_string(seq.size()) + " exceeds max " +
                     std::to_string(max_len));
  for (int id : seq)
    if (id < 0 || id >= vocab_size)
      throw ShapeError(std::string(who) + ": token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab_size));
}

template <typename T>
Embedding<T> encode_text(const TokenSequence& tokens, const TextEncoderParams<T>& params, TextCache<T>& cache) {
  for (int id : tokens)
    if (id < 0 || id >= params.vocab_size())
      throw ShapeError("encode_text: token id " + std::to_string(id) + " outside vocabulary");
  cache.tokens = trim_at_eos(tokens);
  check_tokens(cache.tokens, params.vocab_size(), params.max_len(), "encode_text");
  const Eigen::Index n = static_cast<Eigen::Index>(cache.tokens.size());
  Mat<T> x(n, params.tok.cols());
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = params.tok.row(cache.tokens[i]) + params.pos.row(i);
  Mat<T> h = params.tower.forward(std::move(x), cache.tower);
  cache.pooled = params.ln_final.forward(h.bottomRows(1), cache.ln_final);
  cache.raw = cache.pooled * params.proj;
  return normalize<T>(cache.raw);
}

template <typename T>
Embedding<T> encode_text(const TokenSequence& tokens, const TextEncoderParams<T>& params) {
  TextCache<T> cache;
  return encode_text(tokens, params, cache);
}

template <typename T>
void encode_text_backward(const TextEncoderParams<T>& params, const TextCache<T>& cache, const RowVec<T>& d_embedding,
                          TextEncoderParams<T>& grad) {
  const RowVec<T> d_raw = nn::normalize_backward<T>(cache.raw, d_embedding);
  grad.proj.noalias() += cache.pooled.transpose() * d_raw;
  const Mat<T> d_pooled = d_raw * params.proj.transpose();
  const Eigen::Index n = static_cast<Eigen::Index>(cache.tokens.size());
  Mat<T> dh = Mat<T>::Zero(n, params.tok.cols());
  dh.bottomRows(1) = params.ln_final.backward(cache.ln_final, d_pooled, grad.ln_final);
  const Mat<T> dx = params.tower.backward(cache.tower, std::move(dh), grad.tower);
  for (Eigen::Index i = 0; i < n; ++i) {
    grad.tok.row(cache.tokens[i]) += dx.row(i);
    grad.pos.row(i) += dx.row(i);
  }
}

// ---------------------------------------------------------------------------
// Query combination
// ---------------------------------------------------------------------------

/// Weight of the concat-then-project fusion, (2d) x d. Initialized to
/// [I; I] / 2 so that it starts out equal to the sum fusion.
template <typename T>
Mat<T> concat_projection_init(int dim) {
  Mat<T> p(2 * dim, dim);
  p.topRows(dim).setIdentity();
  p.bottomRows(dim).setIdentity();
  p *= T(0.5);
  return p;
}

template <typename T>
void check_unit(const Embedding<T>& e, Eigen::Index dim, const char* who) {
  if (e.dim() != dim) throw ShapeError(std::string(who) + ": embedding dimension mismatch");
  if (std::abs(static_cast<double>(e.values.norm()) - 1.0) > 1e-4)
    throw DegenerateEmbedding(std::string(who) + ": input embedding is not unit-norm");
}

template <typename T>
struct CombineCache {
  RowVec<T> raw;
};

template <typename T>
Embedding<T> combine_query(const Embedding<T>& sketch, const Embedding<T>& text, CombinationMode mode,
                           const Mat<T>* projection, CombineCache<T>& cache) {
  check_unit(sketch, sketch.dim(), "combine_query");
  check_unit(text, sketch.dim(), "combine_query");
  switch (mode) {
    case CombinationMode::Sum:
      cache.raw = sketch.values + text.values;
      break;
    case CombinationMode::Max:
      cache.raw = sketch.values.cwiseMax(text.values);
      break;
    case CombinationMode::ConcatProject: {
      if (projection == nullptr || projection->rows() != 2 * sketch.dim() || projection->cols() != sketch.dim())
        throw ShapeError("combine_query: concat mode needs a (2d x d) projection");
      const Eigen::Index d = sketch.dim();
      cache.raw = sketch.values * projection->topRows(d) + text.values * projection->bottomRows(d);
      break;
    }
  }
  if (!(cache.raw.norm() > T(0))) throw DegenerateEmbedding("combine_query: fused query has zero norm (antipodal inputs)");
  return normalize<T>(cache.raw);
}

template <typename T>
Embedding<T> combine_query(const Embedding<T>& sketch, const Embedding<T>& text, CombinationMode mode,
                           const Mat<T>* projection = nullptr) {
  CombineCache<T> cache;
  return combine_query(sketch, text, mode, projection, cache);
}

/// Gradients of the fused (normalized) query w.r.t. both inputs and the
/// projection (concat mode only).
template <typename T>
void combine_query_backward(const Embedding<T>& sketch, const Embedding<T>& text, CombinationMode mode,
                            const Mat<T>* projection, const CombineCache<T>& cache, const RowVec<T>& d_query,
                            RowVec<T>& d_sketch, RowVec<T>& d_text, Mat<T>* d_projection) {
  const RowVec<T> d_raw = nn::normalize_backward<T>(cache.raw, d_query);
  const Eigen::Index d = sketch.dim();
  switch (mode) {
    case CombinationMode::Sum:
      d_sketch = d_raw;
      d_text = d_raw;
      break;
    case CombinationMode::Max:
      d_sketch = RowVec<T>::Zero(d);
      d_text = RowVec<T>::Zero(d);
      for (Eigen::Index i = 0; i < d; ++i) {
        if (sketch.values(i) >= text.values(i))
          d_sketch(i) = d_raw(i);
        else
          d_text(i) = d_raw(i);
      }
      break;
    case CombinationMode::ConcatProject:
      d_sketch = d_raw * projection->topRows(d).transpose();
      d_text = d_raw * projection->bottomRows(d).transpose();
      if (d_projection != nullptr) {
        d_projection->topRows(d).noalias() += sketch.values.transpose() * d_raw;
        d_projection->bottomRows(d).noalias() += text.values.transpose() * d_raw;
      }
      break;
  }
}

// ---------------------------------------------------------------------------
// Classifier head: two affine layers with a ReLU in between.
// ---------------------------------------------------------------------------

template <typename T>
struct ClassifierHead {
  nn::Linear<T> fc1;
  nn::Linear<T> fc2;

  struct Cache {
    Mat<T> input;
    Mat<T> pre_act;
    Mat<T> act;
  };

  ClassifierHead() = default;
  ClassifierHead(int dim, int hidden, int labels, Rng& rng)
      : fc1(dim, hidden, rng, 1.0 / std::sqrt(static_cast<double>(dim))),
        fc2(hidden, labels, rng, 1.0 / std::sqrt(static_cast<double>(hidden))) {}

  int num_labels() const { return static_cast<int>(fc2.weight.cols()); }

  /// Raw logits, one row per input embedding.
  Mat<T> forward(const Mat<T>& embeddings, Cache& cache) const {
    if (embeddings.cols() != fc1.weight.rows()) throw ShapeError("classify: embedding dimension mismatch");
    cache.input = embeddings;
    cache.pre_act = fc1.forward(embeddings);
    cache.act = nn::relu<T>(cache.pre_act);
    return fc2.forward(cache.act);
  }

  Mat<T> backward(const Cache& cache, const Mat<T>& d_logits, ClassifierHead& grad) const {
    const Mat<T> d_act = fc2.backward(cache.act, d_logits, grad.fc2);
    return fc1.backward(cache.input, nn::relu_backward<T>(cache.pre_act, d_act), grad.fc1);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(prefix + ".fc1", f);
    fc2.visit(prefix + ".fc2", f);
  }
};

template <typename T>
RowVec<T> classify(const Embedding<T>& e, const ClassifierHead<T>& head) {
  typename ClassifierHead<T>::Cache cache;
  return head.forward(e.values, cache).row(0);
}

}  // namespace sq
