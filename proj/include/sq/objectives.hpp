#pragma once

// Training objectives: symmetric contrastive loss, asymmetric multi-label
// loss, teacher-forced caption loss and their weighted sum. Every loss
// returns its value together with the gradient w.r.t. its inputs.

#include "sq/core.hpp"
#include "sq/nn.hpp"

#include <cmath>
#include <vector>

namespace sq {

inline constexpr double kProbClamp = 1e-8;

// ---------------------------------------------------------------------------
// Symmetric InfoNCE
// ---------------------------------------------------------------------------

template <typename T>
struct EmbeddingLoss {
  T value = 0;
  Mat<T> d_queries;
  Mat<T> d_images;
  T d_temperature = 0;
};

/// Cross entropy over the rows and over the columns of Q I^T / tau with the
/// diagonal as targets, averaged.
template <typename T>
EmbeddingLoss<T> embedding_loss(const Mat<T>& queries, const Mat<T>& images, T temperature) {
  const Eigen::Index n = queries.rows();
  if (n == 0) throw ShapeError("embedding_loss: empty batch");
  if (images.rows() != n || images.cols() != queries.cols()) throw ShapeError("embedding_loss: Q and I shapes differ");
  if (!(temperature > T(0))) throw ShapeError("embedding_loss: temperature must be positive");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(static_cast<double>(queries.row(i).norm()) - 1.0) > 1e-4 ||
        std::abs(static_cast<double>(images.row(i).norm()) - 1.0) > 1e-4)
      throw DegenerateEmbedding("embedding_loss: row " + std::to_string(i) + " is not unit-norm");
  }
  const Mat<T> s = (queries * images.transpose()) / temperature;
  const Mat<T> p_rows = nn::softmax_rows<T>(s);
  const Mat<T> p_cols = nn::softmax_rows<T>(Mat<T>(s.transpose())).transpose();

  T row_ce = 0, col_ce = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    row_ce -= std::log(std::max(p_rows(i, i), T(kProbClamp)));
    col_ce -= std::log(std::max(p_cols(i, i), T(kProbClamp)));
  }
  EmbeddingLoss<T> out;
  out.value = (row_ce + col_ce) / (T(2) * static_cast<T>(n));

  Mat<T> ds = (p_rows + p_cols) / (T(2) * static_cast<T>(n));
  ds.diagonal().array() -= T(1) / static_cast<T>(n);
  out.d_queries = (ds * images) / temperature;
  out.d_images = (ds.transpose() * queries) / temperature;
  out.d_temperature = -(ds.cwiseProduct(s)).sum() / temperature;
  return out;
}

// ---------------------------------------------------------------------------
// Asymmetric loss (multi-label)
// ---------------------------------------------------------------------------

struct AslParams {
  double gamma_pos = 0.0;
  double gamma_neg = 4.0;
  double margin = 0.05;
};

template <typename T>
struct AslLoss {
  T value = 0;
  Mat<T> d_logits;
};

/// Per entry, with p = sigmoid(x):
///   positive: (1-p)^g+ * -log(p)
///   negative: p_m^g- * -log(1-p_m), p_m = max(p - m, 0)
/// averaged over all entries.
template <typename T>
AslLoss<T> asl_loss(const Mat<T>& logits, const Mat<uint8_t>& labels, const AslParams& prm) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols()) throw ShapeError("asl_loss: shape mismatch");
  if (prm.gamma_pos < 0 || prm.gamma_neg < 0 || prm.margin < 0 || prm.margin >= 1)
    throw ShapeError("asl_loss: invalid focusing/margin parameters");
  const T eps = T(kProbClamp);
  const T gp = T(prm.gamma_pos), gn = T(prm.gamma_neg), m = T(prm.margin);
  const Eigen::Index count = logits.size();
  AslLoss<T> out;
  out.d_logits = Mat<T>::Zero(logits.rows(), logits.cols());
  if (count == 0) return out;
  T total = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const T x = logits(i, j);
      const T p = T(1) / (T(1) + std::exp(-x));
      T loss = 0, grad = 0;
      if (labels(i, j)) {
        const T q = T(1) - p;
        const T focus = gp == T(0) ? T(1) : std::pow(q, gp);
        if (p > eps) {
          loss = -focus * std::log(p);
          // d/dx [(1-p)^g * -log p] = (1-p)^g * (g p log p - (1-p))
          grad = focus * (gp * p * std::log(p) - q);
        } else {
          loss = -focus * std::log(eps);
          grad = gp == T(0) ? T(0) : gp * std::pow(q, gp - T(1)) * std::log(eps) * p * q;
        }
      } else {
        const T pm = std::max(p - m, T(0));
        if (pm > T(0)) {
          const T r = T(1) - pm;
          const T focus = gn == T(0) ? T(1) : std::pow(pm, gn);
          const T dp_dx = p * (T(1) - p);
          if (r > eps) {
            loss = -focus * std::log(r);
            const T dfocus = gn == T(0) ? T(0) : gn * std::pow(pm, gn - T(1));
            grad = (-dfocus * std::log(r) + focus / r) * dp_dx;
          } else {
            loss = -focus * std::log(eps);
            const T dfocus = gn == T(0) ? T(0) : gn * std::pow(pm, gn - T(1));
            grad = -dfocus * std::log(eps) * dp_dx;
          }
        }
      }
      total += loss;
      out.d_logits(i, j) = grad / static_cast<T>(count);
    }
  }
  out.value = total / static_cast<T>(count);
  return out;
}

// ---------------------------------------------------------------------------
// Caption loss (teacher forcing)
// ---------------------------------------------------------------------------

/// Number of positions that carry a prediction target: row t predicts
/// token t+1, and nothing is predicted from EOS onwards.
inline int caption_positions(const TokenSequence& target) {
  int n = 0;
  for (size_t t = 0; t + 1 < target.size(); ++t) {
    if (target[t] == kEos) break;
    ++n;
  }
  return n;
}

template <typename T>
struct CaptionLoss {
  T value = 0;
  std::vector<Mat<T>> d_logits;
  int positions = 0;
};

/// Mean over all unmasked positions in the batch of -log softmax(row)[next].
/// `logits[i]` has one row per position of `targets[i]` (at least up to the
/// last unmasked one); rows beyond the mask receive zero gradient.
template <typename T>
CaptionLoss<T> caption_loss(const std::vector<Mat<T>>& logits, const std::vector<TokenSequence>& targets) {
  if (logits.size() != targets.size()) throw ShapeError("caption_loss: batch size mismatch");
  CaptionLoss<T> out;
  for (size_t i = 0; i < targets.size(); ++i) {
    const int n = caption_positions(targets[i]);
    if (n == 0) throw ShapeError("caption_loss: target " + std::to_string(i) + " has no position after BOS");
    if (logits[i].rows() < n) throw ShapeError("caption_loss: too few logit rows");
    out.positions += n;
  }
  T total = 0;
  out.d_logits.resize(logits.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    const Mat<T>& z = logits[i];
    out.d_logits[i] = Mat<T>::Zero(z.rows(), z.cols());
    const int n = caption_positions(targets[i]);
    for (int t = 0; t < n; ++t) {
      const int next = targets[i][t + 1];
      if (next < 0 || next >= z.cols()) throw ShapeError("caption_loss: target id outside vocabulary");
      const T mx = z.row(t).maxCoeff();
      const RowVec<T> e = (z.row(t).array() - mx).exp();
      const T sum = e.sum();
      total -= (z(t, next) - mx) - std::log(sum);
      out.d_logits[i].row(t) = e / sum;
      out.d_logits[i](t, next) -= T(1);
    }
  }
  const T denom = static_cast<T>(out.positions);
  for (auto& d : out.d_logits) d /= denom;
  out.value = total / denom;
  return out;
}

// ---------------------------------------------------------------------------
// Weighted combination
// ---------------------------------------------------------------------------

struct LossWeights {
  double w_e = 100.0;
  double w_c = 10.0;
  double w_d = 1.0;
};

struct LossBreakdown {
  double l_e = 0;
  double l_c = 0;
  double l_d = 0;
  double total = 0;
};

inline LossBreakdown total_loss(double l_e, double l_c, double l_d, const LossWeights& w = {}) {
  if (!std::isfinite(l_e) || !std::isfinite(l_c) || !std::isfinite(l_d))
    throw NonFiniteLoss("total_loss: non-finite component (l_e=" + std::to_string(l_e) + ", l_c=" + std::to_string(l_c) +
                        ", l_d=" + std::to_string(l_d) + ")");
  return {l_e, l_c, l_d, w.w_c * l_c + w.w_d * l_d + w.w_e * l_e};
}

inline LossWeights weights_of(const ModelConfig& cfg) { return {cfg.w_e, cfg.w_c, cfg.w_d}; }
inline AslParams asl_of(const ModelConfig& cfg) { return {cfg.asl_gamma_pos, cfg.asl_gamma_neg, cfg.asl_margin}; }

}  // namespace sq
