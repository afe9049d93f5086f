#pragma once

// Synthetic sketches and the sketch/image/query augmentations used during
// training and by the robustness sweeps.

#include "sq/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

namespace sq {

// ---------------------------------------------------------------------------
// Edge-trace sketch synthesis
//
// Pipeline: dual-grid gradient magnitude (max over channels), threshold at
// the 90th percentile, Zhang-Suen thinning, 8-connected chain following, then
// Douglas-Peucker simplification.
// ---------------------------------------------------------------------------

struct SynthesisOptions {
  double percentile = 0.90;
  double min_magnitude = 0.05;
  double simplify_tolerance_px = 1.5;
  int min_chain_pixels = 2;
};

namespace detail {

/// Gradient magnitude on the dual grid: entry (y, x) measures the 2x2 block
/// of pixels whose shared corner sits at (x - 0.5, y - 0.5), so a step edge
/// between two pixel rows yields a single-pixel response. Row and column 0
/// stay zero. Max over channels.
inline std::vector<double> corner_gradient_magnitude(const RasterImage& img) {
  const int h = img.height, w = img.width;
  std::vector<double> mag(static_cast<size_t>(h) * w, 0.0);
  for (int y = 1; y < h; ++y) {
    for (int x = 1; x < w; ++x) {
      double best = 0.0;
      for (int c = 0; c < RasterImage::channels; ++c) {
        const double a = img.at(y - 1, x - 1, c), b = img.at(y - 1, x, c), d = img.at(y, x - 1, c), e = img.at(y, x, c);
        const double gx = (b + e) - (a + d);
        const double gy = (d + e) - (a + b);
        best = std::max(best, std::hypot(gx, gy));
      }
      mag[static_cast<size_t>(y) * w + x] = best;
    }
  }
  return mag;
}

/// Zhang-Suen thinning of a binary mask in place.
inline void thin(std::vector<uint8_t>& m, int h, int w) {
  auto at = [&](int y, int x) -> int {
    if (y < 0 || x < 0 || y >= h || x >= w) return 0;
    return m[static_cast<size_t>(y) * w + x];
  };
  bool changed = true;
  std::vector<size_t> kill;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      kill.clear();
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (!at(y, x)) continue;
          // P2..P9 clockwise from north.
          const std::array<int, 8> p{at(y - 1, x), at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1),
                                     at(y + 1, x), at(y + 1, x - 1), at(y, x - 1), at(y - 1, x - 1)};
          int b = 0, a = 0;
          for (int i = 0; i < 8; ++i) {
            b += p[i];
            if (p[i] == 0 && p[(i + 1) % 8] == 1) ++a;
          }
          if (b < 2 || b > 6 || a != 1) continue;
          if (pass == 0) {
            if (p[0] * p[2] * p[4] != 0 || p[2] * p[4] * p[6] != 0) continue;
          } else {
            if (p[0] * p[2] * p[6] != 0 || p[0] * p[4] * p[6] != 0) continue;
          }
          kill.push_back(static_cast<size_t>(y) * w + x);
        }
      }
      for (size_t k : kill) m[k] = 0;
      if (!kill.empty()) changed = true;
    }
  }
}

struct PixelPt {
  int x, y;
};

inline double point_segment_distance(const PixelPt& p, const PixelPt& a, const PixelPt& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  if (len2 == 0.0) return std::hypot(p.x - a.x, p.y - a.y);
  const double t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / len2, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

inline void douglas_peucker(const std::vector<PixelPt>& pts, size_t lo, size_t hi, double tol, std::vector<uint8_t>& keep) {
  if (hi <= lo + 1) return;
  double best = -1.0;
  size_t idx = lo;
  for (size_t i = lo + 1; i < hi; ++i) {
    const double d = point_segment_distance(pts[i], pts[lo], pts[hi]);
    if (d > best) {
      best = d;
      idx = i;
    }
  }
  if (best > tol) {
    keep[idx] = 1;
    douglas_peucker(pts, lo, idx, tol, keep);
    douglas_peucker(pts, idx, hi, tol, keep);
  }
}

inline std::vector<PixelPt> simplify(const std::vector<PixelPt>& pts, double tol) {
  if (pts.size() <= 2) return pts;
  std::vector<uint8_t> keep(pts.size(), 0);
  keep.front() = keep.back() = 1;
  douglas_peucker(pts, 0, pts.size() - 1, tol, keep);
  std::vector<PixelPt> out;
  for (size_t i = 0; i < pts.size(); ++i)
    if (keep[i]) out.push_back(pts[i]);
  return out;
}

/// Splits a thinned mask into pixel chains, starting from chain endpoints
/// and then from whatever closed loops remain.
inline std::vector<std::vector<PixelPt>> trace_chains(std::vector<uint8_t> m, int h, int w) {
  static constexpr std::array<std::array<int, 2>, 8> kNbr{{{0, -1}, {1, 0}, {0, 1}, {-1, 0}, {1, -1}, {1, 1}, {-1, 1}, {-1, -1}}};
  auto on = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && m[static_cast<size_t>(y) * w + x]; };
  auto degree = [&](int x, int y) {
    int d = 0;
    for (const auto& o : kNbr) d += on(x + o[0], y + o[1]) ? 1 : 0;
    return d;
  };
  std::vector<std::vector<PixelPt>> chains;
  auto follow = [&](int x, int y) {
    std::vector<PixelPt> chain{{x, y}};
    m[static_cast<size_t>(y) * w + x] = 0;
    while (true) {
      bool moved = false;
      for (const auto& o : kNbr) {
        const int nx = x + o[0], ny = y + o[1];
        if (on(nx, ny)) {
          x = nx;
          y = ny;
          m[static_cast<size_t>(y) * w + x] = 0;
          chain.push_back({x, y});
          moved = true;
          break;
        }
      }
      if (!moved) break;
    }
    if (chain.size() >= 3 && std::abs(chain.back().x - chain.front().x) <= 1 && std::abs(chain.back().y - chain.front().y) <= 1)
      chain.push_back(chain.front());
    chains.push_back(std::move(chain));
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (on(x, y) && degree(x, y) == 1) follow(x, y);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (on(x, y)) follow(x, y);
  return chains;
}

}  // namespace detail

inline StrokeSketch synthesize_sketch(const RasterImage& img, const SynthesisOptions& opt = {}) {
  StrokeSketch out;
  out.canvas_aspect = img.height > 0 ? static_cast<double>(img.width) / img.height : 1.0;
  const int h = img.height, w = img.width;
  if (h < 2 || w < 2) return out;
  const std::vector<double> mag = detail::corner_gradient_magnitude(img);
  std::vector<double> sorted = mag;
  const size_t k = std::min(sorted.size() - 1, static_cast<size_t>(opt.percentile * static_cast<double>(sorted.size())));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  const double threshold = std::max(sorted[k], opt.min_magnitude);

  std::vector<uint8_t> mask(mag.size(), 0);
  for (size_t i = 0; i < mag.size(); ++i) mask[i] = mag[i] > threshold ? 1 : 0;
  detail::thin(mask, h, w);

  for (const auto& chain : detail::trace_chains(std::move(mask), h, w)) {
    if (static_cast<int>(chain.size()) < opt.min_chain_pixels) continue;
    Stroke s;
    for (const auto& p : detail::simplify(chain, opt.simplify_tolerance_px))
      s.points.push_back({clamp01((p.x - 0.5) / (w - 1)), clamp01((p.y - 0.5) / (h - 1))});
    if (s.points.size() >= 2) out.strokes.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Affine augmentation
// ---------------------------------------------------------------------------

struct AffineParams {
  double rotation_deg = 0.0;
  double tx = 0.0;
  double ty = 0.0;
  double scale = 1.0;
  double shear_deg = 0.0;
  uint64_t seed = 0;

  bool operator==(const AffineParams&) const = default;
};

struct AffineRanges {
  double rotation_deg = 10.0;
  double translation = 0.10;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double shear_deg = 5.0;
};

inline AffineParams sample_affine(const AffineRanges& r, uint64_t seed) {
  Rng rng(seed);
  AffineParams p;
  p.rotation_deg = rng.uniform(-r.rotation_deg, r.rotation_deg);
  p.tx = rng.uniform(-r.translation, r.translation);
  p.ty = rng.uniform(-r.translation, r.translation);
  p.scale = rng.uniform(r.scale_min, r.scale_max);
  p.shear_deg = rng.uniform(-r.shear_deg, r.shear_deg);
  p.seed = seed;
  return p;
}

/// Linear part: rotation * shear * scale.
inline Eigen::Matrix2d affine_linear(const AffineParams& p) {
  const double th = p.rotation_deg * M_PI / 180.0;
  Eigen::Matrix2d rot;
  rot << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  Eigen::Matrix2d shear;
  shear << 1.0, std::tan(p.shear_deg * M_PI / 180.0), 0.0, 1.0;
  return rot * shear * p.scale;
}

/// Maps a point about the canvas center (0.5, 0.5) without clamping.
inline Point apply_affine(const Point& pt, const AffineParams& p) {
  const Eigen::Vector2d v = affine_linear(p) * Eigen::Vector2d(pt.x - 0.5, pt.y - 0.5);
  return {v.x() + 0.5 + p.tx, v.y() + 0.5 + p.ty};
}

inline StrokeSketch random_affine(const StrokeSketch& sketch, const AffineParams& p) {
  StrokeSketch out = sketch;
  for (auto& s : out.strokes) {
    for (auto& pt : s.points) {
      const Point q = apply_affine(pt, p);
      pt = {clamp01(q.x), clamp01(q.y)};
    }
  }
  return out;
}

/// Warps an image with the same map (nearest-neighbour, white fill).
inline RasterImage warp_image(const RasterImage& img, const AffineParams& p) {
  RasterImage out(img.height, img.width, 1.0f);
  const Eigen::Matrix2d inv = affine_linear(p).inverse();
  const double sx = img.width > 1 ? img.width - 1 : 1, sy = img.height > 1 ? img.height - 1 : 1;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const Eigen::Vector2d q(x / sx - 0.5 - p.tx, y / sy - 0.5 - p.ty);
      const Eigen::Vector2d src = inv * q;
      const long ix = round_half_away((src.x() + 0.5) * sx), iy = round_half_away((src.y() + 0.5) * sy);
      if (ix < 0 || iy < 0 || ix >= img.width || iy >= img.height) continue;
      for (int c = 0; c < RasterImage::channels; ++c) out.at(y, x, c) = img.at(static_cast<int>(iy), static_cast<int>(ix), c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stroke dropout / subsampling
// ---------------------------------------------------------------------------

/// Number of strokes kept out of n at completeness c.
inline size_t kept_stroke_count(size_t n, double c) {
  if (n == 0) return 0;
  const long k = round_half_away(c * static_cast<double>(n));
  return static_cast<size_t>(std::clamp<long>(k, 1, static_cast<long>(n)));
}

/// Indices of a uniformly chosen subset of size kept_stroke_count(n, c),
/// in ascending order.
inline std::vector<size_t> choose_kept(size_t n, double completeness, uint64_t seed) {
  const size_t k = kept_stroke_count(n, completeness);
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  if (k == n) return idx;
  Rng rng(seed);
  for (size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Keeps a uniformly chosen subset of strokes, preserving order.
inline StrokeSketch stroke_dropout(const StrokeSketch& sketch, double completeness, uint64_t seed) {
  const auto idx = choose_kept(sketch.strokes.size(), completeness, seed);
  if (idx.size() == sketch.strokes.size()) return sketch;
  StrokeSketch out;
  out.canvas_aspect = sketch.canvas_aspect;
  for (size_t i : idx) out.strokes.push_back(sketch.strokes[i]);
  return out;
}

/// Evaluation-time counterpart of stroke_dropout; `fraction` in (0, 1].
inline StrokeSketch subsample_strokes(const StrokeSketch& sketch, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("subsample_strokes: fraction must be in (0, 1]");
  return stroke_dropout(sketch, fraction, seed);
}

// ---------------------------------------------------------------------------
// Query dropout
// ---------------------------------------------------------------------------

enum class QueryDrop { None, Sketch, Text };

inline QueryDrop draw_query_drop(double p, Rng& rng) {
  if (!rng.bernoulli(p)) return QueryDrop::None;
  return rng.bernoulli(0.5) ? QueryDrop::Sketch : QueryDrop::Text;
}

inline TrainingTuple apply_query_drop(TrainingTuple t, QueryDrop drop) {
  if (drop == QueryDrop::Sketch) t.sketch = StrokeSketch{{}, t.sketch.canvas_aspect};
  if (drop == QueryDrop::Text) t.query = empty_text();
  return t;
}

/// With probability p, blanks exactly one of the sketch or the text query.
/// The image, caption target and labels are never touched.
inline TrainingTuple query_dropout(const TrainingTuple& t, double p, uint64_t seed, QueryDrop* which = nullptr) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error("query_dropout: p must be in [0, 1]");
  Rng rng(seed);
  const QueryDrop d = draw_query_drop(p, rng);
  if (which != nullptr) *which = d;
  return apply_query_drop(t, d);
}

}  // namespace sq
