#pragma once

// Domain types shared by every part of the retrieval pipeline: rasters,
// vector sketches, embeddings, token sequences and the model configuration.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sq {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input dimensions disagree with the model configuration.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Zero-norm vector where a direction was required.
class DegenerateEmbedding : public Error {
 public:
  using Error::Error;
};

/// A loss term came out NaN or infinite.
class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Dense aliases
// ---------------------------------------------------------------------------

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Reproducible randomness
//
// std::mt19937_64 output is fixed by the standard but the <random>
// distributions are not, so every draw goes through these helpers.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(a)) ^ splitmix64(b + 0x5851F42D4C957F2Dull));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(splitmix64(seed)) {}

  uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
    uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::mt19937_64 engine_;
};

/// Round half away from zero; the rounding rule used for every "keep a
/// fraction" operation.
inline long round_half_away(double v) { return std::lround(v); }

// ---------------------------------------------------------------------------
// RasterImage
// ---------------------------------------------------------------------------

/// H x W x 3 intensities in [0,1], stored row-major, channel-interleaved.
struct RasterImage {
  int height = 0;
  int width = 0;
  static constexpr int channels = 3;
  std::vector<float> pixels;

  RasterImage() = default;
  RasterImage(int h, int w, float fill = 1.0f) : height(h), width(w), pixels(static_cast<size_t>(h) * w * channels, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }

  bool operator==(const RasterImage&) const = default;
};

// ---------------------------------------------------------------------------
// Vector sketches
// ---------------------------------------------------------------------------

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// Ordered polyline in normalized canvas units.
struct Stroke {
  std::vector<Point> points;
  bool operator==(const Stroke&) const = default;
};

struct StrokeSketch {
  std::vector<Stroke> strokes;
  double canvas_aspect = 1.0;

  bool empty() const { return strokes.empty(); }
  bool operator==(const StrokeSketch&) const = default;
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Draws black strokes on a white size x size raster with a square brush of
/// `stroke_width` pixels, using integer Bresenham lines.
inline RasterImage rasterize(const StrokeSketch& sketch, int size, int stroke_width = 2) {
  if (size <= 0) throw ShapeError("rasterize: size must be positive");
  RasterImage img(size, size, 1.0f);
  const int lo = -(stroke_width / 2);
  const int hi = (stroke_width - 1) / 2;
  auto stamp = [&](int cx, int cy) {
    for (int dy = lo; dy <= hi; ++dy) {
      for (int dx = lo; dx <= hi; ++dx) {
        const int x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x >= size || y >= size) continue;
        for (int c = 0; c < RasterImage::channels; ++c) img.at(y, x, c) = 0.0f;
      }
    }
  };
  auto to_px = [&](double v) { return static_cast<int>(round_half_away(clamp01(v) * (size - 1))); };
  for (const auto& stroke : sketch.strokes) {
    if (stroke.points.empty()) continue;
    int x0 = to_px(stroke.points[0].x), y0 = to_px(stroke.points[0].y);
    stamp(x0, y0);
    for (size_t i = 1; i < stroke.points.size(); ++i) {
      const int x1 = to_px(stroke.points[i].x), y1 = to_px(stroke.points[i].y);
      int x = x0, y = y0;
      const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
      const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
      int err = dx + dy;
      while (true) {
        stamp(x, y);
        if (x == x1 && y == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
          err += dy;
          x += sx;
        }
        if (e2 <= dx) {
          err += dx;
          y += sy;
        }
      }
      x0 = x1;
      y0 = y1;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

template <typename T>
struct Embedding {
  RowVec<T> values;
  bool normalized = false;

  Eigen::Index dim() const { return values.size(); }
};

template <typename T>
Embedding<T> normalize(const RowVec<T>& e) {
  const T n = e.norm();
  if (!(n > T(0))) throw DegenerateEmbedding("normalize: zero-norm vector");
  return Embedding<T>{e / n, true};
}

template <typename T>
Embedding<T> normalize(const Embedding<T>& e) {
  return normalize<T>(e.values);
}

// ---------------------------------------------------------------------------
// Tokens and labels
// ---------------------------------------------------------------------------

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

using TokenSequence = std::vector<int>;

inline TokenSequence empty_text() { return {kBos, kEos}; }

/// Binary indicator vector over the category list.
using LabelSet = std::vector<uint8_t>;

struct TrainingTuple {
  std::string id;
  RasterImage image;
  StrokeSketch sketch;
  TokenSequence caption;  // decoder target
  TokenSequence query;    // text-tower input; may be dropped to BOS/EOS
  LabelSet labels;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class CombinationMode { Sum, Max, ConcatProject };

inline std::string to_string(CombinationMode m) {
  switch (m) {
    case CombinationMode::Sum: return "sum";
    case CombinationMode::Max: return "max";
    case CombinationMode::ConcatProject: return "concat";
  }
  return "sum";
}

inline CombinationMode parse_combination_mode(const std::string& s) {
  if (s == "sum" || s == "SUM") return CombinationMode::Sum;
  if (s == "max" || s == "MAX") return CombinationMode::Max;
  if (s == "concat" || s == "CONCAT_PROJECT" || s == "concat_project") return CombinationMode::ConcatProject;
  throw Error("unknown combination mode: " + s);
}

struct ModelConfig {
  int embed_dim = 128;
  int image_size = 64;
  int patch_size = 8;
  int vocab_size = 64;
  int max_len = 32;
  int num_labels = 12;

  int enc_width = 128;
  int enc_depth = 2;
  int enc_heads = 4;
  int text_width = 128;
  int text_depth = 2;
  int text_heads = 4;
  int mlp_ratio = 4;

  int dec_width = 128;
  int dec_depth = 6;
  int dec_heads = 8;

  int classifier_hidden = 0;  // 0 -> embed_dim

  double temperature_init = 0.07;
  double w_c = 10.0;
  double w_d = 1.0;
  double w_e = 100.0;

  double asl_gamma_pos = 0.0;
  double asl_gamma_neg = 4.0;
  double asl_margin = 0.05;

  CombinationMode combination = CombinationMode::Sum;
  int stroke_width = 2;

  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int patch_dim() const { return patch_size * patch_size * RasterImage::channels; }
  int hidden() const { return classifier_hidden > 0 ? classifier_hidden : embed_dim; }

  void validate() const {
    auto pos = [](int v, const char* what) {
      if (v <= 0) throw ShapeError(std::string("config: ") + what + " must be positive");
    };
    pos(embed_dim, "embed_dim");
    pos(image_size, "image_size");
    pos(patch_size, "patch_size");
    pos(vocab_size, "vocab_size");
    pos(max_len, "max_len");
    pos(num_labels, "num_labels");
    pos(enc_width, "enc_width");
    pos(enc_depth, "enc_depth");
    pos(enc_heads, "enc_heads");
    pos(text_width, "text_width");
    pos(text_depth, "text_depth");
    pos(text_heads, "text_heads");
    pos(dec_width, "dec_width");
    pos(dec_depth, "dec_depth");
    pos(dec_heads, "dec_heads");
    pos(mlp_ratio, "mlp_ratio");
    if (image_size % patch_size != 0) throw ShapeError("config: image_size must be a multiple of patch_size");
    if (enc_width % enc_heads != 0 || text_width % text_heads != 0 || dec_width % dec_heads != 0)
      throw ShapeError("config: width must be divisible by heads");
    if (max_len < 2) throw ShapeError("config: max_len must allow BOS and EOS");
    if (!(temperature_init > 0.0)) throw ShapeError("config: temperature_init must be positive");
  }
};

}  // namespace sq
