#include "test_support.hpp"

using namespace sqt;

namespace {

RasterImage rectangle_image(int size, int x0, int y0, int x1, int y1) {
  RasterImage img(size, size, 1.0f);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.0f;
  return img;
}

// Two-pixel band straddling the rectangle outline: pixels whose 4-neighbourhood
// contains both inside and outside pixels.
std::vector<uint8_t> rectangle_boundary(int size, int x0, int y0, int x1, int y1) {
  auto inside = [&](int x, int y) { return x >= x0 && x <= x1 && y >= y0 && y <= y1; };
  std::vector<uint8_t> b(static_cast<size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const bool in = inside(x, y);
      bool mixed = false;
      for (auto [dx, dy] : {std::pair{1, 0}, std::pair{-1, 0}, std::pair{0, 1}, std::pair{0, -1}}) mixed = mixed || inside(x + dx, y + dy) != in;
      b[static_cast<size_t>(y) * size + x] = mixed;
    }
  }
  return b;
}

StrokeSketch numbered_strokes(int n) {
  StrokeSketch s;
  for (int i = 0; i < n; ++i) s.strokes.push_back({{{i / 10.0, 0.0}, {i / 10.0, 1.0}}});
  return s;
}

}  // namespace

TEST(Synthesize, UniformImageHasNoStrokes) {
  EXPECT_TRUE(synthesize_sketch(RasterImage(32, 32, 0.4f)).empty());
  EXPECT_TRUE(synthesize_sketch(RasterImage(32, 32, 1.0f)).empty());
}

TEST(Synthesize, RectangleOutlineIoU) {
  const int size = 64;
  const int x0 = 16, y0 = 20, x1 = 47, y1 = 43;
  const StrokeSketch s = synthesize_sketch(rectangle_image(size, x0, y0, x1, y1));
  ASSERT_FALSE(s.empty());
  const RasterImage r = rasterize(s, size, 2);
  const auto oracle = rectangle_boundary(size, x0, y0, x1, y1);
  int inter = 0, uni = 0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const bool a = r.at(y, x, 0) == 0.0f, b = oracle[static_cast<size_t>(y) * size + x];
      inter += a && b;
      uni += a || b;
    }
  }
  EXPECT_GE(static_cast<double>(inter) / uni, 0.5);
}

TEST(Synthesize, Deterministic) {
  const auto toy = generate_toy_dataset(3, 5, 64);
  for (const auto& rec : toy.dataset.records) EXPECT_EQ(synthesize_sketch(rec.image), synthesize_sketch(rec.image));
}

TEST(Synthesize, CoordinatesAreNormalized) {
  const auto toy = generate_toy_dataset(5, 6, 64);
  for (const auto& rec : toy.dataset.records) {
    const StrokeSketch s = synthesize_sketch(rec.image);
    EXPECT_FALSE(s.empty());
    for (const auto& st : s.strokes) {
      EXPECT_GE(st.points.size(), 2u);
      for (const auto& p : st.points) {
        EXPECT_GE(p.x, 0.0);
        EXPECT_LE(p.x, 1.0);
        EXPECT_GE(p.y, 0.0);
        EXPECT_LE(p.y, 1.0);
      }
    }
  }
}

TEST(Affine, IdentityLeavesSketchUnchanged) {
  Rng rng(1);
  const StrokeSketch s = random_sketch(rng, 5);
  const StrokeSketch out = random_affine(s, AffineParams{});
  ASSERT_EQ(out.strokes.size(), s.strokes.size());
  for (size_t i = 0; i < s.strokes.size(); ++i) {
    for (size_t j = 0; j < s.strokes[i].points.size(); ++j) {
      EXPECT_NEAR(out.strokes[i].points[j].x, s.strokes[i].points[j].x, 1e-12);
      EXPECT_NEAR(out.strokes[i].points[j].y, s.strokes[i].points[j].y, 1e-12);
    }
  }
}

TEST(Affine, PureTranslation) {
  AffineParams p;
  p.tx = 0.1;
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const Point a{rng.uniform(), rng.uniform()};
    const Point b = apply_affine(a, p);
    EXPECT_NEAR(b.x, a.x + 0.1, 1e-12);
    EXPECT_NEAR(b.y, a.y, 1e-12);
  }
}

TEST(Affine, RotationRoundTrip) {
  AffineParams fwd, back;
  fwd.rotation_deg = 10.0;
  back.rotation_deg = -10.0;
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Point a{rng.uniform(), rng.uniform()};
    const Point b = apply_affine(apply_affine(a, fwd), back);
    EXPECT_NEAR(b.x, a.x, 1e-6);
    EXPECT_NEAR(b.y, a.y, 1e-6);
  }
}

TEST(Affine, PreservesStrokeAndPointCounts) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const StrokeSketch s = random_sketch(rng, 1 + static_cast<int>(rng.below(6)));
    const StrokeSketch out = random_affine(s, sample_affine(AffineRanges{}, rng.next()));
    ASSERT_EQ(out.strokes.size(), s.strokes.size());
    for (size_t k = 0; k < s.strokes.size(); ++k) EXPECT_EQ(out.strokes[k].points.size(), s.strokes[k].points.size());
  }
}

TEST(Affine, SampledParamsWithinRanges) {
  const AffineRanges r;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    const AffineParams p = sample_affine(r, seed);
    EXPECT_LE(std::abs(p.rotation_deg), 10.0);
    EXPECT_LE(std::abs(p.tx), 0.1);
    EXPECT_LE(std::abs(p.ty), 0.1);
    EXPECT_GE(p.scale, 0.9);
    EXPECT_LE(p.scale, 1.1);
    EXPECT_LE(std::abs(p.shear_deg), 5.0);
    EXPECT_EQ(p, sample_affine(r, seed));
  }
}

TEST(Affine, WarpIdentityIsExact) {
  Rng rng(5);
  const RasterImage img = random_image(rng, 16);
  EXPECT_EQ(warp_image(img, AffineParams{}), img);
}

TEST(StrokeDropout, CountsFollowRounding) {
  const StrokeSketch s = numbered_strokes(10);
  EXPECT_EQ(stroke_dropout(s, 0.6, 1).strokes.size(), 6u);
  EXPECT_EQ(stroke_dropout(s, 1.0, 1), s);
  EXPECT_EQ(kept_stroke_count(10, 0.65), 7u);
  EXPECT_EQ(kept_stroke_count(10, 0.64), 6u);
  EXPECT_EQ(kept_stroke_count(3, 0.5), 2u);
  EXPECT_EQ(kept_stroke_count(5, 0.01), 1u);
  EXPECT_EQ(kept_stroke_count(0, 0.5), 0u);
}

TEST(StrokeDropout, OutputIsOrderedSubset) {
  const StrokeSketch s = numbered_strokes(10);
  for (uint64_t seed = 0; seed < 100; ++seed) {
    const StrokeSketch out = stroke_dropout(s, 0.6 + 0.4 * (seed % 5) / 5.0, seed);
    size_t cursor = 0;
    for (const auto& st : out.strokes) {
      while (cursor < s.strokes.size() && !(s.strokes[cursor] == st)) ++cursor;
      ASSERT_LT(cursor, s.strokes.size());
      ++cursor;
    }
  }
}

TEST(StrokeDropout, MeanKeptFractionUnderUniformCompleteness) {
  const StrokeSketch s = numbered_strokes(10);
  Rng rng(6);
  double kept = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) kept += static_cast<double>(stroke_dropout(s, rng.uniform(0.6, 1.0), rng.next()).strokes.size()) / 10.0;
  const double mean = kept / draws;
  EXPECT_GE(mean, 0.78);
  EXPECT_LE(mean, 0.82);
}

TEST(Subsample, CountsAndIdentity) {
  const StrokeSketch s = numbered_strokes(5);
  EXPECT_EQ(subsample_strokes(s, 0.2, 3).strokes.size(), 1u);
  EXPECT_EQ(subsample_strokes(s, 1.0, 3), s);
  EXPECT_EQ(subsample_strokes(s, 0.6, 9), subsample_strokes(s, 0.6, 9));
  EXPECT_THROW(subsample_strokes(s, 0.0, 1), Error);
  EXPECT_THROW(subsample_strokes(s, 1.5, 1), Error);
}

TEST(Subsample, ExactCountsForEveryFraction) {
  for (size_t n = 1; n <= 12; ++n) {
    const StrokeSketch s = numbered_strokes(static_cast<int>(n));
    for (double f : {0.2, 0.4, 0.6, 0.8, 1.0}) {
      const size_t expect = std::clamp<size_t>(static_cast<size_t>(std::floor(f * static_cast<double>(n) + 0.5)), 1, n);
      EXPECT_EQ(subsample_strokes(s, f, n).strokes.size(), expect) << n << " " << f;
    }
  }
}

TEST(QueryDropout, ZeroProbabilityIsIdentity) {
  TrainingTuple t;
  t.sketch = numbered_strokes(3);
  t.query = {kBos, 5, kEos};
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const TrainingTuple out = query_dropout(t, 0.0, seed);
    EXPECT_EQ(out.sketch, t.sketch);
    EXPECT_EQ(out.query, t.query);
  }
}

TEST(QueryDropout, SketchBranchBlanksToWhite) {
  TrainingTuple t;
  t.sketch = numbered_strokes(3);
  t.query = {kBos, 5, kEos};
  const TrainingTuple out = apply_query_drop(t, QueryDrop::Sketch);
  EXPECT_TRUE(out.sketch.empty());
  EXPECT_EQ(out.query, t.query);
  EXPECT_EQ(rasterize(out.sketch, 32), RasterImage(32, 32, 1.0f));
  const TrainingTuple txt = apply_query_drop(t, QueryDrop::Text);
  EXPECT_EQ(txt.query, empty_text());
  EXPECT_EQ(txt.sketch, t.sketch);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    QueryDrop which{};
    const TrainingTuple d = query_dropout(t, 1.0, seed, &which);
    EXPECT_NE(which, QueryDrop::None);
    EXPECT_TRUE(d.sketch.empty() != (d.query == empty_text()));
  }
}

TEST(QueryDropout, EmpiricalRate) {
  TrainingTuple t;
  t.sketch = numbered_strokes(2);
  t.query = {kBos, 5, kEos};
  int sketch = 0, text = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    QueryDrop which{};
    query_dropout(t, 0.2, derive_seed(77, static_cast<uint64_t>(i)), &which);
    sketch += which == QueryDrop::Sketch;
    text += which == QueryDrop::Text;
  }
  const double rate = static_cast<double>(sketch + text) / draws;
  EXPECT_GE(rate, 0.18);
  EXPECT_LE(rate, 0.22);
  EXPECT_LE(std::abs(sketch - text), 0.1 * std::max(sketch, text));
}
