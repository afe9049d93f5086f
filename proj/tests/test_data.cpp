#include "test_support.hpp"

#include <filesystem>
#include <fstream>
#include <set>

using namespace sqt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sq_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

}  // namespace

TEST(Tokenize, EmptyText) {
  const Vocabulary v = Vocabulary::build({"a red circle"});
  EXPECT_EQ(tokenize("", v), (TokenSequence{kBos, kEos}));
  EXPECT_EQ(tokenize("", v), empty_text());
}

TEST(Tokenize, DirectLookup) {
  const Vocabulary v = Vocabulary::build({"a red circle", "a blue square"});
  EXPECT_EQ(tokenize("a red circle", v), (TokenSequence{kBos, v.id("a"), v.id("red"), v.id("circle"), kEos}));
  EXPECT_EQ(tokenize("A  Red, circle!", v), tokenize("a red circle", v));
  EXPECT_EQ(tokenize("a purple circle", v)[2], kUnk);
}

TEST(Tokenize, ReservedIdsAndSortedWords) {
  const Vocabulary v = Vocabulary::build({"b a c", "a"});
  EXPECT_EQ(v.size(), kNumReserved + 3);
  EXPECT_EQ(v.token(kPad), "<pad>");
  EXPECT_EQ(v.token(kBos), "<bos>");
  EXPECT_EQ(v.token(kEos), "<eos>");
  EXPECT_EQ(v.token(kUnk), "<unk>");
  EXPECT_EQ(v.id("a"), kNumReserved);
  EXPECT_EQ(v.id("c"), kNumReserved + 2);
}

TEST(Tokenize, TruncatesToMaxLen) {
  const Vocabulary v = Vocabulary::build({"a b c d e f g"});
  const TokenSequence t = tokenize("a b c d e f g", v, 5);
  EXPECT_EQ(t.size(), 5u);
  EXPECT_EQ(t.front(), kBos);
  EXPECT_EQ(t.back(), kEos);
}

TEST(Tokenize, RoundTripOverToyCaptions) {
  const auto toy = generate_toy_dataset(40, 3);
  const Vocabulary v = Vocabulary::build(toy.dataset.all_captions());
  for (const auto& c : toy.dataset.all_captions()) {
    const TokenSequence t = tokenize(c, v);
    EXPECT_EQ(std::count(t.begin(), t.end(), kUnk), 0) << c;
    EXPECT_EQ(detokenize(t, v), normalize_text(c));
  }
}

TEST(SubsampleWords, KeepsOrderAndCounts) {
  const std::string text = "one two three four five";
  EXPECT_EQ(subsample_words(text, 0.0, 1), "");
  EXPECT_EQ(subsample_words(text, 1.0, 1), text);
  const std::string part = subsample_words(text, 0.4, 7);
  const auto words = split_words(part);
  EXPECT_EQ(words.size(), 2u);
  const auto all = split_words(text);
  EXPECT_LT(std::find(all.begin(), all.end(), words[0]), std::find(all.begin(), all.end(), words[1]));
  EXPECT_EQ(part, subsample_words(text, 0.4, 7));
}

TEST(SketchJson, RoundTrip) {
  Rng rng(1);
  const StrokeSketch s = random_sketch(rng, 4);
  EXPECT_EQ(parse_sketch(dump_sketch(s)), s);
  const fs::path dir = scratch("sketch");
  write_sketch((dir / "s.json").string(), s);
  EXPECT_EQ(read_sketch((dir / "s.json").string()), s);
}

TEST(SketchJson, MalformedInputRejected) {
  EXPECT_THROW(parse_sketch("not json"), DataError);
  EXPECT_THROW(parse_sketch(R"({"strokes": 3})"), DataError);
  EXPECT_THROW(parse_sketch(R"({"strokes": [[[0.1]]]})"), DataError);
  EXPECT_THROW(parse_sketch(R"({"strokes": [], "canvas_aspect": -1})"), DataError);
}

TEST(SketchJson, ClampsAndDropsSinglePointStrokes) {
  const StrokeSketch s = parse_sketch(R"({"strokes": [[[1.5, -0.2], [0.5, 0.5]], [[0.3, 0.3]]]})");
  ASSERT_EQ(s.strokes.size(), 1u);
  EXPECT_EQ(s.strokes[0].points[0], (Point{1.0, 0.0}));
}

TEST(Svg, ImportPolylineAndPath) {
  const std::string svg = R"(<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 200 100">
    <polyline points="0,0 100,50 200,100" />
    <path d="M 0 100 L 200 0" />
  </svg>)";
  const StrokeSketch s = import_svg(svg);
  ASSERT_EQ(s.strokes.size(), 2u);
  EXPECT_NEAR(s.strokes[0].points[1].x, 0.5, 1e-9);
  EXPECT_NEAR(s.strokes[0].points[1].y, 0.5, 1e-9);
  EXPECT_NEAR(s.strokes[1].points[0].y, 1.0, 1e-9);
  EXPECT_NEAR(s.canvas_aspect, 2.0, 1e-9);
}

TEST(Svg, ExportImportRoundTrip) {
  Rng rng(2);
  const StrokeSketch s = random_sketch(rng, 3);
  const StrokeSketch back = import_svg(export_svg(s));
  ASSERT_EQ(back.strokes.size(), s.strokes.size());
  for (size_t i = 0; i < s.strokes.size(); ++i) {
    ASSERT_EQ(back.strokes[i].points.size(), s.strokes[i].points.size());
    for (size_t j = 0; j < s.strokes[i].points.size(); ++j) {
      EXPECT_NEAR(back.strokes[i].points[j].x, s.strokes[i].points[j].x, 1e-4);
      EXPECT_NEAR(back.strokes[i].points[j].y, s.strokes[i].points[j].y, 1e-4);
    }
  }
}

TEST(ToyDataset, DeterministicBytesOnDisk) {
  const fs::path a = scratch("toy_a"), b = scratch("toy_b");
  write_dataset(generate_toy_dataset(1, 7).dataset, a.string());
  write_dataset(generate_toy_dataset(1, 7).dataset, b.string());
  EXPECT_EQ(tree(a), tree(b));
  EXPECT_FALSE(tree(a).empty());
}

TEST(ToyDataset, LabelsMatchSceneOracle) {
  const auto toy = generate_toy_dataset(60, 4);
  const auto cats = toy_categories();
  EXPECT_EQ(cats.size(), 12u);
  for (size_t i = 0; i < toy.scenes.size(); ++i) {
    std::set<std::string> expect;
    for (const auto& s : toy.scenes[i].shapes) expect.insert(s.color + " " + s.shape);
    const auto& labels = toy.dataset.records[i].labels;
    EXPECT_EQ(std::set<std::string>(labels.begin(), labels.end()), expect);
    for (const auto& l : labels) EXPECT_NE(std::find(cats.begin(), cats.end(), l), cats.end());
    EXPECT_EQ(toy.dataset.records[i].captions.size(), 2u);
  }
}

TEST(ToyDataset, ShapesAreRenderedInTheirColor) {
  const auto toy = generate_toy_dataset(20, 5);
  for (size_t i = 0; i < toy.scenes.size(); ++i) {
    const RasterImage& img = toy.dataset.records[i].image;
    for (const auto& s : toy.scenes[i].shapes) {
      const int x = static_cast<int>(s.cx * img.width), y = static_cast<int>(s.cy * img.height);
      const auto rgb = toy_rgb(s.color);
      bool found = false;
      for (int dy = -1; dy <= 1 && !found; ++dy)
        for (int dx = -1; dx <= 1 && !found; ++dx)
          found = std::abs(img.at(y + dy, x + dx, 0) - rgb[0]) < 0.01f && std::abs(img.at(y + dy, x + dx, 2) - rgb[2]) < 0.01f;
      EXPECT_TRUE(found) << toy.dataset.records[i].id << " " << s.color << " " << s.shape;
    }
  }
}

TEST(Manifest, WriteLoadWriteIsByteStable) {
  const fs::path dir = scratch("manifest");
  write_dataset(generate_toy_dataset(6, 8).dataset, dir.string());
  const std::string first = slurp(dir / "manifest.jsonl");
  const DatasetManifest m = load_manifest((dir / "manifest.jsonl").string());
  write_manifest((dir / "again.jsonl").string(), m);
  EXPECT_EQ(slurp(dir / "again.jsonl"), first);
  const Dataset d = load_dataset(m);
  EXPECT_EQ(d.size(), 6u);
  EXPECT_TRUE(d.records[0].sketch.has_value());
}

TEST(Manifest, DatasetRoundTripPreservesContent) {
  const fs::path dir = scratch("dataset");
  const auto toy = generate_toy_dataset(4, 9);
  write_dataset(toy.dataset, dir.string());
  const Dataset d = load_dataset((dir / "manifest.jsonl").string());
  for (size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.records[i].image, toy.dataset.records[i].image);
    EXPECT_EQ(d.records[i].captions, toy.dataset.records[i].captions);
    EXPECT_EQ(*d.records[i].sketch, *toy.dataset.records[i].sketch);
  }
}

TEST(Manifest, ReportsMissingFilesAndDuplicates) {
  const fs::path dir = scratch("bad");
  std::ofstream(dir / "m.jsonl") << R"({"id":"x1","image":"nope.png","captions":["a"]})" << '\n'
                                 << R"({"id":"x2","image":"gone.png","captions":["b"]})" << '\n';
  try {
    load_manifest((dir / "m.jsonl").string());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("x1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("x2"), std::string::npos);
  }
  std::ofstream(dir / "dup.jsonl") << R"({"id":"x1","image":"a.png","captions":["a"]})" << '\n'
                                   << R"({"id":"x1","image":"b.png","captions":["b"]})" << '\n';
  EXPECT_THROW(load_manifest((dir / "dup.jsonl").string(), false), DataError);
}

TEST(Manifest, CocoConversion) {
  const json caps = json::parse(R"({
    "images": [{"id": 3, "file_name": "c.jpg"}, {"id": 1, "file_name": "a.jpg"}],
    "annotations": [{"image_id": 1, "caption": "a dog"}, {"image_id": 1, "caption": "a brown dog"},
                    {"image_id": 3, "caption": "a cat"}]})");
  const json inst = json::parse(R"({
    "categories": [{"id": 18, "name": "dog"}, {"id": 17, "name": "cat"}],
    "annotations": [{"image_id": 1, "category_id": 18}, {"image_id": 1, "category_id": 18}, {"image_id": 3, "category_id": 17}]})");
  const DatasetManifest m = coco_to_manifest(caps, inst, "imgs");
  ASSERT_EQ(m.records.size(), 2u);
  EXPECT_EQ(m.records[0].id, "1");
  EXPECT_EQ(m.records[0].captions.size(), 2u);
  EXPECT_EQ(m.records[0].labels, (std::vector<std::string>{"dog"}));
  EXPECT_EQ(m.records[1].labels, (std::vector<std::string>{"cat"}));
  EXPECT_EQ(m.records[0].image, (fs::path("imgs") / "a.jpg").string());
}

TEST(Batch, ShapesAndAlignment) {
  const auto toy = generate_toy_dataset(12, 10);
  const Vocabulary v = Vocabulary::build(toy.dataset.all_captions());
  const auto cats = toy.dataset.categories();
  const BatchContext ctx{&v, &cats, 32};
  const auto batch = make_batch(toy.dataset, 8, AugmentationConfig{}, ctx, 3);
  ASSERT_EQ(batch.size(), 8u);
  std::set<std::string> ids;
  for (const auto& t : batch) {
    ids.insert(t.id);
    EXPECT_EQ(t.labels.size(), cats.size());
    EXPECT_EQ(t.image.height, 64);
  }
  EXPECT_EQ(ids.size(), 8u);
  for (const auto& caps : padded_captions(batch, 32)) EXPECT_EQ(caps.size(), 32u);
}

TEST(Batch, DisabledAugmentationGivesRawRecords) {
  const auto toy = generate_toy_dataset(5, 11);
  const Vocabulary v = Vocabulary::build(toy.dataset.all_captions());
  const auto cats = toy.dataset.categories();
  AugmentationConfig off;
  off.enabled = false;
  const auto batch = make_batch(toy.dataset, std::vector<size_t>{0, 1, 2, 3, 4}, off, BatchContext{&v, &cats, 32}, 9);
  for (size_t i = 0; i < batch.size(); ++i) {
    const Record& r = toy.dataset.records[i];
    EXPECT_EQ(batch[i].id, r.id);
    EXPECT_EQ(batch[i].image, r.image);
    EXPECT_EQ(batch[i].sketch, *r.sketch);
    EXPECT_EQ(batch[i].caption, tokenize(r.captions[0], v));
    EXPECT_EQ(batch[i].query, batch[i].caption);
    EXPECT_EQ(batch[i].labels, label_vector(r.labels, cats));
  }
}

TEST(Batch, ReproducibleWithSeed) {
  const auto toy = generate_toy_dataset(10, 12);
  const Vocabulary v = Vocabulary::build(toy.dataset.all_captions());
  const auto cats = toy.dataset.categories();
  const BatchContext ctx{&v, &cats, 32};
  const auto a = make_batch(toy.dataset, 6, AugmentationConfig{}, ctx, 5);
  const auto b = make_batch(toy.dataset, 6, AugmentationConfig{}, ctx, 5);
  const auto c = make_batch(toy.dataset, 6, AugmentationConfig{}, ctx, 6);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].sketch, b[i].sketch);
    EXPECT_EQ(a[i].query, b[i].query);
  }
  bool differs = false;
  for (size_t i = 0; i < a.size(); ++i) differs = differs || !(a[i].image == c[i].image) || a[i].id != c[i].id;
  EXPECT_TRUE(differs);
}

TEST(Batch, ImageAndSketchUseIndependentAffineSeeds) {
  // The per-tuple streams feeding the two maps are distinct, so their sampled
  // parameters differ.
  for (uint64_t seed = 0; seed < 100; ++seed) {
    const AffineParams img = sample_affine(AffineRanges{}, derive_seed(seed, 2));
    const AffineParams sk = sample_affine(AffineRanges{}, derive_seed(seed, 3));
    EXPECT_NE(img.rotation_deg, sk.rotation_deg);
    EXPECT_NE(img.tx, sk.tx);
  }
}

TEST(Batch, CaptionTargetsMaskedIdenticallyWithPadding) {
  const auto toy = generate_toy_dataset(4, 13);
  const Vocabulary v = Vocabulary::build(toy.dataset.all_captions());
  const auto cats = toy.dataset.categories();
  const auto batch = make_batch(toy.dataset, 4, AugmentationConfig{}, BatchContext{&v, &cats, 32}, 1);
  std::vector<TokenSequence> raw;
  for (const auto& t : batch) raw.push_back(t.caption);
  const auto padded = padded_captions(batch, 32);
  Rng rng(2);
  std::vector<Mat<double>> logits_raw, logits_pad;
  for (size_t i = 0; i < batch.size(); ++i) {
    Mat<double> z(32, v.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z.data()[k] = rng.normal();
    logits_pad.push_back(z);
    logits_raw.push_back(z.topRows(static_cast<Eigen::Index>(raw[i].size())));
  }
  EXPECT_EQ(caption_loss<double>(logits_raw, raw).value, caption_loss<double>(logits_pad, padded).value);
}
