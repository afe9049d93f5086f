// Acceptance runner: one PASS/FAIL line per criterion; exit status 1 if any
// criterion fails.

#include "fd_support.hpp"

#include <chrono>
#include <cstdio>

using namespace sqt;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), f, a, b, c);
  return buf;
}

int failures = 0;

void criterion(const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0) o.require(secs < limit_s, fmt("runtime %.1fs over %.0fs", secs, limit_s));
  if (!o.pass) ++failures;
  std::printf("%s %s (%.2fs)%s%s\n", o.pass ? "PASS" : "FAIL", name.c_str(), secs, o.detail.empty() ? "" : ": ", o.detail.c_str());
  std::fflush(stdout);
}

Mat<double> unit_rows(Rng& rng, int n, int d) {
  Mat<double> m(n, d);
  for (int i = 0; i < n; ++i) m.row(i) = random_unit<double>(rng, d);
  return m;
}

Outcome loss_identities() {
  Outcome o;
  Rng rng(1);
  for (int n : {2, 4, 8}) {
    const RowVec<double> v = random_unit<double>(rng, 6);
    const Mat<double> same = v.replicate(n, 1);
    const double l = embedding_loss<double>(same, same, 0.07).value;
    o.require(std::abs(l - std::log(n)) <= 1e-5, fmt("N=%.0f identical: %.8f", n, l));
  }
  const Mat<double> one = unit_rows(rng, 1, 6);
  o.require(std::abs(embedding_loss<double>(one, one, 0.5).value) <= 1e-12, "N=1 not zero");
  const Mat<double> eye = Mat<double>::Identity(2, 2);
  const double l2 = embedding_loss<double>(eye, eye, 1.0).value;
  o.require(std::abs(l2 - std::log(1 + std::exp(-1.0))) <= 1e-5, fmt("orthonormal: %.8f", l2));
  return o;
}

double bce(double z, int y) {
  const double p = 1 / (1 + std::exp(-z));
  return -(y ? std::log(p) : std::log(1 - p));
}

Outcome asl_reductions() {
  Outcome o;
  Rng rng(2);
  double worst = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int n = 1 + static_cast<int>(rng.below(4)), l = 1 + static_cast<int>(rng.below(8));
    Mat<double> z(n, l);
    Mat<uint8_t> y(n, l);
    double mean = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < l; ++j) {
        z(i, j) = 3 * rng.normal();
        y(i, j) = rng.bernoulli(0.5);
        mean += bce(z(i, j), y(i, j));
      }
    }
    mean /= n * l;
    worst = std::max(worst, std::abs(asl_loss<double>(z, y, AslParams{0, 0, 0}).value - mean));
  }
  o.require(worst <= 1e-6, fmt("BCE reduction off by %.3g", worst));
  // negative with probability below the margin contributes exactly zero
  Mat<double> z(1, 1);
  z(0, 0) = std::log(0.04 / 0.96);
  Mat<uint8_t> y = Mat<uint8_t>::Zero(1, 1);
  const auto clipped = asl_loss<double>(z, y, AslParams{0, 4, 0.05});
  o.require(clipped.value == 0.0 && clipped.d_logits(0, 0) == 0.0, "margin clip not exactly zero");
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  Rng rng(3);
  double worst_loss = 0, worst_enc = 0;
  for (int n = 2; n <= 4; ++n) {
    Mat<double> q = unit_rows(rng, n, 5), im = unit_rows(rng, n, 5);
    const double tau = rng.uniform(0.1, 1.0);
    const auto l = embedding_loss<double>(q, im, tau);
    auto f = [&] {
      const Mat<double> s = (q * im.transpose()) / tau;
      double total = 0;
      for (Eigen::Index i = 0; i < s.rows(); ++i)
        total += std::log(s.row(i).array().exp().sum()) + std::log(s.col(i).array().exp().sum()) - 2 * s(i, i);
      return total / (2.0 * static_cast<double>(s.rows()));
    };
    worst_loss = std::max({worst_loss, check_gradient(f, q, l.d_queries, rng, 40), check_gradient(f, im, l.d_images, rng, 40)});
  }
  for (int t = 0; t < 10; ++t) {
    const int n = 1 + static_cast<int>(rng.below(4)), l = 1 + static_cast<int>(rng.below(6));
    Mat<double> z(n, l);
    Mat<uint8_t> y(n, l);
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      z.data()[i] = 2 * rng.normal();
      y.data()[i] = rng.bernoulli(0.5);
    }
    const AslParams a{0, 4, 0.05};
    const auto g = asl_loss<double>(z, y, a).d_logits;
    worst_loss = std::max(worst_loss, check_gradient([&] { return asl_loss<double>(z, y, a).value; }, z, g, rng, 30));
  }
  {
    std::vector<Mat<double>> logits;
    const std::vector<TokenSequence> targets{{kBos, 5, 6, kEos, kPad}, {kBos, 9, kEos}, {kBos, 4, 4, 8, kEos}};
    for (const auto& t : targets) {
      Mat<double> z(static_cast<Eigen::Index>(t.size()), 10);
      for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
      logits.push_back(z);
    }
    const auto l = caption_loss<double>(logits, targets);
    for (size_t i = 0; i < logits.size(); ++i)
      worst_loss = std::max(worst_loss, check_gradient([&] { return caption_loss<double>(logits, targets).value; }, logits[i], l.d_logits[i], rng, 40));
  }
  {
    ClassifierHead<double> head(5, 6, 4, rng);
    const Mat<double> emb = unit_rows(rng, 4, 5);
    Mat<uint8_t> y(4, 4);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.bernoulli(0.5);
    auto f = [&] {
      typename ClassifierHead<double>::Cache c;
      return asl_loss<double>(head.forward(emb, c), y, AslParams{}).value;
    };
    typename ClassifierHead<double>::Cache c;
    const auto l = asl_loss<double>(head.forward(emb, c), y, AslParams{});
    ClassifierHead<double> g = nn::zeros_like(head);
    head.backward(c, l.d_logits, g);
    auto pp = nn::param_list<double>(head);
    auto gp = nn::param_list<double>(g);
    for (size_t i = 0; i < pp.size(); ++i) worst_loss = std::max(worst_loss, check_gradient(f, *pp[i].second, *gp[i].second, rng, 20));
  }
  const ModelConfig cfg = tiny_config();
  {
    VisualEncoderParams<double> p(cfg, rng);
    const RasterImage img = random_image(rng, cfg.image_size);
    const RowVec<double> r = random_unit<double>(rng, cfg.embed_dim);
    VisualCache<double> cache;
    encode_image(img, p, cache);
    VisualEncoderParams<double> g = nn::zeros_like(p);
    encode_image_backward(p, cache, r, g);
    auto pp = nn::param_list<double>(p);
    auto gp = nn::param_list<double>(g);
    for (size_t i = 0; i < pp.size(); ++i)
      worst_enc = std::max(worst_enc, check_gradient([&] { return encode_image(img, p).values.dot(r); }, *pp[i].second, *gp[i].second, rng, 6));
  }
  {
    TextEncoderParams<double> p(cfg, rng);
    const TokenSequence seq{kBos, 5, 8, 6, kEos};
    const RowVec<double> r = random_unit<double>(rng, cfg.embed_dim);
    TextCache<double> cache;
    encode_text(seq, p, cache);
    TextEncoderParams<double> g = nn::zeros_like(p);
    encode_text_backward(p, cache, r, g);
    auto pp = nn::param_list<double>(p);
    auto gp = nn::param_list<double>(g);
    for (size_t i = 0; i < pp.size(); ++i) {
      const int samples = pp[i].first.find("tok") != std::string::npos ? 200 : 6;
      worst_enc = std::max(worst_enc, check_gradient([&] { return encode_text(seq, p).values.dot(r); }, *pp[i].second, *gp[i].second, rng, samples));
    }
  }
  o.require(worst_loss < 1e-4, fmt("loss gradient rel err %.3g", worst_loss));
  o.require(worst_enc < 1e-3, fmt("encoder gradient rel err %.3g", worst_enc));
  if (o.pass) o.detail = fmt("max rel err losses %.2g, encoders %.2g", worst_loss, worst_enc);
  return o;
}

Outcome retrieval_oracle() {
  Outcome o;
  Rng rng(4);
  const int n = 1000, d = 16;
  std::vector<std::string> ids;
  Mat<float> rows(n, d);
  for (int i = 0; i < n; ++i) {
    ids.push_back("r" + std::to_string((i * 7919) % n));
    rows.row(i) = random_unit<float>(rng, d);
    if (i > 0 && i < 20) rows.row(i) = rows.row(0);  // exact ties
  }
  const EmbeddingIndex index(ids, rows);
  for (int trial = 0; trial < 10; ++trial) {
    const Embedding<float> q{trial == 0 ? RowVec<float>(rows.row(0)) : random_unit<float>(rng, d), true};
    std::vector<std::pair<float, std::string>> all;
    for (int i = 0; i < n; ++i) all.emplace_back(rows.row(i).dot(q.values), ids[static_cast<size_t>(i)]);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    for (size_t k : {1u, 5u, 10u, 1000u}) {
      const auto got = retrieve(q, index, k).ranked;
      bool same = got.size() == k;
      for (size_t i = 0; same && i < k; ++i) same = got[i].id == all[i].second;
      o.require(same, "mismatch at k=" + std::to_string(k));
    }
  }
  return o;
}

Outcome weight_sharing() {
  Outcome o;
  const ModelConfig cfg = toy_model_config();
  Rng prng(5), rng(6);
  const VisualEncoderParams<float> p(cfg, prng);
  int equal = 0;
  for (int i = 0; i < 50; ++i) {
    const StrokeSketch s = random_sketch(rng, 1 + static_cast<int>(rng.below(8)));
    equal += encode_sketch(s, p, cfg.stroke_width).values == encode_image(rasterize(s, cfg.image_size, cfg.stroke_width), p).values;
  }
  o.require(equal == 50, std::to_string(50 - equal) + " sketches differ");
  return o;
}

Outcome decoder_causality() {
  Outcome o;
  const ModelConfig cfg = tiny_config();
  int violations = 0;
  for (uint64_t draw = 0; draw < 20; ++draw) {
    Rng rng(200 + draw);
    const DecoderParams<double> p(cfg, rng);
    const RowVec<double> c = random_unit<double>(rng, cfg.embed_dim);
    TokenSequence base{kBos};
    for (int i = 1; i + 1 < cfg.max_len; ++i) base.push_back(kNumReserved + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab_size - kNumReserved))));
    base.push_back(kEos);
    const Mat<double> z = teacher_forced_logits(c, base, p);
    for (size_t t = 0; t + 1 < base.size(); ++t) {
      TokenSequence changed = base;
      changed[t + 1] = changed[t + 1] == 4 ? 5 : 4;
      const auto keep = static_cast<Eigen::Index>(t + 1);
      violations += Mat<double>(z.topRows(keep)) != Mat<double>(teacher_forced_logits(c, changed, p).topRows(keep));
    }
  }
  o.require(violations == 0, std::to_string(violations) + " prefixes changed");
  return o;
}

Outcome augmentation_statistics() {
  Outcome o;
  StrokeSketch ten;
  for (int i = 0; i < 10; ++i) ten.strokes.push_back({{{i / 10.0, 0.0}, {i / 10.0, 1.0}}});
  TrainingTuple t;
  t.sketch = ten;
  t.query = {kBos, 5, kEos};
  int dropped = 0;
  for (int i = 0; i < 10000; ++i) {
    QueryDrop which{};
    query_dropout(t, 0.2, derive_seed(99, static_cast<uint64_t>(i)), &which);
    dropped += which != QueryDrop::None;
  }
  const double rate = dropped / 10000.0;
  o.require(std::abs(rate - 0.2) <= 0.02, fmt("query dropout rate %.4f", rate));
  Rng rng(7);
  double kept = 0;
  for (int i = 0; i < 10000; ++i) kept += static_cast<double>(stroke_dropout(ten, rng.uniform(0.6, 1.0), rng.next()).strokes.size()) / 10.0;
  kept /= 10000;
  o.require(kept >= 0.78 && kept <= 0.82, fmt("mean kept fraction %.4f", kept));
  int wrong = 0;
  for (size_t n = 1; n <= 12; ++n) {
    StrokeSketch s;
    for (size_t i = 0; i < n; ++i) s.strokes.push_back({{{0.1, 0.1}, {0.9, 0.9}}});
    for (double f : {0.2, 0.4, 0.6, 0.8, 1.0}) {
      const size_t expect = std::clamp<size_t>(static_cast<size_t>(std::floor(f * static_cast<double>(n) + 0.5)), 1, n);
      wrong += subsample_strokes(s, f, n).strokes.size() != expect;
    }
  }
  o.require(wrong == 0, std::to_string(wrong) + " subsample counts off");
  if (o.pass) o.detail = fmt("dropout rate %.4f, kept fraction %.4f", rate, kept);
  return o;
}

struct SeedRun {
  Recall both, text_only;
  std::vector<SweepRow> sweep;
  double seconds = 0;
};

std::vector<SeedRun> toy_runs;

Outcome toy_end_to_end() {
  Outcome o;
  double r5_both = 0, r5_text = 0;
  for (uint64_t seed = 0; seed < 3; ++seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset train_set = generate_toy_dataset(256, derive_seed(seed, 0x7A1), 64, "train").dataset;
    const Dataset held = generate_toy_dataset(64, derive_seed(seed, 0x4E1), 64, "held").dataset;
    const auto result = train<float>(train_set, toy_model_config(), toy_train_config(), seed);
    SeedRun run;
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const EmbeddingIndex index = build_index(held, result.model);
    run.both = evaluate(held, result.model, index, QueryMode::SketchText);
    run.text_only = evaluate(held, result.model, index, QueryMode::TextOnly);
    run.sweep = sketch_completeness_sweep(held, result.model, index, {0.2, 0.4, 0.6, 0.8, 1.0}, seed);
    std::printf("  seed %llu: train %.1fs, sketch+text R@1 %.3f R@5 %.3f, text-only R@5 %.3f\n", static_cast<unsigned long long>(seed),
                run.seconds, run.both.r1, run.both.r5, run.text_only.r5);
    o.require(run.seconds <= 600, fmt("seed %.0f trained in %.0fs", static_cast<double>(seed), run.seconds));
    o.require(run.both.r1 >= 0.078, fmt("seed %.0f R@1 %.3f below 0.078", static_cast<double>(seed), run.both.r1));
    r5_both += run.both.r5 / 3;
    r5_text += run.text_only.r5 / 3;
    toy_runs.push_back(run);
  }
  o.require(r5_both >= r5_text, fmt("mean R@5 sketch+text %.3f < text-only %.3f", r5_both, r5_text));
  if (o.pass) o.detail = fmt("mean R@5 sketch+text %.3f vs text-only %.3f", r5_both, r5_text);
  return o;
}

Outcome completeness_trend() {
  Outcome o;
  if (toy_runs.size() != 3) {
    o.require(false, "toy runs unavailable");
    return o;
  }
  double full = 0, fifth = 0;
  for (const auto& r : toy_runs) {
    fifth += r.sweep.front().recall.r5 / 3;
    full += r.sweep.back().recall.r5 / 3;
  }
  o.require(full >= fifth, fmt("R@5 at 1.0 %.3f < at 0.2 %.3f", full, fifth));
  if (o.pass) o.detail = fmt("mean R@5 at 0.2 %.3f, at 1.0 %.3f", fifth, full);
  return o;
}

Outcome ablation_plumbing() {
  Outcome o;
  const Dataset train_set = generate_toy_dataset(64, 0xAB1, 32, "abl").dataset;
  const Dataset eval_set = generate_toy_dataset(32, 0xAB2, 32, "ablev").dataset;
  ModelConfig cfg = toy_model_config();
  cfg.image_size = 32;
  TrainConfig tc = toy_train_config();
  tc.steps = 10;
  tc.batch_size = 16;
  const auto rows = run_ablation(train_set, eval_set, cfg, tc, 1);
  o.require(rows.size() == 5, "expected 5 ablation rows");
  const std::string csv = ablation_csv(rows);
  o.require(csv.rfind("variant,objective,combination,r1,r5,r10\n", 0) == 0, "bad ablation header");
  o.require(std::count(csv.begin(), csv.end(), '\n') == 6, "bad ablation row count");
  std::set<std::string> objectives, modes;
  for (const auto& r : rows) {
    objectives.insert(r.objective);
    modes.insert(r.combination);
    o.require(r.recall.r1 >= 0 && r.recall.r10 <= 1, "recall out of range for " + r.variant);
  }
  o.require(objectives.size() == 3 && modes.size() == 3, "variants do not cover all objectives and modes");

  Model<float> m(cfg, Vocabulary::build(train_set.all_captions()), train_set.categories(), 2);
  Rng rng(8);
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const auto s = m.sketch_embedding(random_sketch(rng, 3));
    const auto t = m.text_embedding(train_set.records[static_cast<size_t>(i)].captions.front());
    const auto a = combine_query(s, t, CombinationMode::ConcatProject, &m.params.concat_proj).values;
    const auto b = combine_query(s, t, CombinationMode::Sum, &m.params.concat_proj).values;
    worst = std::max(worst, static_cast<double>((a - b).cwiseAbs().maxCoeff()));
  }
  o.require(worst <= 1e-6, fmt("concat vs sum at init differ by %.3g", worst));
  if (o.pass) o.detail = fmt("concat vs sum max diff %.2g", worst);
  return o;
}

}  // namespace

int main() {
  criterion("loss identities", 1, loss_identities);
  criterion("ASL reductions", 1, asl_reductions);
  criterion("gradient suite", 60, gradient_suite);
  criterion("retrieval oracle", 10, retrieval_oracle);
  criterion("weight sharing", 0, weight_sharing);
  criterion("decoder causality", 0, decoder_causality);
  criterion("augmentation statistics", 0, augmentation_statistics);
  criterion("toy end-to-end", 0, toy_end_to_end);
  criterion("toy completeness trend", 0, completeness_trend);
  criterion("ablation plumbing", 0, ablation_plumbing);
  return failures == 0 ? 0 : 1;
}
