#pragma once

// Training loop, classifier warm-up, evaluation modes and the ablation
// driver.

#include "sq/data.hpp"
#include "sq/model.hpp"
#include "sq/objectives.hpp"
#include "sq/optim.hpp"
#include "sq/retrieval.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

namespace sq {

struct TrainConfig {
  AdamConfig adam{};  // lr 1e-5 for fine-tuning a pretrained model
  int batch_size = 32;
  int steps = 1000;
  int epochs = 10;  // full-scale reference only; desk runs are step-bounded
  AugmentationConfig augmentation{};
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::string out_dir;       // empty: nothing written

  int warmup_steps = 500;
  int warmup_drop_step = 50;
  double warmup_lr_start = 1e-4;
  double warmup_lr_end = 1e-5;
};

inline json train_config_to_json(const TrainConfig& c) {
  ordered_json o;
  o["lr"] = c.adam.lr;
  o["beta1"] = c.adam.beta1;
  o["beta2"] = c.adam.beta2;
  o["eps"] = c.adam.eps;
  o["batch_size"] = c.batch_size;
  o["steps"] = c.steps;
  o["epochs"] = c.epochs;
  o["augment"] = c.augmentation.enabled;
  o["query_dropout"] = c.augmentation.query_dropout;
  o["completeness_min"] = c.augmentation.completeness_min;
  o["completeness_max"] = c.augmentation.completeness_max;
  o["checkpoint_every"] = c.checkpoint_every;
  o["warmup_steps"] = c.warmup_steps;
  o["warmup_drop_step"] = c.warmup_drop_step;
  o["warmup_lr_start"] = c.warmup_lr_start;
  o["warmup_lr_end"] = c.warmup_lr_end;
  return json(o);
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  for (const auto& [k, v] : j.items()) {
    if (k == "lr") c.adam.lr = v.get<double>();
    else if (k == "beta1") c.adam.beta1 = v.get<double>();
    else if (k == "beta2") c.adam.beta2 = v.get<double>();
    else if (k == "eps") c.adam.eps = v.get<double>();
    else if (k == "batch_size") c.batch_size = v.get<int>();
    else if (k == "steps") c.steps = v.get<int>();
    else if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "augment") c.augmentation.enabled = v.get<bool>();
    else if (k == "query_dropout") c.augmentation.query_dropout = v.get<double>();
    else if (k == "completeness_min") c.augmentation.completeness_min = v.get<double>();
    else if (k == "completeness_max") c.augmentation.completeness_max = v.get<double>();
    else if (k == "checkpoint_every") c.checkpoint_every = v.get<int>();
    else if (k == "warmup_steps") c.warmup_steps = v.get<int>();
    else if (k == "warmup_drop_step") c.warmup_drop_step = v.get<int>();
    else if (k == "warmup_lr_start") c.warmup_lr_start = v.get<double>();
    else if (k == "warmup_lr_end") c.warmup_lr_end = v.get<double>();
    else throw Error("train config: unknown key '" + k + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// One optimization step's worth of forward + backward
// ---------------------------------------------------------------------------

template <typename T>
struct StepResult {
  LossBreakdown loss;
  ModelParams<T> grads;
};

/// Forward and backward over a batch. L_e pairs each fused query with its
/// image; L_c runs one shared head over fused queries and images; L_d
/// averages the caption loss conditioned on the image and on the sketch.
template <typename T>
StepResult<T> compute_step(const Model<T>& model, const std::vector<TrainingTuple>& batch, bool need_grads = true) {
  const auto& cfg = model.config;
  const auto& P = model.params;
  const size_t n = batch.size();
  if (n == 0) throw ShapeError("compute_step: empty batch");
  const Eigen::Index d = cfg.embed_dim;

  std::vector<VisualCache<T>> img_cache(n), sk_cache(n);
  std::vector<TextCache<T>> txt_cache(n);
  std::vector<CombineCache<T>> comb_cache(n);
  std::vector<Embedding<T>> img(n), sk(n), txt(n);
  Mat<T> Q(static_cast<Eigen::Index>(n), d), I(static_cast<Eigen::Index>(n), d);
  for (size_t i = 0; i < n; ++i) {
    img[i] = encode_image(batch[i].image, P.visual, img_cache[i]);
    sk[i] = encode_sketch(batch[i].sketch, P.visual, sk_cache[i], cfg.stroke_width);
    txt[i] = encode_text(batch[i].query, P.text, txt_cache[i]);
    Q.row(static_cast<Eigen::Index>(i)) = combine_query(sk[i], txt[i], cfg.combination, &P.concat_proj, comb_cache[i]).values;
    I.row(static_cast<Eigen::Index>(i)) = img[i].values;
  }

  const T tau = temperature_of(P);
  const EmbeddingLoss<T> le = embedding_loss<T>(Q, I, tau);

  Mat<T> both(2 * static_cast<Eigen::Index>(n), d);
  both << Q, I;
  Mat<uint8_t> labels(2 * static_cast<Eigen::Index>(n), cfg.num_labels);
  for (size_t i = 0; i < n; ++i) {
    if (static_cast<int>(batch[i].labels.size()) != cfg.num_labels) throw ShapeError("compute_step: label vector length mismatch");
    for (int j = 0; j < cfg.num_labels; ++j) {
      labels(static_cast<Eigen::Index>(i), j) = batch[i].labels[static_cast<size_t>(j)];
      labels(static_cast<Eigen::Index>(n + i), j) = batch[i].labels[static_cast<size_t>(j)];
    }
  }
  typename ClassifierHead<T>::Cache head_cache;
  const AslLoss<T> lc = asl_loss<T>(P.classifier.forward(both, head_cache), labels, asl_of(cfg));

  std::vector<DecoderCache<T>> dec_img(n), dec_sk(n);
  std::vector<Mat<T>> logits_img(n), logits_sk(n);
  std::vector<TokenSequence> targets(n);
  for (size_t i = 0; i < n; ++i) {
    targets[i] = batch[i].caption;
    logits_img[i] = teacher_forced_logits<T>(img[i].values, targets[i], P.decoder, dec_img[i]);
    logits_sk[i] = teacher_forced_logits<T>(sk[i].values, targets[i], P.decoder, dec_sk[i]);
  }
  const CaptionLoss<T> cl_img = caption_loss<T>(logits_img, targets);
  const CaptionLoss<T> cl_sk = caption_loss<T>(logits_sk, targets);
  const double l_d = 0.5 * (static_cast<double>(cl_img.value) + static_cast<double>(cl_sk.value));

  StepResult<T> out;
  out.loss = total_loss(static_cast<double>(le.value), static_cast<double>(lc.value), l_d, weights_of(cfg));
  if (!need_grads) return out;

  out.grads = nn::zeros_like(P);
  auto& G = out.grads;
  const T we = T(cfg.w_e), wc = T(cfg.w_c), wd = T(cfg.w_d);

  Mat<T> dQ = we * le.d_queries, dI = we * le.d_images;
  const double scale = std::exp(static_cast<double>(P.logit_scale(0, 0)));
  if (scale > kMinLogitScale && scale < kMaxLogitScale) G.logit_scale(0, 0) += we * le.d_temperature * (-tau);

  if (wc != T(0)) {
    const Mat<T> d_both = P.classifier.backward(head_cache, wc * lc.d_logits, G.classifier);
    dQ += d_both.topRows(static_cast<Eigen::Index>(n));
    dI += d_both.bottomRows(static_cast<Eigen::Index>(n));
  }

  std::vector<RowVec<T>> dS(n, RowVec<T>::Zero(d));
  if (wd != T(0)) {
    for (size_t i = 0; i < n; ++i) {
      dI.row(static_cast<Eigen::Index>(i)) +=
          teacher_forced_backward<T>(P.decoder, dec_img[i], (wd * T(0.5)) * cl_img.d_logits[i], G.decoder);
      dS[i] += teacher_forced_backward<T>(P.decoder, dec_sk[i], (wd * T(0.5)) * cl_sk.d_logits[i], G.decoder);
    }
  }

  for (size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    RowVec<T> ds, dt;
    combine_query_backward<T>(sk[i], txt[i], cfg.combination, &P.concat_proj, comb_cache[i], dQ.row(row), ds, dt, &G.concat_proj);
    dS[i] += ds;
    encode_image_backward<T>(P.visual, img_cache[i], dI.row(row), G.visual);
    encode_image_backward<T>(P.visual, sk_cache[i], dS[i], G.visual);
    encode_text_backward<T>(P.text, txt_cache[i], dt, G.text);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepMetrics {
  long step = 0;
  LossBreakdown loss;
  double lr = 0;
};

inline std::string metrics_line(const StepMetrics& m) {
  ordered_json o;
  o["step"] = m.step;
  o["l_e"] = m.loss.l_e;
  o["l_c"] = m.loss.l_c;
  o["l_d"] = m.loss.l_d;
  o["total"] = m.loss.total;
  o["lr"] = m.lr;
  return o.dump();
}

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<StepMetrics> log;
  std::vector<std::string> checkpoints;
};

/// Raised when a step produces a non-finite loss; checkpoints already on
/// disk are left untouched.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& msg, long step) : Error(msg), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

template <typename T>
void clamp_logit_scale(ModelParams<T>& p) {
  p.logit_scale(0, 0) = std::clamp(p.logit_scale(0, 0), static_cast<T>(std::log(kMinLogitScale)), static_cast<T>(std::log(kMaxLogitScale)));
}

/// Fixed record order per epoch; batches walk the permutation.
inline std::vector<size_t> batch_indices(size_t dataset_size, size_t batch_size, long step, uint64_t seed) {
  if (batch_size > dataset_size) throw DataError("batch size exceeds dataset size");
  const size_t per_epoch = dataset_size / batch_size;
  const long epoch = step / static_cast<long>(per_epoch);
  const size_t offset = static_cast<size_t>(step % static_cast<long>(per_epoch)) * batch_size;
  std::vector<size_t> perm(dataset_size);
  std::iota(perm.begin(), perm.end(), size_t{0});
  Rng rng(derive_seed(seed, 0xE90C, static_cast<uint64_t>(epoch)));
  for (size_t i = dataset_size; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return {perm.begin() + static_cast<std::ptrdiff_t>(offset), perm.begin() + static_cast<std::ptrdiff_t>(offset + batch_size)};
}

using StepCallback = std::function<void(const StepMetrics&)>;

/// Trains `model` in place on `data`.
template <typename T>
TrainResult<T> train(Model<T> model, const Dataset& data, const TrainConfig& tc, uint64_t seed, const StepCallback& on_step = {}) {
  TrainResult<T> res;
  const BatchContext ctx{&model.vocab, &model.categories, model.config.max_len};
  Adam<T, ModelParams<T>> opt(model.params, tc.adam);
  std::ofstream metrics;
  if (!tc.out_dir.empty()) {
    std::filesystem::create_directories(tc.out_dir);
    metrics.open((std::filesystem::path(tc.out_dir) / "metrics.jsonl").string());
  }
  auto save = [&](const std::string& name) {
    if (tc.out_dir.empty()) return;
    const std::string path = (std::filesystem::path(tc.out_dir) / name).string();
    save_checkpoint(path, model);
    res.checkpoints.push_back(path);
  };
  for (long step = 0; step < tc.steps; ++step) {
    const auto idx = batch_indices(data.size(), static_cast<size_t>(tc.batch_size), step, seed);
    const auto batch = make_batch(data, idx, tc.augmentation, ctx, derive_seed(seed, 0xB47C, static_cast<uint64_t>(step)));
    StepResult<T> sr;
    try {
      sr = compute_step(model, batch);
    } catch (const NonFiniteLoss& e) {
      throw TrainingAborted(std::string("training aborted at step ") + std::to_string(step) + ": " + e.what(), step);
    } catch (const DegenerateEmbedding& e) {
      throw TrainingAborted(std::string("training aborted at step ") + std::to_string(step) + ": " + e.what(), step);
    }
    const StepMetrics m{step, sr.loss, opt.lr()};
    res.log.push_back(m);
    if (metrics.is_open()) metrics << metrics_line(m) << '\n' << std::flush;
    if (on_step) on_step(m);
    opt.step(model.params, sr.grads);
    clamp_logit_scale(model.params);
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 && step + 1 < tc.steps)
      save("ckpt-" + std::to_string(step + 1) + ".bin");
  }
  save("model.ckpt");
  res.model = std::move(model);
  return res;
}

/// Builds vocabulary and categories from `data`, initializes from `seed`
/// and trains.
template <typename T = float>
TrainResult<T> train(const Dataset& data, const ModelConfig& cfg, const TrainConfig& tc, uint64_t seed,
                     const StepCallback& on_step = {}) {
  Model<T> model(cfg, Vocabulary::build(data.all_captions()), data.categories(), derive_seed(seed, 0x1417));
  return train(std::move(model), data, tc, seed, on_step);
}

// ---------------------------------------------------------------------------
// Classifier warm-up on frozen embeddings
// ---------------------------------------------------------------------------

/// Fits only the classifier head with the asymmetric loss on fixed
/// embeddings; the learning rate drops from `warmup_lr_start` to
/// `warmup_lr_end` after `warmup_drop_step` steps.
template <typename T>
ClassifierHead<T> warmup_classifier(ClassifierHead<T> head, const Mat<T>& embeddings, const Mat<uint8_t>& labels,
                                    const AslParams& asl, const TrainConfig& tc, std::vector<double>* losses = nullptr) {
  AdamConfig ac = tc.adam;
  ac.lr = tc.warmup_lr_start;
  Adam<T, ClassifierHead<T>> opt(head, ac);
  for (int step = 0; step < tc.warmup_steps; ++step) {
    opt.set_lr(step < tc.warmup_drop_step ? tc.warmup_lr_start : tc.warmup_lr_end);
    typename ClassifierHead<T>::Cache cache;
    const AslLoss<T> l = asl_loss<T>(head.forward(embeddings, cache), labels, asl);
    if (losses != nullptr) losses->push_back(static_cast<double>(l.value));
    ClassifierHead<T> grad = nn::zeros_like(head);
    head.backward(cache, l.d_logits, grad);
    opt.step(head, grad);
  }
  return head;
}

/// Embeds every record with the (frozen) encoders: the fused query of its
/// sketch and first caption, and its image. Returns the head to install.
template <typename T>
ClassifierHead<T> warmup_classifier(const Model<T>& model, const Dataset& data, const TrainConfig& tc,
                                    std::vector<double>* losses = nullptr) {
  const auto n = static_cast<Eigen::Index>(data.size());
  Mat<T> emb(2 * n, model.config.embed_dim);
  Mat<uint8_t> labels(2 * n, model.config.num_labels);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Record& r = data.records[static_cast<size_t>(i)];
    emb.row(i) = model.query_embedding(record_sketch(r), model.tokens(r.captions.front())).values;
    emb.row(n + i) = model.image_embedding(r.image).values;
    const LabelSet ls = label_vector(r.labels, model.categories);
    for (int j = 0; j < model.config.num_labels; ++j) labels(i, j) = labels(n + i, j) = ls[static_cast<size_t>(j)];
  }
  return warmup_classifier(model.params.classifier, emb, labels, asl_of(model.config), tc, losses);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class QueryMode { SketchText, SketchOnly, TextOnly };

inline std::string to_string(QueryMode m) {
  switch (m) {
    case QueryMode::SketchText: return "sketch+text";
    case QueryMode::SketchOnly: return "sketch-only";
    case QueryMode::TextOnly: return "text-only";
  }
  return "sketch+text";
}

inline QueryMode parse_query_mode(const std::string& s) {
  if (s == "sketch+text" || s == "both") return QueryMode::SketchText;
  if (s == "sketch-only" || s == "sketch") return QueryMode::SketchOnly;
  if (s == "text-only" || s == "text") return QueryMode::TextOnly;
  throw Error("unknown query mode: " + s);
}

/// One query per record (its sketch and first caption) against an index of
/// the same records. A missing modality is replaced by its empty input.
inline Recall evaluate(const Dataset& data, const Model<float>& model, const EmbeddingIndex& index, QueryMode mode) {
  return evaluate_queries(
      data, model, index,
      [&](size_t i) { return mode == QueryMode::TextOnly ? StrokeSketch{} : record_sketch(data.records[i]); },
      [&](size_t i) { return mode == QueryMode::SketchOnly ? empty_text() : model.tokens(data.records[i].captions.front()); });
}

inline Recall evaluate(const Dataset& data, const Model<float>& model, QueryMode mode) {
  return evaluate(data, model, build_index(data, model), mode);
}

// ---------------------------------------------------------------------------
// Ablation driver
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::string objective;
  std::string combination;
  Recall recall;
};

struct AblationVariant {
  std::string name;
  bool use_lc;
  bool use_ld;
  CombinationMode mode;
};

inline std::vector<AblationVariant> default_ablation_variants() {
  return {{"L_e", false, false, CombinationMode::Sum},
          {"L_e+L_c", true, false, CombinationMode::Sum},
          {"L_e+L_c+L_d", true, true, CombinationMode::Sum},
          {"feature_max", true, true, CombinationMode::Max},
          {"feature_concat", true, true, CombinationMode::ConcatProject}};
}

inline std::vector<AblationRow> run_ablation(const Dataset& train_data, const Dataset& eval_data, const ModelConfig& base,
                                             const TrainConfig& tc, uint64_t seed,
                                             const std::vector<AblationVariant>& variants = default_ablation_variants()) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    ModelConfig cfg = base;
    if (!v.use_lc) cfg.w_c = 0.0;
    if (!v.use_ld) cfg.w_d = 0.0;
    cfg.combination = v.mode;
    auto result = train<float>(train_data, cfg, tc, seed);
    const std::string objective = std::string("L_e") + (v.use_lc ? "+L_c" : "") + (v.use_ld ? "+L_d" : "");
    rows.push_back({v.name, objective, to_string(v.mode), evaluate(eval_data, result.model, QueryMode::SketchText)});
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant,objective,combination,r1,r5,r10\n";
  out.precision(6);
  for (const auto& r : rows)
    out << r.variant << ',' << r.objective << ',' << r.combination << ',' << r.recall.r1 << ',' << r.recall.r5 << ',' << r.recall.r10 << '\n';
  return out.str();
}

}  // namespace sq

namespace sq {

/// Small configuration sized for from-scratch training on the toy scenes
/// on a single CPU core.
inline ModelConfig toy_model_config() {
  ModelConfig c;
  c.embed_dim = 64;
  c.image_size = 64;
  c.patch_size = 8;
  c.enc_width = 64;
  c.enc_heads = 4;
  c.text_width = 64;
  c.text_heads = 4;
  c.dec_width = 64;
  c.dec_depth = 2;
  c.dec_heads = 4;
  return c;
}

inline TrainConfig toy_train_config() {
  TrainConfig t;
  t.adam.lr = 1e-3;
  t.batch_size = 32;
  t.steps = 600;
  t.warmup_lr_start = 1e-2;
  t.warmup_lr_end = 1e-3;
  return t;
}

}  // namespace sq
