#pragma once

// Exact cosine retrieval over unit-norm image embeddings, recall@K and the
// sketch/text completeness sweeps.

#include "sq/core.hpp"
#include "sq/data.hpp"
#include "sq/model.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace sq {

inline constexpr const char* kIndexFormat = "sq-index-v1";

/// Immutable id -> embedding store. Rows are unit-norm.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  EmbeddingIndex(std::vector<std::string> ids, Mat<float> rows, std::string checkpoint_hash = "")
      : ids_(std::move(ids)), rows_(std::move(rows)), checkpoint_hash_(std::move(checkpoint_hash)) {
    if (static_cast<Eigen::Index>(ids_.size()) != rows_.rows()) throw ShapeError("EmbeddingIndex: id/row count mismatch");
    for (Eigen::Index i = 0; i < rows_.rows(); ++i)
      if (std::abs(rows_.row(i).norm() - 1.0f) > 1e-4f)
        throw DegenerateEmbedding("EmbeddingIndex: row " + ids_[static_cast<size_t>(i)] + " is not unit-norm");
  }

  size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  Eigen::Index dim() const { return rows_.cols(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Mat<float>& rows() const { return rows_; }
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }

  std::optional<size_t> position(const std::string& id) const {
    auto it = std::find(ids_.begin(), ids_.end(), id);
    if (it == ids_.end()) return std::nullopt;
    return static_cast<size_t>(it - ids_.begin());
  }

 private:
  std::vector<std::string> ids_;
  Mat<float> rows_;
  std::string checkpoint_hash_;
};

struct ScoredId {
  std::string id;
  float score = 0;
  bool operator==(const ScoredId&) const = default;
};

struct RetrievalResult {
  std::vector<ScoredId> ranked;
  Embedding<float> query;
};

/// Exact top-k by dot product; ties broken by ascending id.
inline RetrievalResult retrieve(const Embedding<float>& q, const EmbeddingIndex& index, size_t k) {
  if (k < 1) throw Error("retrieve: k must be at least 1");
  RetrievalResult res;
  res.query = q;
  if (index.empty()) return res;
  if (q.dim() != index.dim()) throw ShapeError("retrieve: query dimension does not match index");
  const Eigen::VectorXf scores = index.rows() * q.values.transpose();
  std::vector<size_t> order(index.size());
  std::iota(order.begin(), order.end(), size_t{0});
  const auto& ids = index.ids();
  auto better = [&](size_t a, size_t b) {
    if (scores(static_cast<Eigen::Index>(a)) != scores(static_cast<Eigen::Index>(b)))
      return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
    return ids[a] < ids[b];
  };
  const size_t top = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(), better);
  res.ranked.reserve(top);
  for (size_t i = 0; i < top; ++i) res.ranked.push_back({ids[order[i]], scores(static_cast<Eigen::Index>(order[i]))});
  return res;
}

/// Fraction of queries whose target id appears in the first k results. A k
/// larger than a result list simply covers the whole list.
inline double recall_at_k(const std::vector<RetrievalResult>& results, const std::vector<std::string>& targets, size_t k) {
  if (results.size() != targets.size()) throw Error("recall_at_k: one target per query required");
  if (results.empty()) return 0.0;
  size_t hits = 0;
  for (size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i].ranked;
    const size_t n = std::min(k, r.size());
    for (size_t j = 0; j < n; ++j) {
      if (r[j].id == targets[i]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

struct Recall {
  double r1 = 0, r5 = 0, r10 = 0;
  bool operator==(const Recall&) const = default;
};

inline Recall recall_triple(const std::vector<RetrievalResult>& results, const std::vector<std::string>& targets) {
  return {recall_at_k(results, targets, 1), recall_at_k(results, targets, 5), recall_at_k(results, targets, 10)};
}

// ---------------------------------------------------------------------------
// Index build and file format
// ---------------------------------------------------------------------------

inline EmbeddingIndex build_index(const Dataset& data, const Model<float>& model, const std::string& checkpoint_hash = "") {
  std::vector<std::string> ids;
  Mat<float> rows(static_cast<Eigen::Index>(data.size()), model.config.embed_dim);
  for (size_t i = 0; i < data.size(); ++i) {
    ids.push_back(data.records[i].id);
    rows.row(static_cast<Eigen::Index>(i)) = model.image_embedding(data.records[i].image).values;
  }
  return EmbeddingIndex(std::move(ids), std::move(rows), checkpoint_hash);
}

inline EmbeddingIndex build_index(const std::string& manifest_path, const std::string& checkpoint_path) {
  std::string hash;
  Model<float> model = load_checkpoint<float>(checkpoint_path, &hash);
  return build_index(load_dataset(manifest_path), model, hash);
}

inline void save_index(const std::string& path, const EmbeddingIndex& index) {
  ordered_json h;
  h["format"] = kIndexFormat;
  h["dim"] = index.dim();
  h["count"] = index.size();
  h["checkpoint_hash"] = index.checkpoint_hash();
  h["ids"] = index.ids();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write index " + path);
  out << h.dump() << '\n';
  const auto& m = index.rows();
  for (Eigen::Index i = 0; i < m.size(); ++i) detail::write_f32_le(out, m.data()[i]);
}

inline EmbeddingIndex load_index(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  const auto nl = std::find(bytes.begin(), bytes.end(), static_cast<unsigned char>('\n'));
  if (nl == bytes.end()) throw Error("index: missing header");
  json h;
  try {
    h = json::parse(std::string(bytes.begin(), nl));
  } catch (const json::exception& e) {
    throw Error(std::string("index: bad header: ") + e.what());
  }
  if (h.value("format", "") != kIndexFormat) throw Error("index: unsupported format");
  const auto dim = h.at("dim").get<Eigen::Index>();
  const auto count = h.at("count").get<Eigen::Index>();
  auto ids = h.at("ids").get<std::vector<std::string>>();
  if (static_cast<Eigen::Index>(ids.size()) != count) throw Error("index: id count mismatch");
  const unsigned char* payload = &*nl + 1;
  if (static_cast<size_t>(bytes.end() - nl - 1) < static_cast<size_t>(dim * count) * 4) throw Error("index: truncated payload");
  Mat<float> rows(count, dim);
  for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = detail::read_f32_le(payload + i * 4);
  return EmbeddingIndex(std::move(ids), std::move(rows), h.value("checkpoint_hash", ""));
}

// ---------------------------------------------------------------------------
// Query evaluation
// ---------------------------------------------------------------------------

inline StrokeSketch record_sketch(const Record& r) { return r.sketch ? *r.sketch : synthesize_sketch(r.image); }

/// Runs one query per record against `index` (target = the record's own
/// id) and reports R@{1,5,10}. The callbacks build each query's sketch and
/// text.
inline Recall evaluate_queries(const Dataset& data, const Model<float>& model, const EmbeddingIndex& index,
                               const std::function<StrokeSketch(size_t)>& sketch_of,
                               const std::function<TokenSequence(size_t)>& text_of,
                               std::optional<CombinationMode> mode = std::nullopt) {
  std::vector<RetrievalResult> results;
  std::vector<std::string> targets;
  results.reserve(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    results.push_back(retrieve(model.query_embedding(sketch_of(i), text_of(i), mode), index, 10));
    targets.push_back(data.records[i].id);
  }
  return recall_triple(results, targets);
}

struct SweepRow {
  double fraction = 0;
  Recall recall;
};

inline std::vector<SweepRow> sketch_completeness_sweep(const Dataset& data, const Model<float>& model, const EmbeddingIndex& index,
                                                       const std::vector<double>& fractions, uint64_t seed) {
  std::vector<StrokeSketch> full;
  for (const auto& r : data.records) full.push_back(record_sketch(r));
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    const Recall rc = evaluate_queries(
        data, model, index, [&](size_t i) { return subsample_strokes(full[i], f, derive_seed(seed, 0x5C, i)); },
        [&](size_t i) { return model.tokens(data.records[i].captions.front()); });
    rows.push_back({f, rc});
  }
  return rows;
}

inline std::vector<SweepRow> sketch_completeness_sweep(const Dataset& data, const Model<float>& model,
                                                       const std::vector<double>& fractions = {0.2, 0.4, 0.6, 0.8, 1.0},
                                                       uint64_t seed = 0) {
  return sketch_completeness_sweep(data, model, build_index(data, model), fractions, seed);
}

inline std::vector<SweepRow> text_completeness_sweep(const Dataset& data, const Model<float>& model, const EmbeddingIndex& index,
                                                     const std::vector<double>& fractions, uint64_t seed) {
  std::vector<StrokeSketch> full;
  for (const auto& r : data.records) full.push_back(record_sketch(r));
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    const Recall rc = evaluate_queries(
        data, model, index, [&](size_t i) { return full[i]; },
        [&](size_t i) { return model.tokens(subsample_words(data.records[i].captions.front(), f, derive_seed(seed, 0x7E, i))); });
    rows.push_back({f, rc});
  }
  return rows;
}

inline std::vector<SweepRow> text_completeness_sweep(const Dataset& data, const Model<float>& model,
                                                     const std::vector<double>& fractions = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0},
                                                     uint64_t seed = 0) {
  return text_completeness_sweep(data, model, build_index(data, model), fractions, seed);
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "fraction,r1,r5,r10\n";
  out.precision(6);
  for (const auto& r : rows) out << r.fraction << ',' << r.recall.r1 << ',' << r.recall.r5 << ',' << r.recall.r10 << '\n';
  return out.str();
}

}  // namespace sq
