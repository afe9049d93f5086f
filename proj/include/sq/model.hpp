#pragma once

// Full model: both towers, fusion projection, classifier head, caption
// decoder and the learnable logit scale, plus the checkpoint format.
//
// Checkpoint layout ("sq-ckpt-v1"):
//   line 1: JSON header {format, config, vocab, categories, tensors:[{name, rows, cols, offset}]}
//   then:   little-endian float32 payload, tensors back to back in header order.

#include "sq/captioner.hpp"
#include "sq/core.hpp"
#include "sq/data.hpp"
#include "sq/encoders.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sq {

inline constexpr const char* kCheckpointFormat = "sq-ckpt-v1";

inline json config_to_json(const ModelConfig& c) {
  ordered_json o;
  o["embed_dim"] = c.embed_dim;
  o["image_size"] = c.image_size;
  o["patch_size"] = c.patch_size;
  o["vocab_size"] = c.vocab_size;
  o["max_len"] = c.max_len;
  o["num_labels"] = c.num_labels;
  o["enc_width"] = c.enc_width;
  o["enc_depth"] = c.enc_depth;
  o["enc_heads"] = c.enc_heads;
  o["text_width"] = c.text_width;
  o["text_depth"] = c.text_depth;
  o["text_heads"] = c.text_heads;
  o["mlp_ratio"] = c.mlp_ratio;
  o["dec_width"] = c.dec_width;
  o["dec_depth"] = c.dec_depth;
  o["dec_heads"] = c.dec_heads;
  o["classifier_hidden"] = c.classifier_hidden;
  o["temperature_init"] = c.temperature_init;
  o["w_c"] = c.w_c;
  o["w_d"] = c.w_d;
  o["w_e"] = c.w_e;
  o["asl_gamma_pos"] = c.asl_gamma_pos;
  o["asl_gamma_neg"] = c.asl_gamma_neg;
  o["asl_margin"] = c.asl_margin;
  o["combination"] = to_string(c.combination);
  o["stroke_width"] = c.stroke_width;
  return json(o);
}

/// Reads any subset of fields over `base`; unknown keys are rejected.
inline ModelConfig config_from_json(const json& j, ModelConfig c = {}) {
  for (const auto& [k, v] : j.items()) {
    if (k == "embed_dim") c.embed_dim = v.get<int>();
    else if (k == "image_size") c.image_size = v.get<int>();
    else if (k == "patch_size") c.patch_size = v.get<int>();
    else if (k == "vocab_size") c.vocab_size = v.get<int>();
    else if (k == "max_len") c.max_len = v.get<int>();
    else if (k == "num_labels") c.num_labels = v.get<int>();
    else if (k == "enc_width") c.enc_width = v.get<int>();
    else if (k == "enc_depth") c.enc_depth = v.get<int>();
    else if (k == "enc_heads") c.enc_heads = v.get<int>();
    else if (k == "text_width") c.text_width = v.get<int>();
    else if (k == "text_depth") c.text_depth = v.get<int>();
    else if (k == "text_heads") c.text_heads = v.get<int>();
    else if (k == "mlp_ratio") c.mlp_ratio = v.get<int>();
    else if (k == "dec_width") c.dec_width = v.get<int>();
    else if (k == "dec_depth") c.dec_depth = v.get<int>();
    else if (k == "dec_heads") c.dec_heads = v.get<int>();
    else if (k == "classifier_hidden") c.classifier_hidden = v.get<int>();
    else if (k == "temperature_init") c.temperature_init = v.get<double>();
    else if (k == "w_c") c.w_c = v.get<double>();
    else if (k == "w_d") c.w_d = v.get<double>();
    else if (k == "w_e") c.w_e = v.get<double>();
    else if (k == "asl_gamma_pos") c.asl_gamma_pos = v.get<double>();
    else if (k == "asl_gamma_neg") c.asl_gamma_neg = v.get<double>();
    else if (k == "asl_margin") c.asl_margin = v.get<double>();
    else if (k == "combination") c.combination = parse_combination_mode(v.get<std::string>());
    else if (k == "stroke_width") c.stroke_width = v.get<int>();
    else throw Error("model config: unknown key '" + k + "'");
  }
  return c;
}

template <typename T>
struct ModelParams {
  VisualEncoderParams<T> visual;
  TextEncoderParams<T> text;
  Mat<T> concat_proj;
  ClassifierHead<T> classifier;
  DecoderParams<T> decoder;
  Mat<T> logit_scale;  // 1x1, log(1 / temperature)

  ModelParams() = default;
  ModelParams(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng_v(derive_seed(seed, 1)), rng_t(derive_seed(seed, 2)), rng_c(derive_seed(seed, 3)), rng_d(derive_seed(seed, 4));
    visual = VisualEncoderParams<T>(cfg, rng_v);
    text = TextEncoderParams<T>(cfg, rng_t);
    concat_proj = concat_projection_init<T>(cfg.embed_dim);
    classifier = ClassifierHead<T>(cfg.embed_dim, cfg.hidden(), cfg.num_labels, rng_c);
    decoder = DecoderParams<T>(cfg, rng_d);
    logit_scale = Mat<T>::Constant(1, 1, static_cast<T>(std::log(1.0 / cfg.temperature_init)));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    const std::string p = prefix.empty() ? "" : prefix + ".";
    visual.visit(p + "visual", f);
    text.visit(p + "text", f);
    f(p + "fusion.concat_proj", concat_proj);
    classifier.visit(p + "classifier", f);
    decoder.visit(p + "decoder", f);
    f(p + "logit_scale", logit_scale);
  }
};

/// Temperature bounds: the logit scale 1/tau is clamped to [1e-3, 100].
inline constexpr double kMinLogitScale = 1e-3;
inline constexpr double kMaxLogitScale = 100.0;

template <typename T>
T temperature_of(const ModelParams<T>& p) {
  const double scale = std::clamp(std::exp(static_cast<double>(p.logit_scale(0, 0))), kMinLogitScale, kMaxLogitScale);
  return static_cast<T>(1.0 / scale);
}

template <typename T>
struct Model {
  ModelConfig config;
  ModelParams<T> params;
  Vocabulary vocab;
  std::vector<std::string> categories;

  Model() = default;
  Model(ModelConfig cfg, Vocabulary v, std::vector<std::string> cats, uint64_t seed)
      : config(std::move(cfg)), vocab(std::move(v)), categories(std::move(cats)) {
    config.vocab_size = vocab.size();
    config.num_labels = static_cast<int>(categories.size());
    params = ModelParams<T>(config, seed);
  }

  TokenSequence tokens(const std::string& text) const { return tokenize(text, vocab, config.max_len); }

  Embedding<T> image_embedding(const RasterImage& img) const { return encode_image(img, params.visual); }
  Embedding<T> sketch_embedding(const StrokeSketch& s) const { return encode_sketch(s, params.visual, config.stroke_width); }
  Embedding<T> text_embedding(const TokenSequence& t) const { return encode_text(t, params.text); }
  Embedding<T> text_embedding(const std::string& text) const { return encode_text(tokens(text), params.text); }

  Embedding<T> query_embedding(const StrokeSketch& sketch, const TokenSequence& text,
                               std::optional<CombinationMode> mode = std::nullopt) const {
    return combine_query(sketch_embedding(sketch), text_embedding(text), mode.value_or(config.combination), &params.concat_proj);
  }
};

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace detail {

inline void write_f32_le(std::ostream& out, float v) {
  uint32_t bits = std::bit_cast<uint32_t>(v);
  unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                        static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline float read_f32_le(const unsigned char* b) {
  const uint32_t bits = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
                        (static_cast<uint32_t>(b[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

/// 64-bit FNV-1a of a byte range, printed as 16 hex digits.
inline std::string fnv1a_hex(const unsigned char* data, size_t n) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
std::vector<unsigned char> serialize_checkpoint(Model<T>& model) {
  auto params = nn::param_list<T>(model.params);
  ordered_json header;
  header["format"] = kCheckpointFormat;
  header["config"] = ordered_json(config_to_json(model.config));
  header["vocab"] = model.vocab.tokens();
  header["categories"] = model.categories;
  ordered_json tensors = ordered_json::array();
  size_t offset = 0;
  for (const auto& [name, m] : params) {
    ordered_json t;
    t["name"] = name;
    t["rows"] = m->rows();
    t["cols"] = m->cols();
    t["offset"] = offset;
    tensors.push_back(std::move(t));
    offset += static_cast<size_t>(m->size());
  }
  header["tensors"] = std::move(tensors);
  std::ostringstream out(std::ios::binary);
  out << header.dump() << '\n';
  for (const auto& [name, m] : params)
    for (Eigen::Index i = 0; i < m->size(); ++i) detail::write_f32_le(out, static_cast<float>(m->data()[i]));
  const std::string s = out.str();
  return {s.begin(), s.end()};
}

template <typename T>
std::string save_checkpoint(const std::string& path, Model<T>& model) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write on checkpoint " + path);
  return fnv1a_hex(bytes.data(), bytes.size());
}

template <typename T>
Model<T> deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  const auto nl = std::find(bytes.begin(), bytes.end(), static_cast<unsigned char>('\n'));
  if (nl == bytes.end()) throw Error("checkpoint: missing header");
  json header;
  try {
    header = json::parse(std::string(bytes.begin(), nl));
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint: bad header: ") + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat)
    throw Error("checkpoint: unsupported format '" + header.value("format", "") + "'");
  Model<T> model;
  model.config = config_from_json(header.at("config"));
  model.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
  model.categories = header.at("categories").get<std::vector<std::string>>();
  model.params = ModelParams<T>(model.config, 0);
  auto params = nn::param_list<T>(model.params);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size()) throw Error("checkpoint: tensor count does not match config");
  const unsigned char* payload = &*nl + 1;
  const size_t payload_size = static_cast<size_t>(bytes.end() - nl - 1);
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    Mat<T>& m = *params[i].second;
    if (t.at("name").get<std::string>() != params[i].first || t.at("rows").get<Eigen::Index>() != m.rows() ||
        t.at("cols").get<Eigen::Index>() != m.cols())
      throw Error("checkpoint: tensor '" + t.at("name").get<std::string>() + "' does not match the model layout");
    const size_t off = t.at("offset").get<size_t>();
    if ((off + static_cast<size_t>(m.size())) * 4 > payload_size) throw Error("checkpoint: truncated payload");
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<T>(detail::read_f32_le(payload + (off + k) * 4));
  }
  return model;
}

template <typename T>
Model<T> load_checkpoint(const std::string& path, std::string* hash = nullptr) {
  const auto bytes = read_file_bytes(path);
  if (hash != nullptr) *hash = fnv1a_hex(bytes.data(), bytes.size());
  return deserialize_checkpoint<T>(bytes);
}

template <typename T>
std::string checkpoint_hash(Model<T>& model) {
  const auto bytes = serialize_checkpoint(model);
  return fnv1a_hex(bytes.data(), bytes.size());
}

/// Copies a model into another scalar type.
template <typename To, typename From>
Model<To> cast_model(Model<From>& m) {
  Model<To> out;
  out.config = m.config;
  out.vocab = m.vocab;
  out.categories = m.categories;
  out.params = ModelParams<To>(m.config, 0);
  nn::cast_params<To, From>(m.params, out.params);
  return out;
}

}  // namespace sq
