#pragma once

// HTTP retrieval endpoint over a loaded checkpoint and image index.

#include "sq/image_io.hpp"
#include "sq/retrieval.hpp"

#include <httplib.h>

#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>

namespace sq {

inline std::string base64_decode(const std::string& in) {
  static const auto table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    const char* chars = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(chars[i])] = i;
    t['-'] = 62;
    t['_'] = 63;
    return t;
  }();
  std::string out;
  unsigned buf = 0;
  int bits = 0;
  for (unsigned char c : in) {
    if (c == '=' || std::isspace(c)) continue;
    const int v = table[c];
    if (v < 0) throw DataError("invalid base64 input");
    buf = (buf << 6) | static_cast<unsigned>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((buf >> bits) & 0xFF));
    }
  }
  return out;
}

/// Nearest-neighbour resample to a square `size` x `size` RGB raster.
/// Grayscale and alpha channels are folded to RGB by the PNG decoder.
inline RasterImage resize_nearest(const RasterImage& img, int size) {
  if (img.height == size && img.width == size) return img;
  RasterImage out(size, size);
  for (int y = 0; y < size; ++y) {
    const int sy = std::min(img.height - 1, y * img.height / size);
    for (int x = 0; x < size; ++x) {
      const int sx = std::min(img.width - 1, x * img.width / size);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

/// Everything a request reads. Immutable once published.
struct ServiceState {
  Model<float> model;
  EmbeddingIndex index;
  std::string images_dir;
  std::string checkpoint_hash;
};

struct ServicePaths {
  std::string checkpoint;
  std::string index;
  std::string images_dir;
};

inline std::shared_ptr<const ServiceState> load_service_state(const ServicePaths& paths) {
  auto st = std::make_shared<ServiceState>();
  st->model = load_checkpoint<float>(paths.checkpoint, &st->checkpoint_hash);
  st->index = load_index(paths.index);
  if (!st->index.checkpoint_hash().empty() && st->index.checkpoint_hash() != st->checkpoint_hash)
    throw Error("index was built with checkpoint " + st->index.checkpoint_hash() + ", loaded " + st->checkpoint_hash);
  if (!st->index.empty() && st->index.dim() != st->model.config.embed_dim) throw ShapeError("index dimension does not match checkpoint");
  st->images_dir = paths.images_dir;
  return st;
}

struct HttpReply {
  int status = 200;
  json body;
};

class RetrievalService {
 public:
  RetrievalService() = default;
  explicit RetrievalService(ServicePaths paths) : paths_(std::move(paths)) {}

  void publish(std::shared_ptr<const ServiceState> st) {
    std::lock_guard<std::mutex> lock(mu_);
    state_ = std::move(st);
  }

  /// Loads fresh artifacts and swaps them in; on failure the current state
  /// and paths stay published.
  void reload(const std::optional<ServicePaths>& paths = std::nullopt) {
    const ServicePaths p = paths ? *paths : paths_copy();
    auto st = load_service_state(p);
    std::lock_guard<std::mutex> lock(mu_);
    paths_ = p;
    state_ = std::move(st);
  }

  std::shared_ptr<const ServiceState> snapshot() const {
    std::lock_guard<std::mutex> lock(mu_);
    return state_;
  }

  HttpReply health() const {
    const auto st = snapshot();
    ordered_json o;
    o["status"] = st ? "ok" : "no_index";
    o["index_size"] = st ? st->index.size() : 0;
    o["checkpoint_hash"] = st ? st->checkpoint_hash : "";
    return {200, json(o)};
  }

  HttpReply query(const std::string& body) const {
    const auto t0 = std::chrono::steady_clock::now();
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      return error(400, std::string("malformed JSON: ") + e.what());
    }
    if (!req.is_object()) return error(400, "request body must be a JSON object");
    const auto st = snapshot();
    if (!st) return error(503, "index not loaded");
    const auto& model = st->model;

    const bool has_sketch = req.contains("sketch") && !req["sketch"].is_null();
    const bool has_png = req.contains("sketch_png") && !req["sketch_png"].is_null();
    const bool has_text = req.contains("text") && !req["text"].is_null();
    if (!has_sketch && !has_png && !has_text) return error(400, "at least one of sketch and text is required");

    long k = 10;
    if (req.contains("k")) {
      if (!req["k"].is_number_integer()) return error(400, "k must be an integer");
      k = req["k"].get<long>();
    }
    if (k < 1 || k > 100) return error(400, "k must be in [1, 100]");

    CombinationMode mode = model.config.combination;
    if (req.contains("mode") && !req["mode"].is_null()) {
      try {
        mode = parse_combination_mode(req["mode"].get<std::string>());
      } catch (const std::exception& e) {
        return error(400, e.what());
      }
    }

    Embedding<float> s, t;
    try {
      if (has_sketch) {
        s = model.sketch_embedding(sketch_from_json(req["sketch"]));
      } else if (has_png) {
        const std::string bytes = base64_decode(req["sketch_png"].get<std::string>());
        const RasterImage raster = decode_png(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
        s = model.image_embedding(resize_nearest(raster, model.config.image_size));
      } else {
        s = model.sketch_embedding(StrokeSketch{});
      }
      if (has_text && !req["text"].is_string()) return error(400, "text must be a string");
      t = model.text_embedding(has_text ? model.tokens(req["text"].get<std::string>()) : empty_text());
    } catch (const std::exception& e) {
      return error(400, std::string("malformed sketch: ") + e.what());
    }

    RetrievalResult res;
    try {
      res = retrieve(combine_query(s, t, mode, &model.params.concat_proj), st->index, static_cast<size_t>(k));
    } catch (const DegenerateEmbedding& e) {
      return error(400, e.what());
    }
    ordered_json o;
    o["results"] = json::array();
    for (const auto& r : res.ranked) {
      ordered_json item;
      item["id"] = r.id;
      item["score"] = r.score;
      item["image_url"] = "/api/images/" + r.id;
      o["results"].push_back(item);
    }
    o["timing_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return {200, json(o)};
  }

  /// PNG bytes for an indexed id; empty when unknown or missing on disk.
  std::optional<std::string> image_bytes(const std::string& id) const {
    const auto st = snapshot();
    if (!st || !st->index.position(id)) return std::nullopt;
    const auto path = std::filesystem::path(st->images_dir) / (id + ".png");
    if (!std::filesystem::is_regular_file(path)) return std::nullopt;
    const auto bytes = read_file_bytes(path.string());
    return std::string(bytes.begin(), bytes.end());
  }

  void install(httplib::Server& svr, const std::string& cors_origin = "*") {
    svr.set_post_routing_handler([cors_origin](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", cors_origin);
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    });
    svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    svr.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    svr.Post("/api/query", [this](const httplib::Request& req, httplib::Response& res) { send(res, query(req.body)); });
    svr.Get(R"(/api/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto bytes = image_bytes(req.matches[1]);
      if (!bytes) return send(res, error(404, "unknown image id"));
      res.set_content(std::move(*bytes), "image/png");
    });
    svr.Post("/api/admin/reload", [this](const httplib::Request& req, httplib::Response& res) {
      std::optional<ServicePaths> paths;
      try {
        if (!req.body.empty()) {
          const json j = json::parse(req.body);
          ServicePaths p = paths_copy();
          p.checkpoint = j.value("checkpoint", p.checkpoint);
          p.index = j.value("index", p.index);
          p.images_dir = j.value("images_dir", p.images_dir);
          paths = p;
        }
        reload(paths);
      } catch (const std::exception& e) {
        return send(res, error(500, std::string("reload failed: ") + e.what()));
      }
      send(res, health());
    });
  }

 private:
  static HttpReply error(int status, const std::string& msg) { return {status, json{{"error", msg}}}; }

  static void send(httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  }

  ServicePaths paths_copy() const {
    std::lock_guard<std::mutex> lock(mu_);
    return paths_;
  }

  mutable std::mutex mu_;
  ServicePaths paths_;
  std::shared_ptr<const ServiceState> state_;
};

}  // namespace sq
