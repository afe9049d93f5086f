#pragma once

// Vocabulary and tokenizer, sketch/manifest file formats, the toy scene
// dataset and batch assembly.

#include "sq/core.hpp"
#include "sq/image_io.hpp"
#include "sq/sketchgen.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace sq {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocabulary / tokenizer
// ---------------------------------------------------------------------------

/// Lowercased alphanumeric runs; everything else separates words.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline std::string normalize_text(const std::string& text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} { reindex(); }

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < kNumReserved) throw DataError("vocabulary: missing reserved tokens");
    reindex();
    if (index_.size() != tokens_.size()) throw DataError("vocabulary: duplicate tokens");
  }

  /// Sorted word list over the given texts, after the reserved ids.
  static Vocabulary build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : split_words(t)) words.insert(std::move(w));
    std::vector<std::string> tokens{"<pad>", "<bos>", "<eos>", "<unk>"};
    tokens.insert(tokens.end(), words.begin(), words.end());
    return Vocabulary(std::move(tokens));
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_len = 32) {
  if (max_len < 2) throw ShapeError("tokenize: max_len must allow BOS and EOS");
  TokenSequence seq{kBos};
  for (const auto& w : split_words(text)) {
    if (static_cast<int>(seq.size()) >= max_len - 1) break;
    seq.push_back(vocab.id(w));
  }
  seq.push_back(kEos);
  return seq;
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int id : seq) {
    if (id == kEos) break;
    if (id < kNumReserved && id != kUnk) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

/// Keeps round(f * n) uniformly chosen words of `text` in their original
/// order; f = 0 yields the empty string.
inline std::string subsample_words(const std::string& text, double fraction, uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error("subsample_words: fraction must be in [0, 1]");
  const auto words = split_words(text);
  if (fraction == 0.0 || words.empty()) return "";
  std::string out;
  for (size_t i : choose_kept(words.size(), fraction, seed)) {
    if (!out.empty()) out.push_back(' ');
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sketch files
// ---------------------------------------------------------------------------

inline json sketch_to_json(const StrokeSketch& s) {
  json strokes = json::array();
  for (const auto& st : s.strokes) {
    json pts = json::array();
    for (const auto& p : st.points) pts.push_back(json::array({p.x, p.y}));
    strokes.push_back(std::move(pts));
  }
  ordered_json o;
  o["canvas_aspect"] = s.canvas_aspect;
  o["strokes"] = std::move(strokes);
  return json(o);
}

/// Parses the stroke JSON format. Coordinates are clamped to [0,1]; strokes
/// with fewer than two points are discarded.
inline StrokeSketch sketch_from_json(const json& j) {
  if (!j.is_object() || !j.contains("strokes") || !j["strokes"].is_array())
    throw DataError("sketch JSON: expected an object with a \"strokes\" array");
  StrokeSketch s;
  if (j.contains("canvas_aspect")) {
    if (!j["canvas_aspect"].is_number() || !(j["canvas_aspect"].get<double>() > 0.0))
      throw DataError("sketch JSON: canvas_aspect must be a positive number");
    s.canvas_aspect = j["canvas_aspect"].get<double>();
  }
  for (const auto& stroke : j["strokes"]) {
    if (!stroke.is_array()) throw DataError("sketch JSON: stroke must be an array of points");
    Stroke st;
    for (const auto& p : stroke) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
        throw DataError("sketch JSON: point must be [x, y]");
      st.points.push_back({clamp01(p[0].get<double>()), clamp01(p[1].get<double>())});
    }
    if (st.points.size() >= 2) s.strokes.push_back(std::move(st));
  }
  return s;
}

inline std::string dump_sketch(const StrokeSketch& s) { return ordered_json(sketch_to_json(s)).dump(); }

inline StrokeSketch parse_sketch(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("sketch JSON: ") + e.what());
  }
  return sketch_from_json(j);
}

inline StrokeSketch read_sketch(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sketch(ss.str());
}

inline void write_sketch(const std::string& path, const StrokeSketch& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << dump_sketch(s) << '\n';
}

namespace detail {

inline std::optional<double> svg_length(const std::string& tag, const std::string& attr) {
  const std::regex re(attr + R"(\s*=\s*["']\s*([-+0-9.eE]+))");
  std::smatch m;
  if (std::regex_search(tag, m, re)) return std::stod(m[1].str());
  return std::nullopt;
}

inline std::vector<double> svg_numbers(const std::string& s) {
  static const std::regex num(R"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)");
  std::vector<double> out;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), num); it != std::sregex_iterator(); ++it)
    out.push_back(std::stod(it->str()));
  return out;
}

}  // namespace detail

/// Imports the polyline subset of SVG: <polyline points=...> and <path d=...>
/// made of M/L/H/V commands (absolute or relative). Coordinates are
/// normalized by the canvas width/height (viewBox when present).
inline StrokeSketch import_svg(const std::string& svg) {
  std::smatch m;
  const std::regex svg_tag(R"(<svg\b[^>]*>)");
  if (!std::regex_search(svg, m, svg_tag)) throw DataError("svg: no <svg> element");
  const std::string root = m.str();
  double ox = 0, oy = 0, w = 0, h = 0;
  const std::regex vb(R"(viewBox\s*=\s*["']([^"']*)["'])");
  std::smatch vm;
  if (std::regex_search(root, vm, vb)) {
    const auto v = detail::svg_numbers(vm[1].str());
    if (v.size() == 4) {
      ox = v[0];
      oy = v[1];
      w = v[2];
      h = v[3];
    }
  }
  if (w <= 0 || h <= 0) {
    w = detail::svg_length(root, "width").value_or(0.0);
    h = detail::svg_length(root, "height").value_or(0.0);
  }
  if (w <= 0 || h <= 0) throw DataError("svg: canvas size unknown (need viewBox or width/height)");

  StrokeSketch sketch;
  sketch.canvas_aspect = w / h;
  auto norm = [&](double x, double y) { return Point{clamp01((x - ox) / w), clamp01((y - oy) / h)}; };
  auto flush = [&](Stroke& st) {
    if (st.points.size() >= 2) sketch.strokes.push_back(st);
    st.points.clear();
  };

  const std::regex element(R"(<(polyline|path)\b([^>]*)>)");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), element); it != std::sregex_iterator(); ++it) {
    const std::string kind = (*it)[1].str(), attrs = (*it)[2].str();
    std::smatch am;
    if (kind == "polyline") {
      if (!std::regex_search(attrs, am, std::regex(R"(\bpoints\s*=\s*["']([^"']*)["'])"))) continue;
      const auto v = detail::svg_numbers(am[1].str());
      Stroke st;
      for (size_t i = 0; i + 1 < v.size(); i += 2) st.points.push_back(norm(v[i], v[i + 1]));
      flush(st);
      continue;
    }
    if (!std::regex_search(attrs, am, std::regex(R"(\bd\s*=\s*["']([^"']*)["'])"))) continue;
    const std::string d = am[1].str();
    const std::regex cmd_re(R"(([MmLlHhVvZz])([^MmLlHhVvZzCcSsQqTtAa]*))");
    Stroke st;
    double cx = 0, cy = 0, sx = 0, sy = 0;
    for (auto c = std::sregex_iterator(d.begin(), d.end(), cmd_re); c != std::sregex_iterator(); ++c) {
      const char op = (*c)[1].str()[0];
      const auto v = detail::svg_numbers((*c)[2].str());
      const bool rel = std::islower(static_cast<unsigned char>(op)) != 0;
      switch (std::toupper(static_cast<unsigned char>(op))) {
        case 'M':
          flush(st);
          for (size_t i = 0; i + 1 < v.size(); i += 2) {
            cx = rel ? cx + v[i] : v[i];
            cy = rel ? cy + v[i + 1] : v[i + 1];
            if (i == 0) {
              sx = cx;
              sy = cy;
            }
            st.points.push_back(norm(cx, cy));
          }
          break;
        case 'L':
          for (size_t i = 0; i + 1 < v.size(); i += 2) {
            cx = rel ? cx + v[i] : v[i];
            cy = rel ? cy + v[i + 1] : v[i + 1];
            st.points.push_back(norm(cx, cy));
          }
          break;
        case 'H':
          for (double x : v) {
            cx = rel ? cx + x : x;
            st.points.push_back(norm(cx, cy));
          }
          break;
        case 'V':
          for (double y : v) {
            cy = rel ? cy + y : y;
            st.points.push_back(norm(cx, cy));
          }
          break;
        case 'Z':
          cx = sx;
          cy = sy;
          st.points.push_back(norm(cx, cy));
          break;
        default:
          break;
      }
    }
    flush(st);
  }
  return sketch;
}

inline std::string export_svg(const StrokeSketch& s, double width = 256.0) {
  const double height = width / s.canvas_aspect;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
      << width << ' ' << height << "\">";
  out.precision(17);
  for (const auto& st : s.strokes) {
    out << "<polyline fill=\"none\" stroke=\"black\" points=\"";
    for (size_t i = 0; i < st.points.size(); ++i) out << (i ? " " : "") << st.points[i].x * width << ',' << st.points[i].y * height;
    out << "\"/>";
  }
  out << "</svg>";
  return out.str();
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSON-Lines)
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string image;  // relative to the manifest directory unless absolute
  std::vector<std::string> captions;
  std::vector<std::string> labels;
  std::optional<std::string> sketch;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  fs::path base_dir;

  std::string resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path.string() : (base_dir / path).string();
  }
};

inline std::string manifest_line(const ManifestRecord& r) {
  ordered_json o;
  o["id"] = r.id;
  o["image"] = r.image;
  o["captions"] = r.captions;
  o["labels"] = r.labels;
  if (r.sketch) o["sketch"] = *r.sketch;
  return o.dump();
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& r : m.records) out << manifest_line(r) << '\n';
}

/// Parses a manifest. With `check_files`, every referenced image/sketch must
/// exist; offending ids are listed in the error.
inline DatasetManifest load_manifest(const std::string& path, bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  DatasetManifest m;
  m.base_dir = fs::path(path).parent_path();
  std::set<std::string> seen;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      r.captions = j.at("captions").get<std::vector<std::string>>();
      r.labels = j.value("labels", std::vector<std::string>{});
      if (j.contains("sketch") && !j["sketch"].is_null()) r.sketch = j["sketch"].get<std::string>();
      if (r.captions.empty()) throw DataError("record has no captions");
      if (!seen.insert(r.id).second) throw DataError("duplicate id " + r.id);
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (check_files) {
    std::vector<std::string> missing;
    for (const auto& r : m.records) {
      if (!fs::exists(m.resolve(r.image)) || (r.sketch && !fs::exists(m.resolve(*r.sketch)))) missing.push_back(r.id);
    }
    if (!missing.empty()) {
      std::string ids;
      for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
      throw DataError("manifest references missing files for ids: " + ids);
    }
  }
  return m;
}

/// Converts COCO caption + instance annotations to a manifest. Sketches are
/// picked up from `sketch_dir/<image id>.json` when that file exists.
inline DatasetManifest coco_to_manifest(const json& captions, const json& instances, const std::string& image_dir,
                                        const std::string& sketch_dir = "") {
  std::map<long long, std::string> files;
  for (const auto& img : captions.at("images")) files[img.at("id").get<long long>()] = img.at("file_name").get<std::string>();
  std::map<long long, std::string> cat_names;
  for (const auto& c : instances.at("categories")) cat_names[c.at("id").get<long long>()] = c.at("name").get<std::string>();
  std::map<long long, std::vector<std::string>> caps;
  for (const auto& a : captions.at("annotations")) caps[a.at("image_id").get<long long>()].push_back(a.at("caption").get<std::string>());
  std::map<long long, std::set<std::string>> labels;
  for (const auto& a : instances.at("annotations"))
    labels[a.at("image_id").get<long long>()].insert(cat_names.at(a.at("category_id").get<long long>()));

  DatasetManifest m;
  for (const auto& [id, file] : files) {
    auto it = caps.find(id);
    if (it == caps.end()) continue;
    ManifestRecord r;
    r.id = std::to_string(id);
    r.image = (fs::path(image_dir) / file).string();
    r.captions = it->second;
    if (auto lt = labels.find(id); lt != labels.end()) r.labels.assign(lt->second.begin(), lt->second.end());
    if (!sketch_dir.empty()) {
      const fs::path sp = fs::path(sketch_dir) / (r.id + ".json");
      if (fs::exists(sp)) r.sketch = sp.string();
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-memory dataset
// ---------------------------------------------------------------------------

struct Record {
  std::string id;
  RasterImage image;
  std::vector<std::string> captions;
  std::vector<std::string> labels;
  std::optional<StrokeSketch> sketch;
};

struct Dataset {
  std::vector<Record> records;

  size_t size() const { return records.size(); }

  std::vector<std::string> all_captions() const {
    std::vector<std::string> out;
    for (const auto& r : records) out.insert(out.end(), r.captions.begin(), r.captions.end());
    return out;
  }

  /// Sorted union of category names.
  std::vector<std::string> categories() const {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.labels.begin(), r.labels.end());
    return {s.begin(), s.end()};
  }
};

/// Loads every image (and sketch, when referenced). Unreadable entries are
/// collected and reported together.
inline Dataset load_dataset(const DatasetManifest& m) {
  Dataset d;
  std::vector<std::string> bad;
  for (const auto& r : m.records) {
    Record rec{r.id, {}, r.captions, r.labels, std::nullopt};
    try {
      rec.image = read_png(m.resolve(r.image));
      if (r.sketch) rec.sketch = read_sketch(m.resolve(*r.sketch));
    } catch (const DataError&) {
      bad.push_back(r.id);
      continue;
    }
    d.records.push_back(std::move(rec));
  }
  if (!bad.empty()) {
    std::string ids;
    for (const auto& id : bad) ids += (ids.empty() ? "" : ", ") + id;
    throw DataError("unreadable image or sketch for ids: " + ids);
  }
  return d;
}

inline Dataset load_dataset(const std::string& manifest_path) { return load_dataset(load_manifest(manifest_path)); }

/// Writes images/<id>.png, sketches/<id>.json and manifest.jsonl under `dir`.
inline DatasetManifest write_dataset(const Dataset& d, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "sketches");
  DatasetManifest m;
  m.base_dir = root;
  for (const auto& r : d.records) {
    ManifestRecord mr{r.id, "images/" + r.id + ".png", r.captions, r.labels, std::nullopt};
    write_png((root / mr.image).string(), r.image);
    if (r.sketch) {
      mr.sketch = "sketches/" + r.id + ".json";
      write_sketch((root / *mr.sketch).string(), *r.sketch);
    }
    m.records.push_back(std::move(mr));
  }
  write_manifest((root / "manifest.jsonl").string(), m);
  return m;
}

inline LabelSet label_vector(const std::vector<std::string>& names, const std::vector<std::string>& categories) {
  LabelSet v(categories.size(), 0);
  for (const auto& n : names) {
    auto it = std::find(categories.begin(), categories.end(), n);
    if (it != categories.end()) v[static_cast<size_t>(it - categories.begin())] = 1;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Toy scenes: colored geometric shapes with template captions
// ---------------------------------------------------------------------------

struct ToyShape {
  std::string shape;
  std::string color;
  double cx = 0, cy = 0, r = 0;
};

struct ToyScene {
  std::vector<ToyShape> shapes;
};

inline const std::vector<std::string>& toy_shapes() {
  static const std::vector<std::string> v{"circle", "square", "triangle", "star"};
  return v;
}

inline const std::vector<std::string>& toy_colors() {
  static const std::vector<std::string> v{"red", "green", "blue"};
  return v;
}

/// Shape x color category names, in a fixed order.
inline std::vector<std::string> toy_categories() {
  std::vector<std::string> out;
  for (const auto& c : toy_colors())
    for (const auto& s : toy_shapes()) out.push_back(c + " " + s);
  return out;
}

inline std::array<float, 3> toy_rgb(const std::string& color) {
  if (color == "red") return {0.85f, 0.15f, 0.15f};
  if (color == "green") return {0.15f, 0.70f, 0.20f};
  return {0.15f, 0.25f, 0.85f};
}

namespace detail {

inline bool in_polygon(double x, double y, const std::vector<Point>& poly) {
  bool in = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if ((poly[i].y > y) != (poly[j].y > y) &&
        x < (poly[j].x - poly[i].x) * (y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x)
      in = !in;
  }
  return in;
}

inline bool shape_contains(const ToyShape& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  if (s.shape == "circle") return dx * dx + dy * dy <= s.r * s.r;
  if (s.shape == "square") return std::abs(dx) <= 0.85 * s.r && std::abs(dy) <= 0.85 * s.r;
  if (s.shape == "triangle")
    return in_polygon(x, y, {{s.cx, s.cy - s.r}, {s.cx + 0.95 * s.r, s.cy + 0.8 * s.r}, {s.cx - 0.95 * s.r, s.cy + 0.8 * s.r}});
  std::vector<Point> star;
  for (int k = 0; k < 10; ++k) {
    const double ang = -M_PI / 2 + k * M_PI / 5;
    const double rad = (k % 2 == 0) ? s.r : 0.45 * s.r;
    star.push_back({s.cx + rad * std::cos(ang), s.cy + rad * std::sin(ang)});
  }
  return in_polygon(x, y, star);
}

}  // namespace detail

inline ToyScene sample_toy_scene(Rng& rng) {
  ToyScene scene;
  const int count = 1 + static_cast<int>(rng.below(3));
  for (int i = 0; i < count; ++i) {
    ToyShape s;
    s.shape = toy_shapes()[rng.below(toy_shapes().size())];
    s.color = toy_colors()[rng.below(toy_colors().size())];
    for (int attempt = 0; attempt < 100; ++attempt) {
      s.r = rng.uniform(0.10, 0.18);
      s.cx = rng.uniform(s.r + 0.02, 1.0 - s.r - 0.02);
      s.cy = rng.uniform(s.r + 0.02, 1.0 - s.r - 0.02);
      bool clear = true;
      for (const auto& o : scene.shapes)
        if (std::hypot(o.cx - s.cx, o.cy - s.cy) < 0.9 * (o.r + s.r)) clear = false;
      if (clear) break;
    }
    scene.shapes.push_back(s);
  }
  return scene;
}

inline RasterImage render_toy_scene(const ToyScene& scene, int canvas) {
  RasterImage img(canvas, canvas, 1.0f);
  for (const auto& s : scene.shapes) {
    const auto rgb = toy_rgb(s.color);
    for (int y = 0; y < canvas; ++y) {
      for (int x = 0; x < canvas; ++x) {
        const double px = (x + 0.5) / canvas, py = (y + 0.5) / canvas;
        if (!detail::shape_contains(s, px, py)) continue;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[static_cast<size_t>(c)];
      }
    }
  }
  return quantize8(std::move(img));
}

/// Two captions: shapes left to right joined by "left of", and shapes by
/// decreasing size joined by "and".
inline std::vector<std::string> toy_captions(const ToyScene& scene) {
  auto phrase = [](const ToyShape& s) { return "a " + s.color + " " + s.shape; };
  std::vector<ToyShape> by_x = scene.shapes, by_size = scene.shapes;
  std::stable_sort(by_x.begin(), by_x.end(), [](const auto& a, const auto& b) { return a.cx < b.cx; });
  std::stable_sort(by_size.begin(), by_size.end(), [](const auto& a, const auto& b) { return a.r > b.r; });
  std::string c1, c2;
  for (size_t i = 0; i < by_x.size(); ++i) c1 += (i ? " left of " : "") + phrase(by_x[i]);
  for (size_t i = 0; i < by_size.size(); ++i) c2 += (i ? " and " : "") + phrase(by_size[i]);
  return {c1, c2};
}

inline std::vector<std::string> toy_labels(const ToyScene& scene) {
  std::set<std::string> s;
  for (const auto& sh : scene.shapes) s.insert(sh.color + " " + sh.shape);
  return {s.begin(), s.end()};
}

struct ToyDataset {
  Dataset dataset;
  std::vector<ToyScene> scenes;
};

inline ToyDataset generate_toy_dataset(int n, uint64_t seed, int canvas = 64, const std::string& id_prefix = "toy") {
  if (n < 1) throw DataError("generate_toy_dataset: n must be at least 1");
  ToyDataset out;
  Rng rng(derive_seed(seed, 0x70790));
  for (int i = 0; i < n; ++i) {
    ToyScene scene = sample_toy_scene(rng);
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%05d", id_prefix.c_str(), i);
    Record r;
    r.id = id;
    r.image = render_toy_scene(scene, canvas);
    r.captions = toy_captions(scene);
    r.labels = toy_labels(scene);
    r.sketch = synthesize_sketch(r.image);
    out.dataset.records.push_back(std::move(r));
    out.scenes.push_back(std::move(scene));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct AugmentationConfig {
  bool enabled = true;
  AffineRanges affine{};
  bool affine_image = true;
  bool affine_sketch = true;
  double completeness_min = 0.6;
  double completeness_max = 1.0;
  double query_dropout = 0.2;
};

struct BatchContext {
  const Vocabulary* vocab = nullptr;
  const std::vector<std::string>* categories = nullptr;
  int max_len = 32;
};

/// Builds one training tuple from a record. Every random draw derives from
/// `seed`, with image and sketch affine maps on independent streams.
inline TrainingTuple make_tuple(const Record& rec, const AugmentationConfig& aug, const BatchContext& ctx, uint64_t seed) {
  TrainingTuple t;
  t.id = rec.id;
  t.image = rec.image;
  t.sketch = rec.sketch ? *rec.sketch : synthesize_sketch(rec.image);
  std::string caption = rec.captions.front();
  if (aug.enabled) {
    Rng rng(derive_seed(seed, 1));
    caption = rec.captions[rng.below(rec.captions.size())];
    if (aug.affine_image) t.image = warp_image(t.image, sample_affine(aug.affine, derive_seed(seed, 2)));
    if (aug.affine_sketch) t.sketch = random_affine(t.sketch, sample_affine(aug.affine, derive_seed(seed, 3)));
    Rng crng(derive_seed(seed, 4));
    const double c = crng.uniform(aug.completeness_min, aug.completeness_max);
    t.sketch = stroke_dropout(t.sketch, c, derive_seed(seed, 5));
  }
  t.caption = tokenize(caption, *ctx.vocab, ctx.max_len);
  t.query = t.caption;
  t.labels = label_vector(rec.labels, *ctx.categories);
  if (aug.enabled && aug.query_dropout > 0.0) t = query_dropout(t, aug.query_dropout, derive_seed(seed, 6));
  return t;
}

inline std::vector<TrainingTuple> make_batch(const Dataset& data, const std::vector<size_t>& indices, const AugmentationConfig& aug,
                                             const BatchContext& ctx, uint64_t seed) {
  std::vector<TrainingTuple> batch;
  batch.reserve(indices.size());
  for (size_t i = 0; i < indices.size(); ++i)
    batch.push_back(make_tuple(data.records.at(indices[i]), aug, ctx, derive_seed(seed, 0xBA7C, i)));
  return batch;
}

/// Draws `n` distinct records uniformly and assembles them.
inline std::vector<TrainingTuple> make_batch(const Dataset& data, size_t n, const AugmentationConfig& aug, const BatchContext& ctx,
                                             uint64_t seed) {
  if (n > data.size()) throw DataError("make_batch: batch larger than dataset");
  std::vector<size_t> idx(data.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x5E1));
  for (size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  idx.resize(n);
  return make_batch(data, idx, aug, ctx, seed);
}

/// Pads (or truncates) each caption to exactly `max_len` ids with PAD.
inline std::vector<TokenSequence> padded_captions(const std::vector<TrainingTuple>& batch, int max_len) {
  std::vector<TokenSequence> out;
  for (const auto& t : batch) {
    TokenSequence s = t.caption;
    s.resize(static_cast<size_t>(max_len), kPad);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sq
