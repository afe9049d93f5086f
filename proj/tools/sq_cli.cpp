// sq: command-line entry points for the sketch+text retrieval pipeline.

#include "sq/service.hpp"
#include "sq/sq.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace sq;

namespace {

struct Globals {
  std::string config_path;
  uint64_t seed = 0;
  std::string out;
};

struct Effective {
  ModelConfig model;
  TrainConfig train;
};

Effective load_config(const std::string& path) {
  Effective e{toy_model_config(), toy_train_config()};
  if (path.empty()) return e;
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& ex) {
    throw Error(std::string("bad config: ") + ex.what());
  }
  for (const auto& [k, v] : j.items()) {
    if (k == "model") e.model = config_from_json(v, e.model);
    else if (k == "train") e.train = train_config_from_json(v, e.train);
    else throw Error("config: unknown section '" + k + "'");
  }
  return e;
}

void echo_config(const fs::path& dir, const std::string& command, const Globals& g, const Effective& e, const json& extra = {}) {
  fs::create_directories(dir);
  ordered_json o;
  o["command"] = command;
  o["seed"] = g.seed;
  o["model"] = config_to_json(e.model);
  o["train"] = train_config_to_json(e.train);
  if (!extra.is_null()) o["args"] = extra;
  std::ofstream(dir / "effective_config.json") << o.dump(2) << '\n';
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

std::vector<double> parse_fractions(const std::string& s, std::vector<double> fallback) {
  if (s.empty()) return fallback;
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v != nullptr ? std::string(v) : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sketch+text image retrieval"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config with \"model\" and \"train\" sections");
  app.add_option("--seed", g.seed, "Seed for every random draw");
  app.add_option("--out", g.out, "Output path (file or directory, per command)");

  // gen-toy
  int toy_n = 256, toy_canvas = 64;
  std::string toy_prefix = "toy";
  auto* gen = app.add_subcommand("gen-toy", "Generate a toy shapes dataset directory");
  gen->add_option("--n", toy_n, "Number of records")->check(CLI::PositiveNumber);
  gen->add_option("--canvas", toy_canvas, "Image side in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--prefix", toy_prefix, "Record id prefix");

  // synthesize
  std::string syn_image, syn_svg;
  auto* syn = app.add_subcommand("synthesize", "Vectorize an image into a stroke sketch");
  syn->add_option("--image", syn_image, "Input PNG")->required()->check(CLI::ExistingFile);
  syn->add_option("--svg", syn_svg, "Also write an SVG rendering");

  // train
  std::string manifest;
  int steps = -1, batch = -1, ckpt_every = -1;
  double lr = -1;
  std::string combination;
  bool no_augment = false;
  auto* tr = app.add_subcommand("train", "Train a model from scratch");
  tr->add_option("--manifest", manifest, "Dataset manifest (JSONL)")->required()->check(CLI::ExistingFile);
  tr->add_option("--steps", steps, "Optimizer steps");
  tr->add_option("--batch-size", batch, "Batch size");
  tr->add_option("--lr", lr, "Learning rate");
  tr->add_option("--checkpoint-every", ckpt_every, "Checkpoint interval in steps");
  tr->add_option("--combination", combination, "sum | max | concat");
  tr->add_flag("--no-augment", no_augment, "Disable augmentation");

  // warmup
  std::string checkpoint;
  auto* wu = app.add_subcommand("warmup", "Fit the classifier head on frozen encoders");
  wu->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  wu->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  wu->add_option("--steps", steps, "Warm-up steps");

  // eval
  std::string mode = "sketch+text", index_path;
  auto* ev = app.add_subcommand("eval", "Recall@{1,5,10} of a checkpoint on a dataset");
  ev->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--mode", mode, "sketch+text | sketch-only | text-only");
  ev->add_option("--index", index_path, "Prebuilt index (defaults to indexing the manifest)");

  // index
  auto* ix = app.add_subcommand("index", "Embed every image of a dataset into an index file");
  ix->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  ix->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);

  // serve
  std::string images_dir, host = "127.0.0.1", cors = "*";
  int port = 8080;
  auto* sv = app.add_subcommand("serve", "Serve the HTTP query API");
  sv->add_option("--checkpoint", checkpoint);
  sv->add_option("--index", index_path);
  sv->add_option("--images-dir", images_dir);
  sv->add_option("--port", port);
  sv->add_option("--host", host);
  sv->add_option("--cors-origin", cors);

  // sweeps
  std::string fractions;
  auto* ss = app.add_subcommand("sweep-sketch", "Recall vs fraction of strokes kept");
  auto* st = app.add_subcommand("sweep-text", "Recall vs fraction of words kept");
  for (auto* sub : {ss, st}) {
    sub->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    sub->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    sub->add_option("--fractions", fractions, "Comma-separated fractions");
  }

  // caption
  std::string cap_image, cap_sketch;
  int cap_len = 0;
  auto* cp = app.add_subcommand("caption", "Greedy caption for an image or a sketch");
  cp->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  auto* cp_img = cp->add_option("--image", cap_image, "Input PNG")->check(CLI::ExistingFile);
  auto* cp_sk = cp->add_option("--sketch", cap_sketch, "Input sketch JSON")->check(CLI::ExistingFile);
  cp_img->excludes(cp_sk);
  cp->add_option("--max-len", cap_len, "Maximum caption length in tokens");

  // ablate
  std::string eval_manifest;
  auto* ab = app.add_subcommand("ablate", "Train each objective/combination variant and tabulate recall");
  ab->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  ab->add_option("--eval-manifest", eval_manifest)->required()->check(CLI::ExistingFile);
  ab->add_option("--steps", steps);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", e.what()}, {"kind", e.get_name()}}.dump() << '\n';
    return e.get_exit_code();
  }
  CLI::App* cmd = app.get_subcommands().front();

  try {
    Effective eff = load_config(g.config_path);
    if (steps > 0) {
      eff.train.steps = steps;
      eff.train.warmup_steps = steps;
    }
    if (batch > 0) eff.train.batch_size = batch;
    if (lr > 0) eff.train.adam.lr = lr;
    if (ckpt_every >= 0) eff.train.checkpoint_every = ckpt_every;
    if (!combination.empty()) eff.model.combination = parse_combination_mode(combination);
    if (no_augment) eff.train.augmentation.enabled = false;
    eff.model.validate();

    if (cmd == gen) {
      if (g.out.empty()) throw Error("gen-toy requires --out <dir>");
      const auto toy = generate_toy_dataset(toy_n, g.seed, toy_canvas, toy_prefix);
      write_dataset(toy.dataset, g.out);
      echo_config(g.out, "gen-toy", g, eff, json{{"n", toy_n}, {"canvas", toy_canvas}, {"prefix", toy_prefix}});
      std::cout << (fs::path(g.out) / "manifest.jsonl").string() << '\n';
    } else if (cmd == syn) {
      const StrokeSketch s = synthesize_sketch(read_png(syn_image));
      if (g.out.empty()) std::cout << dump_sketch(s) << '\n';
      else write_sketch(g.out, s);
      write_text(syn_svg, export_svg(s));
    } else if (cmd == tr) {
      if (g.out.empty()) throw Error("train requires --out <dir>");
      eff.train.out_dir = g.out;
      echo_config(g.out, "train", g, eff, json{{"manifest", manifest}});
      const Dataset data = load_dataset(manifest);
      auto res = train<float>(data, eff.model, eff.train, g.seed);
      std::cout << res.checkpoints.back() << '\n';
    } else if (cmd == wu) {
      if (g.out.empty()) throw Error("warmup requires --out <checkpoint>");
      Model<float> model = load_checkpoint<float>(checkpoint);
      model.params.classifier = warmup_classifier(model, load_dataset(manifest), eff.train);
      const std::string hash = save_checkpoint(g.out, model);
      std::cout << hash << '\n';
    } else if (cmd == ev) {
      std::string hash;
      const Model<float> model = load_checkpoint<float>(checkpoint, &hash);
      const Dataset data = load_dataset(manifest);
      const EmbeddingIndex index = index_path.empty() ? build_index(data, model, hash) : load_index(index_path);
      const Recall r = evaluate(data, model, index, parse_query_mode(mode));
      std::ostringstream csv;
      csv << "mode,r1,r5,r10\n" << mode << ',' << r.r1 << ',' << r.r5 << ',' << r.r10 << '\n';
      std::cout << csv.str();
      write_text(g.out, csv.str());
    } else if (cmd == ix) {
      if (g.out.empty()) throw Error("index requires --out <file>");
      const EmbeddingIndex index = build_index(manifest, checkpoint);
      save_index(g.out, index);
      std::cout << index.size() << '\n';
    } else if (cmd == sv) {
      ServicePaths paths{env_or("SQ_CHECKPOINT", checkpoint), env_or("SQ_INDEX", index_path), env_or("SQ_IMAGES_DIR", images_dir)};
      if (!checkpoint.empty()) paths.checkpoint = checkpoint;
      if (!index_path.empty()) paths.index = index_path;
      if (!images_dir.empty()) paths.images_dir = images_dir;
      if (const char* p = std::getenv("SQ_PORT"); p != nullptr && sv->count("--port") == 0) port = std::atoi(p);
      RetrievalService service(paths);
      if (!paths.checkpoint.empty() && !paths.index.empty()) service.reload();
      httplib::Server server;
      service.install(server, cors);
      std::cerr << "listening on " << host << ':' << port << '\n';
      if (!server.listen(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
    } else if (cmd == ss || cmd == st) {
      const Model<float> model = load_checkpoint<float>(checkpoint);
      const Dataset data = load_dataset(manifest);
      const auto rows = cmd == ss ? sketch_completeness_sweep(data, model, parse_fractions(fractions, {0.2, 0.4, 0.6, 0.8, 1.0}), g.seed)
                                  : text_completeness_sweep(data, model, parse_fractions(fractions, {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}), g.seed);
      const std::string csv = sweep_csv(rows);
      std::cout << csv;
      write_text(g.out, csv);
    } else if (cmd == cp) {
      if (cap_image.empty() && cap_sketch.empty()) throw Error("caption requires --image or --sketch");
      const Model<float> model = load_checkpoint<float>(checkpoint);
      const Embedding<float> e =
          cap_image.empty() ? model.sketch_embedding(read_sketch(cap_sketch)) : model.image_embedding(read_png(cap_image));
      const int len = cap_len > 0 ? cap_len : model.config.max_len;
      std::cout << detokenize(generate_caption<float>(e.values, model.params.decoder, len), model.vocab) << '\n';
    } else if (cmd == ab) {
      const auto rows = run_ablation(load_dataset(manifest), load_dataset(eval_manifest), eff.model, eff.train, g.seed);
      const std::string csv = ablation_csv(rows);
      std::cout << csv;
      write_text(g.out, csv);
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"command", cmd->get_name()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
