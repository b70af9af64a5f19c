// matchkit command-line tool: dataset generation, two-stage training,
// evaluation, and single-pair inspection.
//
// Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "matchkit/bundle.hpp"
#include "matchkit/config.hpp"
#include "matchkit/png_io.hpp"

namespace fs = std::filesystem;
using namespace matchkit;
using colorspace::TransformKind;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

config::RunConfig load_config(const std::string& path) {
  if (path.empty()) return config::defaults();
  try {
    return config::load(path);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

synth::DatasetManifest read_split(const fs::path& dir, const std::string& name) {
  const auto path = dir / name;
  if (!fs::exists(path)) throw IoError("missing " + path.string() + " (was the directory made by gen-data?)");
  return synth::read_manifest(path);
}

synth::DatasetManifest cross_only(synth::DatasetManifest m) {
  std::erase_if(m.pairs, [](const synth::PairEntry& p) { return p.is_self(); });
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void print_epoch(const char* stage, const train::EpochLog& e) {
  std::fprintf(stderr, "[%s] epoch %zu  steps %zu  proxy_loss %.5f  transform_loss %.5f  val %.1f / pred %.1f  (%.1fs)\n",
               stage, e.epoch, e.steps, e.proxy_loss, e.transform_loss, e.val_actual, e.val_predicted, e.seconds);
}

std::vector<TransformKind> parse_kinds(const std::string& list) {
  std::vector<TransformKind> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      const auto k = colorspace::parse_kind(item);
      if (std::find(out.begin(), out.end(), k) != out.end()) throw UsageError("kind listed twice: " + item);
      out.push_back(k);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("--kinds is empty");
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string config, out;
  std::uint64_t seed = 0;
};

int cmd_gen_data(const GenArgs& a) {
  const auto cfg = load_config(a.config);
  const auto ds = synth::generate_dataset(cfg.synth, a.out, a.seed);
  std::printf("pairs=%zu train=%zu test=%zu scenes=%zu/%zu out=%s\n", ds.all.pairs.size(), ds.train.pairs.size(),
              ds.test.pairs.size(), ds.train_scenes.size(), ds.test_scenes.size(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string stage, kind, data, model, out, config, log;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  cfg.train.seed = a.seed;
  TransformKind kind = TransformKind::gray;
  if (!a.kind.empty()) {
    try {
      kind = colorspace::parse_kind(a.kind);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  if (a.stage == "proxy") {
    if (kind != TransformKind::gray) throw UsageError("--stage proxy trains on gray pairs; --kind must be gray");
    if (!a.model.empty()) throw UsageError("--stage proxy does not take --model");
  } else {
    if (a.kind.empty()) throw UsageError("--stage transform requires --kind");
    if (kind == TransformKind::gray) throw UsageError("--stage transform: gray has no trainable transform");
    if (a.model.empty()) throw UsageError("--stage transform requires --model (the pre-trained proxy bundle)");
  }
  cfg.train.kind = kind;

  const fs::path data(a.data);
  const auto train_set = read_split(data, "train.txt");
  const auto test_path = data / "test.txt";
  std::optional<synth::DatasetManifest> validation;
  if (fs::exists(test_path)) validation = synth::read_manifest(test_path);
  const auto* val = validation && !validation->pairs.empty() ? &*validation : nullptr;

  nets::KeyValues meta;
  meta["train.seed"] = std::to_string(a.seed);
  meta["train.epochs"] = std::to_string(cfg.train.epochs);
  meta["train.batch_size"] = std::to_string(cfg.train.batch_size);
  meta["train.height"] = std::to_string(cfg.train.height);
  meta["train.dataset_hash"] = hex(fnv1a(bundle::read_file(data / "train.txt")));

  train::TrainLog log;
  bundle::Bundle out;
  if (a.stage == "proxy") {
    auto r = train::pretrain_proxy(train_set, cfg.train, val, nullptr,
                                   [](const train::EpochLog& e) { print_epoch("proxy", e); });
    log = r.log;
    out = bundle::from_proxy(r.proxy, meta);
  } else {
    auto loaded = bundle::to_models(bundle::load(a.model));
    // Transform training runs on cross-illuminant pairs; self-pairs carry no
    // signal about illumination invariance.
    const auto cross = cross_only(train_set);
    if (cross.pairs.empty()) throw ConfigError("train: dataset has no cross-illuminant training pairs");
    std::optional<synth::DatasetManifest> val_cross;
    if (val) val_cross = cross_only(*val);
    const auto* vc = val_cross && !val_cross->pairs.empty() ? &*val_cross : nullptr;
    meta["train.proxy_dataset_hash"] = bundle::load(a.model).get("train.dataset_hash");
    auto r = train::train_transform(cross, loaded.models.proxy, cfg.train, vc, nullptr,
                                    [](const train::EpochLog& e) { print_epoch("transform", e); });
    log = r.log;
    out = bundle::from_models(r.models, meta);
  }
  bundle::save(a.out, out);
  const fs::path log_path = a.log.empty() ? fs::path(a.out).replace_extension(".log.csv") : fs::path(a.log);
  std::ostringstream csv;
  log.write_csv(csv);
  write_text(log_path, csv.str());
  std::printf("model=%s log=%s\n", a.out.c_str(), log_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string data, kinds = "gray,sumlog", thresholds = "10,20,30", out, config, pairs = "cross", split = "test.txt";
  std::vector<std::string> models;
  std::uint64_t seed = 0;
};

std::vector<std::size_t> parse_thresholds(const std::string& list) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--thresholds: expected a comma-separated list of integers, got '" + list + "'");
    }
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw UsageError("--thresholds is empty");
  return out;
}

int cmd_eval(const EvalArgs& a) {
  auto cfg = load_config(a.config);
  const auto kinds = parse_kinds(a.kinds);
  cfg.eval.thresholds = parse_thresholds(a.thresholds);
  cfg.eval.seed = a.seed;
  if (a.pairs != "cross" && a.pairs != "all") throw UsageError("--pairs must be cross or all");

  auto manifest = read_split(a.data, a.split);
  if (a.pairs == "cross") manifest = cross_only(std::move(manifest));
  if (manifest.pairs.empty()) throw ConfigError("eval: no pairs to evaluate");

  // Loaded bundles: at most one proxy-stage bundle (used for gray) and one
  // transform bundle per kind.
  std::deque<bundle::Loaded> loaded;
  train::TrainedModels* proxy_bundle = nullptr;
  std::map<TransformKind, train::TrainedModels*> by_kind;
  for (const auto& path : a.models) {
    loaded.push_back(bundle::to_models(bundle::load(path)));
    auto& l = loaded.back();
    if (l.stage == "proxy") {
      if (proxy_bundle) throw UsageError("--models: more than one proxy-stage bundle");
      proxy_bundle = &l.models;
    } else {
      if (by_kind.count(l.models.kind)) throw UsageError("--models: two bundles for kind " + colorspace::to_string(l.models.kind));
      by_kind[l.models.kind] = &l.models;
    }
  }

  std::vector<eval::EvalEntry> entries;
  for (auto k : kinds) {
    eval::EvalEntry e;
    e.kind = k;
    if (k == TransformKind::gray) {
      if (proxy_bundle) e.proxy = &proxy_bundle->proxy;
    } else if (auto it = by_kind.find(k); it != by_kind.end()) {
      e.models = it->second;
      e.proxy = &it->second->proxy;
    } else if (k == TransformKind::sumlog) {
      e.fixed_params = colorspace::constrained_params(cfg.color.wavelengths);
    } else {
      throw UsageError("--kinds " + colorspace::to_string(k) + " needs a trained bundle in --models");
    }
    entries.push_back(e);
  }

  const auto report = eval::evaluate(manifest, entries, cfg.eval);
  const fs::path out(a.out);
  std::error_code ec;
  fs::create_directories(out / "samples", ec);
  if (ec) throw IoError("cannot create " + (out / "samples").string());
  std::ostringstream pairs_csv, summary_csv;
  report.write_pairs_csv(pairs_csv);
  report.write_summary_csv(summary_csv);
  write_text(out / "pairs.csv", pairs_csv.str());
  write_text(out / "summary.csv", summary_csv.str());

  // Example pairs: inputs and each kind's outputs, evenly spread over the set.
  const train::PairStore store(manifest, cfg.eval.height);
  const std::size_t n = std::min(cfg.eval_samples, store.size());
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t i = s * store.size() / n;
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair%03zu", i);
    io::write_png(out / "samples" / (std::string(stem) + "_rgb1.png"), *store[i].rgb1);
    io::write_png(out / "samples" / (std::string(stem) + "_rgb2.png"), *store[i].rgb2);
    for (const auto& e : entries) {
      const auto [g1, g2] = eval::transform_pair(e, *store[i].rgb1, *store[i].rgb2, cfg.color);
      const auto kind = colorspace::to_string(e.kind);
      io::write_png(out / "samples" / (std::string(stem) + "_" + kind + "_1.png"), g1);
      io::write_png(out / "samples" / (std::string(stem) + "_" + kind + "_2.png"), g2);
    }
  }

  std::cout << summary_csv.str();
  return 0;
}

// ---------------------------------------------------------------------------

struct TransformArgs {
  std::string kind, model, img1, img2, out, config;
};

int cmd_transform(const TransformArgs& a) {
  const auto cfg = load_config(a.config);
  TransformKind kind;
  try {
    kind = colorspace::parse_kind(a.kind);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto rgb1 = io::read_png_rgb(a.img1), rgb2 = io::read_png_rgb(a.img2);
  if (rgb1.width != rgb2.width || rgb1.height != rgb2.height) throw ShapeError("transform: images differ in size");

  eval::EvalEntry e;
  e.kind = kind;
  std::optional<bundle::Loaded> loaded;
  if (!a.model.empty()) {
    loaded = bundle::to_models(bundle::load(a.model));
    if (loaded->stage != "transform" || loaded->models.kind != kind) {
      throw UsageError("--model holds a " + loaded->stage + " bundle of kind " + colorspace::to_string(loaded->models.kind));
    }
    e.models = &loaded->models;
  } else if (kind == TransformKind::sumlog) {
    e.fixed_params = colorspace::constrained_params(cfg.color.wavelengths);
  } else if (kind != TransformKind::gray) {
    throw UsageError("--kind " + a.kind + " requires --model");
  }
  const auto [g1, g2] = eval::transform_pair(e, rgb1, rgb2, cfg.color);
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out);
  io::write_png(fs::path(a.out) / "1.png", g1);
  io::write_png(fs::path(a.out) / "2.png", g2);
  std::printf("wrote %s %s\n", (fs::path(a.out) / "1.png").c_str(), (fs::path(a.out) / "2.png").c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct MatchArgs {
  std::string img1, img2, config;
  std::uint64_t seed = 0;
};

int cmd_match(const MatchArgs& a) {
  const auto cfg = load_config(a.config);
  const auto g1 = colorspace::gray(io::read_png_rgb(a.img1));
  const auto g2 = colorspace::gray(io::read_png_rgb(a.img2));
  const auto r = matcher::count_inliers(g1, g2, cfg.matcher, a.seed);
  const std::size_t inliers = r.inlier_count, matches = r.correspondences.size();
  std::printf("inliers=%zu matches=%zu seed=%llu\n", inliers, matches, static_cast<unsigned long long>(a.seed));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"matchkit: learned RGB-to-grayscale transforms for cross-illumination feature matching"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic day/night dataset with manifests");
  gen_cmd->add_option("--config", gen.config, "Run configuration file");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Pre-train the proxy or train a transform");
  train_cmd->add_option("--stage", tr.stage, "proxy | transform")->required()->check(CLI::IsMember({"proxy", "transform"}));
  train_cmd->add_option("--kind", tr.kind, "gray | sumlog | sumlog-e | mlp | mlp-e");
  train_cmd->add_option("--data", tr.data, "Dataset directory from gen-data")->required();
  train_cmd->add_option("--model", tr.model, "Pre-trained proxy bundle (transform stage)");
  train_cmd->add_option("--out", tr.out, "Output model bundle")->required();
  train_cmd->add_option("--log", tr.log, "Training log CSV (default: <out>.log.csv)");
  train_cmd->add_option("--config", tr.config, "Run configuration file");
  train_cmd->add_option("--seed", tr.seed, "Training seed");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate transforms on held-out pairs");
  eval_cmd->add_option("--data", ev.data, "Dataset directory from gen-data")->required();
  eval_cmd->add_option("--models", ev.models, "Model bundles (proxy and/or transform stage)");
  eval_cmd->add_option("--kinds", ev.kinds, "Comma-separated transform kinds");
  eval_cmd->add_option("--thresholds", ev.thresholds, "Comma-separated inlier thresholds for dead reckoning");
  eval_cmd->add_option("--pairs", ev.pairs, "cross (cross-illuminant only) | all");
  eval_cmd->add_option("--split", ev.split, "Manifest file inside --data");
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();
  eval_cmd->add_option("--config", ev.config, "Run configuration file");
  eval_cmd->add_option("--seed", ev.seed, "Matcher seed");

  TransformArgs tf;
  auto* tf_cmd = app.add_subcommand("transform", "Transform one RGB pair to grayscale");
  tf_cmd->add_option("--kind", tf.kind, "Transform kind")->required();
  tf_cmd->add_option("--model", tf.model, "Transform bundle (not needed for gray or closed-form sumlog)");
  tf_cmd->add_option("--img1", tf.img1, "First RGB PNG")->required();
  tf_cmd->add_option("--img2", tf.img2, "Second RGB PNG")->required();
  tf_cmd->add_option("--out", tf.out, "Output directory")->required();
  tf_cmd->add_option("--config", tf.config, "Run configuration file");

  MatchArgs ma;
  auto* match_cmd = app.add_subcommand("match", "Count inlier matches between two images");
  match_cmd->add_option("--img1", ma.img1, "First PNG")->required();
  match_cmd->add_option("--img2", ma.img2, "Second PNG")->required();
  match_cmd->add_option("--seed", ma.seed, "RANSAC seed");
  match_cmd->add_option("--config", ma.config, "Run configuration file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (train_cmd->parsed()) return cmd_train(tr);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (tf_cmd->parsed()) return cmd_transform(tf);
    if (match_cmd->parsed()) return cmd_match(ma);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
