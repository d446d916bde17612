// dmg: command-line front end for the damage-mapping toolkit.
//
// Subcommands cover the full pipeline: generate (synthetic scenes),
// prepare (coregister/filter/tile into a store), train (one checkpoint
// per split seed), evaluate (ensemble metrics on the held-out test set),
// predict (rendered class maps plus probability planes), and gradcheck
// (finite-difference verification of the autodiff core).
//
// Configs are JSON; unknown keys are rejected so typos cannot silently
// fall back to defaults. Every command writes the fully resolved
// configuration next to its outputs. Exit codes: 0 success, 2 validation
// error, 3 missing artifact, 4 numerical failure.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dmg/gradcheck.hpp"
#include "dmg/render.hpp"
#include "dmg/scenegen.hpp"
#include "dmg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in.good()) dmg::fail_missing("config file not found: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    dmg::fail_validation("config " + path + ": " + e.what());
  }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (j.is_null()) return;
  dmg::require(j.is_object(), where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) dmg::fail_validation(where + ": unknown key \"" + key + "\"");
  }
}

void write_resolved(const fs::path& out_dir, const json& resolved) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "resolved_config.json");
  dmg::require(out.good(), "cannot write resolved config under " + out_dir.string());
  out << resolved.dump(2) << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string require_out(const json& cfg, const std::string& cli_out, const std::string& command) {
  std::string out = !cli_out.empty() ? cli_out : cfg.value("out", std::string());
  if (out.empty()) dmg::fail_validation(command + ": no output directory (--out or config \"out\")");
  return out;
}

// ------------------------------------------------------------------ generate

int cmd_generate(const json& cfg, const std::string& cli_out, uint64_t cli_seed, bool seed_set,
                 int cli_scenes, bool scenes_set) {
  check_keys(cfg, {"out", "scenes", "seed", "params"}, "generate config");

  dmg::SceneParams params;
  if (cfg.contains("params")) {
    json defaults = dmg::scene_params_json(dmg::SceneParams{});
    std::set<std::string> param_keys;
    for (const auto& [k, v] : defaults.items()) {
      (void)v;
      param_keys.insert(k);
    }
    check_keys(cfg.at("params"), param_keys, "generate config params");
    params = dmg::scene_params_from_json(cfg.at("params"));
  }
  params.validate();

  int scenes = scenes_set ? cli_scenes : cfg.value("scenes", 3);
  uint64_t seed = seed_set ? cli_seed : cfg.value("seed", uint64_t{1});
  dmg::require(scenes >= 1, "generate: scenes must be >= 1");
  fs::path out_dir = require_out(cfg, cli_out, "generate");

  write_resolved(out_dir, {{"command", "generate"},
                           {"out", out_dir.string()},
                           {"scenes", scenes},
                           {"seed", seed},
                           {"params", dmg::scene_params_json(params)}});

  for (int i = 0; i < scenes; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    uint64_t scene_seed = dmg::mix_seed(seed, static_cast<uint64_t>(i));
    dmg::Scene scene = dmg::generate_world(scene_seed, params);
    dmg::render_all(scene);

    char name[32];
    std::snprintf(name, sizeof(name), "scene_%03d", i);
    dmg::write_scene(scene, out_dir / name);

    auto counts = scene.class_counts();
    std::printf("%s seed=%llu buildings=%zu survived=%d moderated=%d destroyed=%d (%.1fs)\n",
                name, static_cast<unsigned long long>(scene_seed), scene.buildings.size(),
                counts[0], counts[1], counts[2], seconds_since(t0));
  }
  std::printf("wrote %d scenes to %s\n", scenes, out_dir.string().c_str());
  return 0;
}

// ------------------------------------------------------------------- prepare

int cmd_prepare(const json& cfg, const std::string& cli_out, int cli_mode, uint64_t cli_seed,
                bool seed_set) {
  check_keys(cfg,
             {"out", "scenes_dir", "mode", "master_seed", "split_seeds", "max_shift",
              "multilook_factor", "lee_k", "low_corr_threshold"},
             "prepare config");

  std::string scenes_dir = cfg.value("scenes_dir", std::string());
  if (scenes_dir.empty()) dmg::fail_validation("prepare: config needs \"scenes_dir\"");
  if (!fs::is_directory(scenes_dir)) dmg::fail_missing("prepare: no such directory " + scenes_dir);

  int mode = cli_mode != 0 ? cli_mode : cfg.value("mode", 1);
  uint64_t master_seed = seed_set ? cli_seed : cfg.value("master_seed", uint64_t{1});
  std::vector<uint64_t> split_seeds =
      cfg.value("split_seeds", std::vector<uint64_t>{1, 2, 3});

  dmg::PrepareOptions opt;
  opt.max_shift = cfg.value("max_shift", opt.max_shift);
  opt.multilook_factor = cfg.value("multilook_factor", opt.multilook_factor);
  opt.lee_k = cfg.value("lee_k", opt.lee_k);
  opt.low_corr_threshold = cfg.value("low_corr_threshold", opt.low_corr_threshold);

  fs::path out_dir = require_out(cfg, cli_out, "prepare");
  write_resolved(out_dir, {{"command", "prepare"},
                           {"out", out_dir.string()},
                           {"scenes_dir", scenes_dir},
                           {"mode", mode},
                           {"master_seed", master_seed},
                           {"split_seeds", split_seeds},
                           {"max_shift", opt.max_shift},
                           {"multilook_factor", opt.multilook_factor},
                           {"lee_k", opt.lee_k},
                           {"low_corr_threshold", opt.low_corr_threshold}});

  std::vector<std::string> scene_names;
  for (const auto& entry : fs::directory_iterator(scenes_dir))
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json"))
      scene_names.push_back(entry.path().filename().string());
  std::sort(scene_names.begin(), scene_names.end());
  if (scene_names.empty()) dmg::fail_missing("prepare: no scene directories in " + scenes_dir);

  std::vector<dmg::Tile> tiles;
  json scene_logs = json::object();
  int kept_scenes = 0;
  for (const std::string& name : scene_names) {
    auto t0 = std::chrono::steady_clock::now();
    dmg::Scene scene = dmg::load_scene(fs::path(scenes_dir) / name);
    double t_load = seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    dmg::PreparedScene prepared = dmg::prepare_scene(scene, opt);
    double t_prep = seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    std::vector<dmg::Tile> scene_tiles = dmg::tile_scene(prepared, name, mode);
    double t_tile = seconds_since(t0);

    scene_logs[name] = prepared.log;
    kept_scenes += scene_tiles.empty() ? 0 : 1;
    std::printf("%s: %zu tiles (load %.2fs, preprocess %.2fs, tile %.2fs)\n", name.c_str(),
                scene_tiles.size(), t_load, t_prep, t_tile);
    for (auto& t : scene_tiles) tiles.push_back(std::move(t));
  }

  std::vector<std::string> ids;
  ids.reserve(tiles.size());
  for (const auto& t : tiles) ids.push_back(t.id);
  dmg::SplitManifest manifest = dmg::split_dataset(ids, master_seed, split_seeds);

  json extra = {{"mode", mode},
                {"prepare_options",
                 {{"max_shift", opt.max_shift},
                  {"multilook_factor", opt.multilook_factor},
                  {"lee_k", opt.lee_k},
                  {"low_corr_threshold", opt.low_corr_threshold}}},
                {"scene_logs", scene_logs}};
  dmg::TileStore::write(out_dir, tiles, manifest, extra);

  std::printf("store %s: %zu tiles from %d/%zu scenes, %zu test / %zu pool, %zu split seeds\n",
              out_dir.string().c_str(), tiles.size(), kept_scenes, scene_names.size(),
              manifest.test.size(), ids.size() - manifest.test.size(), manifest.splits.size());
  return 0;
}

// --------------------------------------------------------------------- train

std::vector<double> resolve_class_weights(const json& spec,
                                          const std::vector<const dmg::Tile*>& train_tiles) {
  if (spec.is_null() || (spec.is_string() && spec.get<std::string>() == "none")) return {};
  if (spec.is_string() && spec.get<std::string>() == "inverse_frequency")
    return dmg::inverse_frequency_weights(train_tiles);
  if (spec.is_array())
    return spec.get<std::vector<double>>();
  dmg::fail_validation(
      "train: class_weights must be \"none\", \"inverse_frequency\", or an array of 4 numbers");
}

int cmd_train(const json& cfg, const std::string& cli_out, const std::string& cli_profile,
              int cli_mode, uint64_t cli_seed, bool seed_set) {
  check_keys(cfg,
             {"out", "store", "mode", "profile", "base_width", "batch_size", "epochs", "base_lr",
              "decay_factor", "decay_interval", "depth", "attention", "class_weights", "seeds"},
             "train config");

  std::string store_dir = cfg.value("store", std::string());
  if (store_dir.empty()) dmg::fail_validation("train: config needs \"store\"");

  std::string profile = !cli_profile.empty() ? cli_profile : cfg.value("profile", "desk");
  dmg::TrainConfig base;
  if (profile == "desk") {
    base = dmg::desk_profile();
  } else if (profile == "paper") {
    base = dmg::paper_profile();
  } else {
    dmg::fail_validation("train: profile must be \"desk\" or \"paper\", got \"" + profile + "\"");
  }
  base.mode_id = cli_mode != 0 ? cli_mode : cfg.value("mode", base.mode_id);
  base.base_width = cfg.value("base_width", base.base_width);
  base.batch_size = cfg.value("batch_size", base.batch_size);
  base.epochs = cfg.value("epochs", base.epochs);
  base.base_lr = cfg.value("base_lr", base.base_lr);
  base.decay_factor = cfg.value("decay_factor", base.decay_factor);
  base.decay_interval = cfg.value("decay_interval", base.decay_interval);
  base.depth = cfg.value("depth", base.depth);
  base.attention = cfg.value("attention", base.attention);
  base.validate();

  json weights_spec = cfg.contains("class_weights") ? cfg.at("class_weights") : json("none");

  dmg::TileStore store = dmg::TileStore::open(store_dir);
  std::vector<uint64_t> manifest_seeds;
  for (const auto& s : store.split().splits) manifest_seeds.push_back(s.seed);

  std::vector<uint64_t> seeds;
  if (seed_set) {
    seeds = {cli_seed};
  } else if (cfg.contains("seeds")) {
    seeds = cfg.at("seeds").get<std::vector<uint64_t>>();
  } else {
    seeds = manifest_seeds;
  }
  dmg::require(!seeds.empty(), "train: no split seeds requested");

  fs::path out_dir = require_out(cfg, cli_out, "train");
  write_resolved(out_dir, {{"command", "train"},
                           {"out", out_dir.string()},
                           {"store", store_dir},
                           {"profile", profile},
                           {"mode", base.mode_id},
                           {"base_width", base.base_width},
                           {"batch_size", base.batch_size},
                           {"epochs", base.epochs},
                           {"base_lr", base.base_lr},
                           {"decay_factor", base.decay_factor},
                           {"decay_interval", base.decay_interval},
                           {"depth", base.depth},
                           {"attention", base.attention},
                           {"class_weights", weights_spec},
                           {"seeds", seeds}});

  dmg::TileCache cache(store);
  for (uint64_t seed : seeds) {
    const dmg::SeedSplit* split = nullptr;
    for (const auto& s : store.split().splits)
      if (s.seed == seed) split = &s;
    if (!split)
      dmg::fail_validation("train: seed " + std::to_string(seed) + " not in the store manifest");

    std::vector<dmg::Tile> train_tiles = cache.select(split->train, base.mode_id);
    std::vector<dmg::Tile> val_tiles = cache.select(split->val, base.mode_id);
    std::vector<const dmg::Tile*> train_ptrs = dmg::tile_ptrs(train_tiles);

    dmg::TrainConfig run_cfg = base;
    run_cfg.seed = seed;
    run_cfg.class_weights = resolve_class_weights(weights_spec, train_ptrs);

    std::string stem =
        "mode" + std::to_string(base.mode_id) + "_seed" + std::to_string(seed);
    std::printf("training %s: %zu train / %zu val tiles, %d epochs\n", stem.c_str(),
                train_tiles.size(), val_tiles.size(), base.epochs);
    auto t0 = std::chrono::steady_clock::now();
    dmg::TrainResult res = dmg::train_on(
        run_cfg, train_ptrs, dmg::tile_ptrs(val_tiles), out_dir / (stem + ".ckpt"),
        out_dir / (stem + ".jsonl"), [&](const json& rec) {
          std::printf("  epoch %d/%d lr %.2e loss %.4f val harmonic %.4f best %.4f%s\n",
                      rec.at("epoch").get<int>(), base.epochs, rec.at("lr").get<double>(),
                      rec.at("train_loss").get<double>(),
                      rec.at("val_mean_harmonic").get<double>(),
                      rec.at("best_val_harmonic").get<double>(),
                      rec.at("checkpointed").get<bool>() ? " *" : "");
          std::fflush(stdout);
        });
    std::printf("%s: best val harmonic %.4f at epoch %d (%.1fs)\n", stem.c_str(),
                res.best_val_harmonic, res.best_epoch, seconds_since(t0));
  }
  return 0;
}

// ---------------------------------------------------------- evaluate/predict

std::vector<fs::path> resolve_checkpoints(const json& cfg, const dmg::TileStore& store,
                                          int mode, const std::string& command) {
  bool has_list = cfg.contains("checkpoints");
  bool has_dir = cfg.contains("runs_dir");
  if (has_list == has_dir)
    dmg::fail_validation(command + ": config needs exactly one of \"checkpoints\" (paths) or "
                                   "\"runs_dir\" (directory of mode<m>_seed<s>.ckpt files)");

  std::vector<fs::path> paths;
  if (has_list) {
    for (const auto& p : cfg.at("checkpoints").get<std::vector<std::string>>())
      paths.emplace_back(p);
  } else {
    fs::path runs_dir = cfg.at("runs_dir").get<std::string>();
    for (const auto& s : store.split().splits)
      paths.push_back(runs_dir / ("mode" + std::to_string(mode) + "_seed" +
                                  std::to_string(s.seed) + ".ckpt"));
  }
  dmg::require(!paths.empty(), command + ": no checkpoints resolved");
  for (const auto& p : paths)
    if (!fs::exists(p)) dmg::fail_missing(command + ": checkpoint not found: " + p.string());
  return paths;
}

json member_basenames(const std::vector<fs::path>& paths) {
  json names = json::array();
  for (const auto& p : paths) names.push_back(p.filename().string());
  return names;
}

int cmd_evaluate(const json& cfg, const std::string& cli_out, int cli_mode) {
  check_keys(cfg, {"out", "store", "runs_dir", "checkpoints", "mode", "batch_size"},
             "evaluate config");

  std::string store_dir = cfg.value("store", std::string());
  if (store_dir.empty()) dmg::fail_validation("evaluate: config needs \"store\"");
  dmg::TileStore store = dmg::TileStore::open(store_dir);

  int mode = cli_mode != 0 ? cli_mode : cfg.value("mode", 2);
  int batch_size = cfg.value("batch_size", 4);
  dmg::require(batch_size >= 1, "evaluate: batch_size must be >= 1");

  std::vector<fs::path> ckpts = resolve_checkpoints(cfg, store, mode, "evaluate");
  dmg::Ensemble ensemble = dmg::Ensemble::load(ckpts);
  dmg::require(ensemble.mode() == mode,
               "evaluate: checkpoints are mode " + std::to_string(ensemble.mode()) +
                   " but mode " + std::to_string(mode) + " was requested");

  dmg::TileCache cache(store);
  std::vector<dmg::Tile> test_tiles = cache.select(store.split().test, mode);
  auto t0 = std::chrono::steady_clock::now();
  dmg::MetricsReport report =
      dmg::evaluate_tiles(ensemble, dmg::tile_ptrs(test_tiles), batch_size);

  fs::path out_dir = require_out(cfg, cli_out, "evaluate");
  write_resolved(out_dir, {{"command", "evaluate"},
                           {"out", out_dir.string()},
                           {"store", store_dir},
                           {"mode", mode},
                           {"batch_size", batch_size},
                           {"checkpoints", member_basenames(ckpts)}});

  json metrics = {{"mode", mode},
                  {"members", member_basenames(ckpts)},
                  {"tile_count", test_tiles.size()},
                  {"metrics", report.to_json()}};
  std::ofstream out(out_dir / "metrics.json");
  dmg::require(out.good(), "evaluate: cannot write metrics.json under " + out_dir.string());
  out << metrics.dump(2) << "\n";

  std::printf("mode %d, %zu members, %zu test tiles (%.1fs)\n", mode, ckpts.size(),
              test_tiles.size(), seconds_since(t0));
  for (int c = 0; c < 3; ++c)
    std::printf("  %-9s precision %.4f recall %.4f F %.4f\n",
                dmg::damage_class_names()[static_cast<size_t>(c)].c_str(),
                report.scores[static_cast<size_t>(c)].precision,
                report.scores[static_cast<size_t>(c)].recall,
                report.scores[static_cast<size_t>(c)].f);
  std::printf("  mean F: arithmetic %.4f harmonic %.4f\n", report.means.arithmetic,
              report.means.harmonic);
  return 0;
}

int cmd_predict(const json& cfg, const std::string& cli_out, int cli_mode) {
  check_keys(cfg, {"out", "store", "runs_dir", "checkpoints", "mode", "batch_size", "tiles"},
             "predict config");

  std::string store_dir = cfg.value("store", std::string());
  if (store_dir.empty()) dmg::fail_validation("predict: config needs \"store\"");
  dmg::TileStore store = dmg::TileStore::open(store_dir);

  int mode = cli_mode != 0 ? cli_mode : cfg.value("mode", 2);
  int batch_size = cfg.value("batch_size", 4);
  dmg::require(batch_size >= 1, "predict: batch_size must be >= 1");

  std::vector<std::string> tile_ids;
  json tiles_spec = cfg.contains("tiles") ? cfg.at("tiles") : json("test");
  if (tiles_spec.is_string() && tiles_spec.get<std::string>() == "test") {
    tile_ids = store.split().test;
  } else if (tiles_spec.is_string() && tiles_spec.get<std::string>() == "all") {
    tile_ids = store.ids();
  } else if (tiles_spec.is_array()) {
    tile_ids = tiles_spec.get<std::vector<std::string>>();
  } else {
    dmg::fail_validation("predict: tiles must be \"test\", \"all\", or an array of tile ids");
  }
  dmg::require(!tile_ids.empty(), "predict: no tiles selected");
  std::sort(tile_ids.begin(), tile_ids.end());

  std::vector<fs::path> ckpts = resolve_checkpoints(cfg, store, mode, "predict");
  dmg::Ensemble ensemble = dmg::Ensemble::load(ckpts);
  dmg::require(ensemble.mode() == mode,
               "predict: checkpoints are mode " + std::to_string(ensemble.mode()) +
                   " but mode " + std::to_string(mode) + " was requested");

  fs::path out_dir = require_out(cfg, cli_out, "predict");
  write_resolved(out_dir, {{"command", "predict"},
                           {"out", out_dir.string()},
                           {"store", store_dir},
                           {"mode", mode},
                           {"batch_size", batch_size},
                           {"tiles", tile_ids},
                           {"checkpoints", member_basenames(ckpts)}});

  dmg::TileCache cache(store);
  std::vector<dmg::Tile> tiles = cache.select(tile_ids, mode);
  std::vector<const dmg::Tile*> ptrs = dmg::tile_ptrs(tiles);

  const int64_t plane = dmg::kTilePx * dmg::kTilePx;
  for (size_t at = 0; at < ptrs.size(); at += static_cast<size_t>(batch_size)) {
    std::vector<const dmg::Tile*> chunk(
        ptrs.begin() + static_cast<int64_t>(at),
        ptrs.begin() + static_cast<int64_t>(std::min(at + static_cast<size_t>(batch_size),
                                                     ptrs.size())));
    dmg::TileBatch batch = dmg::make_batch(chunk);
    dmg::EnsemblePrediction pred = ensemble.predict(batch.pre, batch.post);

    for (size_t b = 0; b < chunk.size(); ++b) {
      const std::string& id = chunk[b]->id;
      std::vector<uint8_t> classes(
          pred.classes.begin() + static_cast<int64_t>(b) * plane,
          pred.classes.begin() + static_cast<int64_t>(b + 1) * plane);
      dmg::write_class_map(out_dir / (id + ".png"), dmg::kTilePx, dmg::kTilePx, classes);

      std::ofstream cls(out_dir / (id + "_classes.bin"), std::ios::binary | std::ios::trunc);
      cls.write(reinterpret_cast<const char*>(classes.data()),
                static_cast<std::streamsize>(classes.size()));
      dmg::require(cls.good(), "predict: cannot write classes for tile " + id);

      std::ofstream pb(out_dir / (id + "_probs.bin"), std::ios::binary | std::ios::trunc);
      pb.write(reinterpret_cast<const char*>(pred.probs.data() +
                                             static_cast<int64_t>(b) * 4 * plane),
               static_cast<std::streamsize>(4 * plane * sizeof(float)));
      dmg::require(pb.good(), "predict: cannot write probabilities for tile " + id);
    }
  }

  json index = {{"mode", mode},
                {"members", member_basenames(ckpts)},
                {"tiles", tile_ids},
                {"classes_dtype", "uint8"},
                {"probs_dtype", "float32_le"},
                {"probs_shape", {4, dmg::kTilePx, dmg::kTilePx}},
                {"probs_order", "channel_row_major"},
                {"class_values", {0, 1, 2, 3}}};
  std::ofstream idx(out_dir / "index.json");
  dmg::require(idx.good(), "predict: cannot write index.json under " + out_dir.string());
  idx << index.dump(2) << "\n";

  std::printf("predicted %zu tiles (mode %d, %zu members) into %s\n", tiles.size(), mode,
              ckpts.size(), out_dir.string().c_str());
  return 0;
}

// ----------------------------------------------------------------- gradcheck

int cmd_gradcheck(const json& cfg, const std::string& cli_out, int cli_seeds, bool seeds_set) {
  check_keys(cfg, {"out", "seeds"}, "gradcheck config");
  int seeds = seeds_set ? cli_seeds : cfg.value("seeds", 20);
  dmg::require(seeds >= 1, "gradcheck: seeds must be >= 1");

  std::ostringstream report;
  bool pass = dmg::run_gradcheck_suite(seeds, report);
  std::fputs(report.str().c_str(), stdout);

  std::string out = !cli_out.empty() ? cli_out : cfg.value("out", std::string());
  if (!out.empty()) {
    write_resolved(out, {{"command", "gradcheck"}, {"out", out}, {"seeds", seeds}});
    std::ofstream f(fs::path(out) / "gradcheck_report.txt");
    dmg::require(f.good(), "gradcheck: cannot write report under " + out);
    f << report.str();
  }
  if (!pass) dmg::fail_numerical("gradient check suite failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale building-damage mapping toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, profile;
  int mode = 0;
  uint64_t seed = 0;
  int scenes = 3;
  int gradcheck_seeds = 20;

  auto add_common = [&](CLI::App* sub, bool with_mode, bool with_seed) {
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--out", out_dir, "output directory (overrides config \"out\")");
    if (with_mode)
      sub->add_option("--mode", mode, "data-modality mode 1..5")->check(CLI::Range(1, 5));
    if (with_seed) sub->add_option("--seed", seed, "seed override");
  };

  CLI::App* c_generate = app.add_subcommand("generate", "synthesize scene directories");
  add_common(c_generate, false, true);
  c_generate->add_option("--scenes", scenes, "number of scenes");

  CLI::App* c_prepare = app.add_subcommand("prepare", "preprocess scenes into a tile store");
  add_common(c_prepare, true, true);

  CLI::App* c_train = app.add_subcommand("train", "train one checkpoint per split seed");
  add_common(c_train, true, true);
  c_train->add_option("--profile", profile, "desk or paper settings")
      ->check(CLI::IsMember({"desk", "paper"}));

  CLI::App* c_evaluate = app.add_subcommand("evaluate", "ensemble metrics on the test split");
  add_common(c_evaluate, true, false);

  CLI::App* c_predict = app.add_subcommand("predict", "render class maps and probabilities");
  add_common(c_predict, true, false);

  CLI::App* c_gradcheck = app.add_subcommand("gradcheck", "finite-difference autodiff checks");
  c_gradcheck->add_option("--config", config_path, "JSON configuration file");
  c_gradcheck->add_option("--out", out_dir, "optional report directory");
  c_gradcheck->add_option("--seeds", gradcheck_seeds, "number of random seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    json cfg = load_config(config_path);
    if (c_generate->parsed())
      return cmd_generate(cfg, out_dir, seed, c_generate->count("--seed") > 0, scenes,
                          c_generate->count("--scenes") > 0);
    if (c_prepare->parsed())
      return cmd_prepare(cfg, out_dir, mode, seed, c_prepare->count("--seed") > 0);
    if (c_train->parsed())
      return cmd_train(cfg, out_dir, profile, mode, seed, c_train->count("--seed") > 0);
    if (c_evaluate->parsed()) return cmd_evaluate(cfg, out_dir, mode);
    if (c_predict->parsed()) return cmd_predict(cfg, out_dir, mode);
    if (c_gradcheck->parsed())
      return cmd_gradcheck(cfg, out_dir, gradcheck_seeds, c_gradcheck->count("--seeds") > 0);
  } catch (const dmg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case dmg::ErrorKind::validation: return 2;
      case dmg::ErrorKind::missing_artifact: return 3;
      case dmg::ErrorKind::numerical: return 4;
    }
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
