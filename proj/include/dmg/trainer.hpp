// Training, ensembling, and scenario comparison on prepared tile stores:
// seeded mini-batch Adam training with per-epoch validation and best-
// checkpoint retention, probability-averaged ensembles over the split
// seeds, test-set evaluation into metric reports, and the five-mode
// comparison harness. Runs are deterministic functions of (config, data):
// shuffles, initialization, and accumulation orders are all fixed.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmg/metrics.hpp"
#include "dmg/model.hpp"
#include "dmg/optim.hpp"
#include "dmg/preprocess.hpp"

namespace dmg {

struct TrainConfig {
  int mode_id = 2;
  int base_width = 16;
  int batch_size = 16;
  int epochs = 150;
  double base_lr = 1e-4;
  double decay_factor = 0.5;
  int decay_interval = 50;  // epochs between learning-rate steps
  uint64_t seed = 1;
  std::vector<double> class_weights;  // empty disables weighting; else one per class
  std::string profile = "paper";
  int depth = 5;
  bool attention = true;

  void validate() const {
    require(mode_id >= 1 && mode_id <= 5, "train config: mode_id must be 1..5");
    require(base_width >= 1, "train config: base_width must be >= 1");
    require(batch_size >= 1, "train config: batch_size must be >= 1");
    require(epochs >= 1, "train config: epochs must be >= 1");
    require(base_lr > 0.0, "train config: base_lr must be positive");
    require(decay_factor > 0.0 && decay_factor <= 1.0, "train config: decay_factor in (0,1]");
    require(decay_interval >= 1, "train config: decay_interval must be >= 1");
    require(class_weights.empty() || class_weights.size() == 4,
            "train config: class_weights needs one entry per class");
    require(depth >= 1, "train config: depth must be >= 1");
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.mode = mode_id;
    m.base_width = base_width;
    m.depth = depth;
    m.n_classes = 4;
    m.attention = attention;
    return m;
  }

  nlohmann::json to_json() const {
    return {{"mode_id", mode_id},         {"base_width", base_width},
            {"batch_size", batch_size},   {"epochs", epochs},
            {"base_lr", base_lr},         {"decay_factor", decay_factor},
            {"decay_interval", decay_interval}, {"seed", seed},
            {"class_weights", class_weights},   {"profile", profile},
            {"depth", depth},             {"attention", attention}};
  }
};

// Paper-faithful experimental settings.
inline TrainConfig paper_profile() { return TrainConfig{}; }

// Scaled-down settings that keep a full five-mode benchmark inside a
// desktop CPU budget; reports carry the profile name so the two are never
// mistaken for each other.
inline TrainConfig desk_profile() {
  TrainConfig c;
  c.base_width = 8;
  c.batch_size = 4;
  c.epochs = 8;
  c.base_lr = 1e-3;
  c.profile = "desk";
  return c;
}

inline double schedule_lr(const TrainConfig& cfg, int epoch) {
  return cfg.base_lr * std::pow(cfg.decay_factor, epoch / cfg.decay_interval);
}

// Inverse-frequency class weights from training labels, scaled so the
// pixel-weighted mean weight is 1 (which keeps the uniform-prediction loss
// at ln(n_classes)). Absent classes get weight 0.
inline std::vector<double> inverse_frequency_weights(const std::vector<const Tile*>& tiles) {
  std::array<int64_t, 4> counts{0, 0, 0, 0};
  for (const Tile* t : tiles)
    for (uint8_t v : t->label) counts[v]++;
  int64_t total = 0;
  int present = 0;
  for (int64_t c : counts) {
    total += c;
    present += c > 0;
  }
  require(present > 0, "class weights: no labeled pixels");
  std::vector<double> w(4, 0.0);
  for (int c = 0; c < 4; ++c) {
    if (counts[static_cast<size_t>(c)] > 0) {
      w[static_cast<size_t>(c)] = static_cast<double>(total) /
                                  (static_cast<double>(present) *
                                   static_cast<double>(counts[static_cast<size_t>(c)]));
    }
  }
  return w;
}

// ---------------------------------------------------------------- batches

struct TileBatch {
  Tensor<float> pre, post;
  std::vector<uint8_t> labels;
};

inline TileBatch make_batch(const std::vector<const Tile*>& tiles) {
  require(!tiles.empty(), "make_batch: empty batch");
  int64_t b = static_cast<int64_t>(tiles.size());
  int64_t cp = static_cast<int64_t>(tiles[0]->pre_channels.size());
  int64_t cq = static_cast<int64_t>(tiles[0]->post_channels.size());
  int64_t plane = kTilePx * kTilePx;
  TileBatch out;
  out.pre = Tensor<float>::uninit(Shape4{b, cp, kTilePx, kTilePx});
  out.post = Tensor<float>::uninit(Shape4{b, cq, kTilePx, kTilePx});
  out.labels.resize(static_cast<size_t>(b * plane));
  for (int64_t i = 0; i < b; ++i) {
    const Tile& t = *tiles[static_cast<size_t>(i)];
    require(static_cast<int64_t>(t.pre_channels.size()) == cp &&
                static_cast<int64_t>(t.post_channels.size()) == cq,
            "make_batch: mixed channel layouts in one batch");
    std::copy(t.pre.begin(), t.pre.end(), out.pre.data() + i * cp * plane);
    std::copy(t.post.begin(), t.post.end(), out.post.data() + i * cq * plane);
    std::copy(t.label.begin(), t.label.end(), out.labels.begin() + i * plane);
  }
  return out;
}

// Argmax over a channel range [c0, c1) of a probability tensor; ties take
// the lowest channel. Returns per-pixel channel indices.
template <class T>
std::vector<uint8_t> argmax_range(const Tensor<T>& probs, int64_t c0, int64_t c1) {
  const Shape4& s = probs.shape();
  require(c0 >= 0 && c1 <= s.c && c0 < c1, "argmax_range: bad channel range");
  int64_t plane = s.plane();
  std::vector<uint8_t> out(static_cast<size_t>(s.b * plane));
  const T* p = probs.data();
  for (int64_t bi = 0; bi < s.b; ++bi) {
    const T* base = p + bi * s.c * plane;
    for (int64_t i = 0; i < plane; ++i) {
      int64_t best = c0;
      T bv = base[c0 * plane + i];
      for (int64_t c = c0 + 1; c < c1; ++c) {
        T v = base[c * plane + i];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[static_cast<size_t>(bi * plane + i)] = static_cast<uint8_t>(best);
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

struct TrainResult {
  std::filesystem::path checkpoint;
  double best_val_harmonic = -1.0;
  int best_epoch = 0;
  nlohmann::json log = nlohmann::json::array();
};

namespace detail {

template <class Model>
MetricsAccumulator accumulate_eval(Model& model, const std::vector<const Tile*>& tiles,
                                   int batch_size) {
  MetricsAccumulator acc;
  for (size_t at = 0; at < tiles.size(); at += static_cast<size_t>(batch_size)) {
    std::vector<const Tile*> chunk(tiles.begin() + static_cast<int64_t>(at),
                                   tiles.begin() +
                                       static_cast<int64_t>(std::min(
                                           tiles.size(), at + static_cast<size_t>(batch_size))));
    TileBatch batch = make_batch(chunk);
    auto pred = model.predict(batch.pre, batch.post);
    std::vector<uint8_t> damage = argmax_range(pred.probs, 1, 4);
    acc.add(pred.classes.data(), damage.data(), batch.labels.data(),
            static_cast<int64_t>(batch.labels.size()));
  }
  return acc;
}

}  // namespace detail

// Seeded mini-batch training with per-epoch validation. Saves the
// checkpoint whenever the validation harmonic-mean F improves and appends
// one JSON record per epoch to the log (and to log_path as JSON lines when
// given). Aborts on a non-finite loss, naming the batch.
inline TrainResult train_on(const TrainConfig& cfg, const std::vector<const Tile*>& train_tiles,
                            const std::vector<const Tile*>& val_tiles,
                            const std::filesystem::path& checkpoint_path,
                            const std::filesystem::path& log_path = {},
                            const std::function<void(const nlohmann::json&)>& on_epoch = {}) {
  cfg.validate();
  require(!train_tiles.empty(), "train: empty training split");
  require(!val_tiles.empty(), "train: empty validation split");

  DualEncoderUNet<float> model(cfg.model_config(), mix_seed(cfg.seed, detail::fnv1a("init")));
  auto params = model.params();
  Rng shuffle_rng = Rng(cfg.seed).fork("shuffle");

  std::ofstream log_out;
  if (!log_path.empty()) {
    log_out.open(log_path, std::ios::trunc);
    require(log_out.good(), "train: cannot open log " + log_path.string());
  }

  TrainResult result;
  result.checkpoint = checkpoint_path;
  AdamConfig adam;
  int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = schedule_lr(cfg, epoch);
    adam.lr = lr;

    std::vector<const Tile*> order = train_tiles;
    shuffle_rng.fork(static_cast<uint64_t>(epoch)).shuffle(order);

    double loss_sum = 0.0;
    int64_t loss_tiles = 0;
    int batch_id = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
      std::vector<const Tile*> chunk(
          order.begin() + static_cast<int64_t>(at),
          order.begin() + static_cast<int64_t>(
                              std::min(order.size(), at + static_cast<size_t>(cfg.batch_size))));
      TileBatch batch = make_batch(chunk);
      Tape<float> tape;
      Tensor<float> logits = model.forward(&tape, batch.pre, batch.post, true);
      Tensor<float> probs = softmax_channels(&tape, logits);
      Tensor<float> target = one_hot<float>(batch.labels, logits.shape().b, kTilePx, kTilePx, 4);
      Tensor<float> loss = cross_entropy(&tape, probs, target, cfg.class_weights);
      double loss_value = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(loss_value)) {
        fail_numerical("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                       " batch " + std::to_string(batch_id + 1) + " (first tile " +
                       chunk.front()->id + ")");
      }
      zero_grads(params);
      tape.backward(loss);
      adam_step(params, adam, ++step);
      loss_sum += loss_value * static_cast<double>(chunk.size());
      loss_tiles += static_cast<int64_t>(chunk.size());
      ++batch_id;
    }

    MetricsAccumulator val_acc = detail::accumulate_eval(model, val_tiles, cfg.batch_size);
    MetricsReport val_report = compute_report(val_acc);
    bool improved = val_report.means.harmonic > result.best_val_harmonic;
    if (improved) {
      result.best_val_harmonic = val_report.means.harmonic;
      result.best_epoch = epoch + 1;
      nlohmann::json meta = {{"train_config", cfg.to_json()},
                             {"epoch", epoch + 1},
                             {"val_harmonic", val_report.means.harmonic},
                             {"profile", cfg.profile}};
      model.save(checkpoint_path, meta);
    }

    nlohmann::json record = {
        {"epoch", epoch + 1},
        {"lr", lr},
        {"train_loss", loss_sum / static_cast<double>(loss_tiles)},
        {"val_fscore",
         {{"Survived", val_report.scores[0].f},
          {"Moderated", val_report.scores[1].f},
          {"Destroyed", val_report.scores[2].f}}},
        {"val_mean_arithmetic", val_report.means.arithmetic},
        {"val_mean_harmonic", val_report.means.harmonic},
        {"best_val_harmonic", result.best_val_harmonic},
        {"checkpointed", improved},
        {"profile", cfg.profile}};
    result.log.push_back(record);
    if (log_out.is_open()) log_out << record.dump() << "\n";
    if (on_epoch) on_epoch(record);
  }
  return result;
}

// ---------------------------------------------------------------- ensembles

struct EnsemblePrediction {
  std::vector<uint8_t> classes;         // 4-class argmax of the averaged probabilities
  std::vector<uint8_t> damage_classes;  // argmax over the damage channels only
  Tensor<float> probs;                  // averaged member probabilities
};

// Member models trained under different split seeds, combined by averaging
// softmax probabilities per pixel. Accumulation runs in doubles in member
// order, so an ensemble of identical members reproduces the single model
// down to the bit.
class Ensemble {
public:
  static Ensemble load(const std::vector<std::filesystem::path>& member_paths) {
    require(!member_paths.empty(), "ensemble: no member checkpoints");
    Ensemble e;
    for (const auto& path : member_paths) {
      e.members_.push_back(DualEncoderUNet<float>::load(path));
      const ModelConfig& a = e.members_.front().config();
      const ModelConfig& b = e.members_.back().config();
      require(a.mode == b.mode && a.base_width == b.base_width && a.depth == b.depth &&
                  a.n_classes == b.n_classes && a.attention == b.attention,
              "ensemble: member " + path.string() + " has an incompatible model configuration");
    }
    return e;
  }

  int mode() const { return members_.front().config().mode; }
  size_t size() const { return members_.size(); }
  std::vector<DualEncoderUNet<float>>& members() { return members_; }

  EnsemblePrediction predict(const Tensor<float>& pre, const Tensor<float>& post) {
    const Shape4& s = pre.shape();
    Shape4 ps{s.b, 4, s.h, s.w};
    std::vector<double> sum(static_cast<size_t>(ps.numel()), 0.0);
    for (auto& m : members_) {
      Prediction<float> p = m.predict(pre, post);
      require_shape(p.probs.shape(), ps, "ensemble member output");
      const float* v = p.probs.data();
      for (int64_t i = 0; i < ps.numel(); ++i) sum[static_cast<size_t>(i)] += v[i];
    }

    EnsemblePrediction out;
    out.probs = Tensor<float>::uninit(ps);
    double inv = 1.0 / static_cast<double>(members_.size());
    float* pv = out.probs.data();
    for (int64_t i = 0; i < ps.numel(); ++i)
      pv[i] = static_cast<float>(sum[static_cast<size_t>(i)] * inv);

    int64_t plane = ps.plane();
    out.classes.resize(static_cast<size_t>(ps.b * plane));
    out.damage_classes.resize(static_cast<size_t>(ps.b * plane));
    for (int64_t bi = 0; bi < ps.b; ++bi) {
      const double* base = sum.data() + bi * 4 * plane;
      for (int64_t i = 0; i < plane; ++i) {
        int full = 0, dmg = 1;
        double fb = base[i], db = base[plane + i];
        for (int c = 1; c < 4; ++c) {
          double v = base[c * plane + i];
          if (v > fb) {
            fb = v;
            full = c;
          }
          if (c > 1 && v > db) {
            db = v;
            dmg = c;
          }
        }
        out.classes[static_cast<size_t>(bi * plane + i)] = static_cast<uint8_t>(full);
        out.damage_classes[static_cast<size_t>(bi * plane + i)] = static_cast<uint8_t>(dmg);
      }
    }
    return out;
  }

private:
  std::vector<DualEncoderUNet<float>> members_;
};

// Test-set metrics for an ensemble (or a single model as an ensemble of
// one). Tiles are consumed in the given order in fixed-size batches, so
// the accumulated counts are deterministic.
inline MetricsReport evaluate_tiles(Ensemble& ensemble, const std::vector<const Tile*>& tiles,
                                    int batch_size = 4) {
  require(!tiles.empty(), "evaluate: no tiles");
  MetricsAccumulator acc;
  for (size_t at = 0; at < tiles.size(); at += static_cast<size_t>(batch_size)) {
    std::vector<const Tile*> chunk(tiles.begin() + static_cast<int64_t>(at),
                                   tiles.begin() +
                                       static_cast<int64_t>(std::min(
                                           tiles.size(), at + static_cast<size_t>(batch_size))));
    TileBatch batch = make_batch(chunk);
    EnsemblePrediction pred = ensemble.predict(batch.pre, batch.post);
    acc.add(pred.classes.data(), pred.damage_classes.data(), batch.labels.data(),
            static_cast<int64_t>(batch.labels.size()));
  }
  return compute_report(acc);
}

// ---------------------------------------------------------------- scenario suite

namespace detail {

inline double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

}  // namespace detail

// Loads every tile of the store once and hands out mode-selected views.
class TileCache {
public:
  explicit TileCache(const TileStore& store) : store_(&store) {}

  std::vector<Tile> select(const std::vector<std::string>& ids, int mode) {
    std::vector<Tile> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(select_mode_channels(full(id), mode));
    return out;
  }

private:
  const Tile& full(const std::string& id) {
    auto it = cache_.find(id);
    if (it == cache_.end()) it = cache_.emplace(id, store_->load(id)).first;
    return it->second;
  }
  const TileStore* store_;
  std::map<std::string, Tile> cache_;
};

inline std::vector<const Tile*> tile_ptrs(const std::vector<Tile>& tiles) {
  std::vector<const Tile*> out;
  out.reserve(tiles.size());
  for (const Tile& t : tiles) out.push_back(&t);
  return out;
}

// Trains every requested mode under every split seed of the manifest with
// identical settings, evaluates each member and the per-mode ensemble on
// the held-out test set, and assembles a comparison report (JSON plus a
// rendered text table). Per-class spreads are sample standard deviations
// across the seeds.
inline nlohmann::json run_scenario_suite(const std::vector<int>& modes, const TileStore& store,
                                         const TrainConfig& base_cfg,
                                         const std::filesystem::path& out_dir) {
  require(!modes.empty(), "scenario suite: no modes requested");
  std::filesystem::create_directories(out_dir);
  TileCache cache(store);
  const SplitManifest& split = store.split();

  nlohmann::json report;
  report["profile"] = base_cfg.profile;
  report["seeds"] = nlohmann::json::array();
  for (const auto& s : split.splits) report["seeds"].push_back(s.seed);
  auto& modes_json = report["modes"] = nlohmann::json::object();

  std::string table = "mode |";
  for (const auto& name : {"Destroyed", "Moderated", "Survived"})
    table += std::string(" F_") + name + " (seed mean +- std) |";
  table += " ensemble mean F | ensemble harmonic F\n";

  for (int mode : modes) {
    TrainConfig cfg = base_cfg;
    cfg.mode_id = mode;

    std::vector<Tile> test_tiles = cache.select(split.test, mode);
    std::vector<const Tile*> test_ptrs = tile_ptrs(test_tiles);

    std::vector<std::filesystem::path> member_paths;
    nlohmann::json per_seed = nlohmann::json::array();
    std::array<std::vector<double>, 3> seed_f;
    for (const auto& seed_split : split.splits) {
      TrainConfig run_cfg = cfg;
      run_cfg.seed = seed_split.seed;
      std::vector<Tile> train_tiles = cache.select(seed_split.train, mode);
      std::vector<Tile> val_tiles = cache.select(seed_split.val, mode);
      std::string stem = "mode" + std::to_string(mode) + "_seed" +
                         std::to_string(seed_split.seed);
      TrainResult res = train_on(run_cfg, tile_ptrs(train_tiles), tile_ptrs(val_tiles),
                                 out_dir / (stem + ".ckpt"), out_dir / (stem + ".jsonl"));
      member_paths.push_back(res.checkpoint);

      Ensemble single = Ensemble::load({res.checkpoint});
      MetricsReport test_report = evaluate_tiles(single, test_ptrs, cfg.batch_size);
      for (int c = 0; c < 3; ++c)
        seed_f[static_cast<size_t>(c)].push_back(test_report.scores[static_cast<size_t>(c)].f);
      per_seed.push_back({{"seed", seed_split.seed},
                          {"best_epoch", res.best_epoch},
                          {"best_val_harmonic", res.best_val_harmonic},
                          {"test", test_report.to_json()}});
    }

    Ensemble ensemble = Ensemble::load(member_paths);
    MetricsReport ens_report = evaluate_tiles(ensemble, test_ptrs, cfg.batch_size);

    nlohmann::json mode_json;
    mode_json["per_seed"] = per_seed;
    for (int c = 0; c < 3; ++c) {
      const auto& xs = seed_f[static_cast<size_t>(c)];
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      mode_json["fscore_seed_mean"][damage_class_names()[static_cast<size_t>(c)]] = mean;
      mode_json["fscore_seed_std"][damage_class_names()[static_cast<size_t>(c)]] =
          detail::sample_std(xs);
    }
    mode_json["ensemble"] = ens_report.to_json();
    mode_json["mean_f"] = ens_report.means.arithmetic;
    modes_json[std::to_string(mode)] = mode_json;

    char line[256];
    auto fmt = [&](int c) {
      double mean = 0.0;
      for (double x : seed_f[static_cast<size_t>(c)]) mean += x;
      mean /= static_cast<double>(seed_f[static_cast<size_t>(c)].size());
      return std::pair<double, double>(mean, detail::sample_std(seed_f[static_cast<size_t>(c)]));
    };
    auto [dm, ds] = fmt(2);
    auto [mm, ms] = fmt(1);
    auto [sm, ss] = fmt(0);
    std::snprintf(line, sizeof(line),
                  "%4d | %.4f +- %.4f | %.4f +- %.4f | %.4f +- %.4f | %.4f | %.4f\n", mode, dm,
                  ds, mm, ms, sm, ss, ens_report.means.arithmetic, ens_report.means.harmonic);
    table += line;
  }

  report["comparison_table"] = table;
  std::ofstream out(out_dir / "scenario_report.json");
  require(out.good(), "scenario suite: cannot write report");
  out << report.dump(2) << "\n";
  return report;
}

}  // namespace dmg
