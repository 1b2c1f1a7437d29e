#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvtt/checkpoint.hpp"
#include "mvtt/model.hpp"
#include "mvtt/parallel.hpp"
#include "mvtt/phantom.hpp"
#include "mvtt/random.hpp"

namespace mvtt {

struct TrainConfig {
  double initial_lr = 0.001;
  double lr_decay_rate = 0.98;  // applied once per epoch
  std::size_t max_epochs = 100;
  std::size_t early_stop_patience = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::size_t folds = 10;

  void validate() const {
    if (!(lr_decay_rate > 0.0 && lr_decay_rate <= 1.0)) throw Error("TrainConfig: lr_decay_rate must be in (0,1]");
    if (early_stop_patience < 1) throw Error("TrainConfig: early_stop_patience must be >= 1");
    if (!(initial_lr > 0.0)) throw Error("TrainConfig: initial_lr must be positive");
  }
};

template <typename Json>
void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"initial_lr", c.initial_lr},   {"lr_decay_rate", c.lr_decay_rate},
                     {"decay_unit", "epoch"},        {"max_epochs", c.max_epochs},
                     {"early_stop_patience", c.early_stop_patience},
                     {"early_stop_metric", "validation_hybrid_loss"},
                     {"adam_beta1", c.adam_beta1},   {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},       {"seed", c.seed},
                     {"deterministic", c.deterministic}, {"folds", c.folds}};
}

/// initial_lr * decay_rate^epoch.
inline double lr_schedule(std::size_t epoch, const TrainConfig& config) {
  return config.initial_lr * std::pow(config.lr_decay_rate, static_cast<double>(epoch));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update over `params` using their accumulated gradients.
inline void adam_step(std::vector<NamedTensor>& params, AdamState& state, double lr, const TrainConfig& config) {
  if (state.m.empty()) {
    for (auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: optimizer state does not match parameter list");
  for (auto& p : params) {
    if (!p.tensor.has_grad()) throw Error("adam_step: missing gradient for '" + p.name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.adam_beta1, t);
  const double c2 = 1.0 - std::pow(config.adam_beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& values = params[k].tensor.data();
    const auto& g = params[k].tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = config.adam_beta1 * m[i] + (1.0 - config.adam_beta1) * g[i];
      v[i] = config.adam_beta2 * v[i] + (1.0 - config.adam_beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Folds

struct FoldPlan {
  std::vector<std::vector<std::string>> folds;
  std::uint64_t seed = 0;

  /// Index of the fold holding `id`, or nullopt.
  std::optional<std::size_t> fold_of(const std::string& id) const {
    for (std::size_t f = 0; f < folds.size(); ++f)
      for (const auto& x : folds[f])
        if (x == id) return f;
    return std::nullopt;
  }
};

/// Seeded Fisher-Yates shuffle, then round-robin assignment.
inline FoldPlan make_folds(std::vector<std::string> ids, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > ids.size()) {
    throw Error("make_folds: k=" + std::to_string(k) + " must be in [1, " + std::to_string(ids.size()) + "]");
  }
  Rng rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  FoldPlan plan;
  plan.seed = seed;
  plan.folds.resize(k);
  for (std::size_t i = 0; i < ids.size(); ++i) plan.folds[i % k].push_back(ids[i]);
  return plan;
}

// ---------------------------------------------------------------------------
// Training loop

/// One training volume: normalized axial slices and both ground-truth masks, each (Z,1,Y,X).
struct Sample {
  std::string id;
  Volume image;  // normalized
  Tensor input;
  Tensor anatomy;
  Tensor scar;

  static Sample from_volumes(std::string id, const Volume& raw_intensity, const Volume& anatomy_gt,
                             const Volume& scar_gt) {
    if (anatomy_gt.dims != raw_intensity.dims || scar_gt.dims != raw_intensity.dims) {
      throw Error("sample '" + id + "': label dims do not match the intensity volume");
    }
    Sample s;
    s.id = std::move(id);
    s.image = normalize(raw_intensity);
    s.input = s.image.as_axial_tensor();
    s.anatomy = anatomy_gt.as_axial_tensor();
    s.scar = scar_gt.as_axial_tensor();
    return s;
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double seconds = 0.0;
};

// Wall-clock time is left out so deterministic runs produce identical logs.
inline nlohmann::ordered_json to_json(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["train_loss"] = e.train_loss;
  j["val_loss"] = e.val_loss ? nlohmann::ordered_json(*e.val_loss) : nlohmann::ordered_json(nullptr);
  return j;
}

struct TrainHooks {
  /// Replaces the computed validation loss; used to exercise early stopping.
  std::function<double(std::size_t epoch, double computed)> validation_override;
  /// Called after every epoch with the log entry.
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // best checkpoint, last state, log
  bool resume = false;                           // continue from out_dir/last
  std::optional<std::size_t> stop_after_epoch;   // exclusive upper bound for this call
};

struct TrainResult {
  MvttParams best;
  MvttParams last;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

inline double hybrid_loss_value(const Sample& s, MvttParams& params) {
  NoGradGuard guard;
  auto r = forward(s.input, params);
  return hybrid_loss(r.anatomy_prob, s.anatomy, r.scar_prob, s.scar).item();
}

namespace detail {

struct TrainerProgress {
  std::size_t next_epoch = 0;
  std::optional<double> best_val;
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
};

inline void save_trainer_state(const std::filesystem::path& dir, const MvttParams& params, const AdamState& adam,
                               const TrainerProgress& progress) {
  save_checkpoint(params, dir);
  std::vector<double> flat;
  for (const auto& m : adam.m) flat.insert(flat.end(), m.begin(), m.end());
  for (const auto& v : adam.v) flat.insert(flat.end(), v.begin(), v.end());
  write_f64_blob(dir / "optimizer.f64", flat);
  nlohmann::ordered_json j;
  j["next_epoch"] = progress.next_epoch;
  j["adam_step"] = adam.step;
  j["best_val"] = progress.best_val ? nlohmann::ordered_json(*progress.best_val) : nlohmann::ordered_json(nullptr);
  j["best_epoch"] = progress.best_epoch;
  j["bad_epochs"] = progress.bad_epochs;
  std::ofstream out(dir / "trainer_state.json", std::ios::trunc);
  out << j.dump(2) << '\n';
}

inline void load_trainer_state(const std::filesystem::path& dir, MvttParams& params, AdamState& adam,
                               TrainerProgress& progress) {
  params = load_checkpoint(dir);
  nlohmann::json j;
  std::ifstream in(dir / "trainer_state.json");
  if (!in) throw Error("resume: missing trainer_state.json in " + dir.string());
  in >> j;
  progress.next_epoch = j.at("next_epoch").get<std::size_t>();
  adam.step = j.at("adam_step").get<std::uint64_t>();
  if (!j.at("best_val").is_null()) progress.best_val = j.at("best_val").get<double>();
  progress.best_epoch = j.at("best_epoch").get<std::size_t>();
  progress.bad_epochs = j.at("bad_epochs").get<std::size_t>();
  const auto flat = read_f64_blob(dir / "optimizer.f64");
  const auto names = params.parameters();
  std::size_t total = 0;
  for (const auto& p : names) total += p.tensor.numel();
  adam.m.clear();
  adam.v.clear();
  if (adam.step == 0) return;
  if (flat.size() != 2 * total) throw Error("resume: optimizer state size mismatch");
  std::size_t cursor = 0;
  for (const auto& p : names) {
    adam.m.emplace_back(flat.begin() + cursor, flat.begin() + cursor + p.tensor.numel());
    cursor += p.tensor.numel();
  }
  for (const auto& p : names) {
    adam.v.emplace_back(flat.begin() + cursor, flat.begin() + cursor + p.tensor.numel());
    cursor += p.tensor.numel();
  }
}

}  // namespace detail

/// Minimizes the hybrid Dice loss one whole volume per step. With a nonempty
/// validation set, stops once the validation loss has not improved for
/// `early_stop_patience` epochs and returns the best-validation parameters.
inline TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const TrainConfig& config, const MvttConfig& model_config, const TrainOptions& options = {},
                         const TrainHooks& hooks = {}) {
  config.validate();
  if (train_set.empty()) throw Error("train: need at least one training volume");
  if (config.deterministic) set_deterministic(true);

  MvttParams params = MvttParams::initialized(model_config, config.seed);
  AdamState adam;
  detail::TrainerProgress progress;
  std::ofstream log_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    if (options.resume) {
      detail::load_trainer_state(*options.out_dir / "last", params, adam, progress);
      log_file.open(*options.out_dir / "train_log.jsonl", std::ios::app);
    } else {
      log_file.open(*options.out_dir / "train_log.jsonl", std::ios::trunc);
    }
  }

  TrainResult result;
  result.best = params.clone();
  if (options.resume && options.out_dir && std::filesystem::exists(*options.out_dir / "checkpoint")) {
    result.best = load_checkpoint(*options.out_dir / "checkpoint");
  }
  result.best_epoch = progress.best_epoch;
  const std::size_t end_epoch =
      options.stop_after_epoch ? std::min(config.max_epochs, *options.stop_after_epoch) : config.max_epochs;

  for (std::size_t epoch = progress.next_epoch; epoch < end_epoch; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, config);

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(config.seed ^ (0xD1B54A32D192ED03ull * (epoch + 1)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double total = 0.0;
    auto trainable = params.parameters();
    for (std::size_t idx : order) {
      const Sample& s = train_set[idx];
      params.set_mode(NormMode::train);
      params.zero_grad();
      auto r = forward(s.input, params);
      Tensor loss = hybrid_loss(r.anatomy_prob, s.anatomy, r.scar_prob, s.scar);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + " on volume '" + s.id + "'");
      }
      backward(loss);
      adam_step(trainable, adam, lr, config);
      params.quantize_state();
      total += value;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.train_loss = total / static_cast<double>(train_set.size());
    if (!val_set.empty()) {
      params.set_mode(NormMode::eval);
      double v = 0.0;
      for (const auto& s : val_set) v += hybrid_loss_value(s, params);
      v /= static_cast<double>(val_set.size());
      if (hooks.validation_override) v = hooks.validation_override(epoch, v);
      if (!std::isfinite(v)) throw Error("train: non-finite validation loss at epoch " + std::to_string(epoch));
      entry.val_loss = v;
    }
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(entry);
    if (log_file.is_open()) log_file << to_json(entry).dump() << '\n' << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(entry);

    bool improved = true;
    if (entry.val_loss) {
      improved = !progress.best_val || *entry.val_loss < *progress.best_val;
      if (improved) {
        progress.best_val = entry.val_loss;
        progress.bad_epochs = 0;
      } else {
        ++progress.bad_epochs;
      }
    }
    if (improved) {
      result.best = params.clone();
      result.best_epoch = epoch;
      progress.best_epoch = epoch;
      if (options.out_dir) save_checkpoint(result.best, *options.out_dir / "checkpoint");
    }
    progress.next_epoch = epoch + 1;
    if (options.out_dir) detail::save_trainer_state(*options.out_dir / "last", params, adam, progress);
    if (entry.val_loss && progress.bad_epochs >= config.early_stop_patience) {
      result.stopped_early = true;
      break;
    }
  }
  result.best.set_mode(NormMode::eval);
  result.last = std::move(params);
  return result;
}

}  // namespace mvtt
