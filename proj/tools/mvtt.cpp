// mvtt command-line tool: phantom | train | infer | eval | gradcheck | export-slices

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mvtt/checkpoint.hpp"
#include "mvtt/gradcheck_suite.hpp"
#include "mvtt/metrics.hpp"
#include "mvtt/model.hpp"
#include "mvtt/parallel.hpp"
#include "mvtt/phantom.hpp"
#include "mvtt/trainer.hpp"
#include "mvtt/volume.hpp"

#ifndef MVTT_VERSION
#define MVTT_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

const std::vector<std::string> kCommands{"phantom", "train", "infer", "eval", "gradcheck", "export-slices"};

template <typename T, std::size_t N>
std::array<T, N> parse_triple(const std::string& text, const char* what) {
  std::array<T, N> out{};
  std::stringstream ss(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, 'x')) {
    if (i == N) throw mvtt::Error(std::string(what) + ": expected " + std::to_string(N) + " values in '" + text + "'");
    try {
      std::size_t used = 0;
      if constexpr (std::is_integral_v<T>) {
        const long long v = std::stoll(part, &used);
        if (v < 1) throw mvtt::Error(std::string(what) + ": values must be >= 1");
        out[i] = static_cast<T>(v);
      } else {
        out[i] = std::stod(part, &used);
      }
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::logic_error&) {
      throw mvtt::Error(std::string(what) + ": cannot parse '" + text + "'");
    }
    ++i;
  }
  if (i != N) throw mvtt::Error(std::string(what) + ": expected " + std::to_string(N) + " values in '" + text + "'");
  return out;
}

std::string case_name(std::size_t i) {
  std::ostringstream os;
  os << "case_" << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_derived_stem(const std::string& stem) {
  for (const char* suffix : {"_anatomy", "_scar", "_anatomy_prob", "_scar_prob"})
    if (has_suffix(stem, suffix)) return true;
  return false;
}

/// Case ids in a directory: every volume header that is not a label or probability companion.
std::vector<std::string> case_ids(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw mvtt::Error("data directory " + dir.string() + " does not exist");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".vjson") continue;
    const auto stem = entry.path().stem().string();
    if (!is_derived_stem(stem)) ids.push_back(stem);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<mvtt::Sample> load_dataset(const fs::path& dir) {
  const auto ids = case_ids(dir);
  if (ids.empty()) throw mvtt::Error("no volumes found in " + dir.string());
  std::vector<mvtt::Sample> out;
  for (const auto& id : ids) {
    auto image = mvtt::read_volume(dir / (id + ".vjson"));
    auto anatomy = mvtt::read_volume(dir / (id + "_anatomy.vjson"));
    auto scar = mvtt::read_volume(dir / (id + "_scar.vjson"));
    if (image.kind != mvtt::VolumeKind::intensity) throw mvtt::Error(id + ": expected an intensity volume");
    out.push_back(mvtt::Sample::from_volumes(id, image, anatomy, scar));
    if (out.back().image.dims != out.front().image.dims) {
      throw mvtt::Error("dataset volumes differ in dims: " + mvtt::dims_string(out.front().image.dims) + " vs " +
                        mvtt::dims_string(out.back().image.dims));
    }
  }
  return out;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const mvtt::SegmentationMetrics& m) {
  return {{"ac", optional_number(m.accuracy)},
          {"se", optional_number(m.sensitivity)},
          {"sp", optional_number(m.specificity)},
          {"di", optional_number(m.dice)}};
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw mvtt::Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw mvtt::Error("failed writing " + path.string());
}

/// Resolved option values of a subcommand, keyed by long flag name.
json resolved_config(const CLI::App& app, const CLI::App& sub) {
  json config = json::object();
  for (const CLI::App* a : {&app, &sub}) {
    for (const CLI::Option* opt : a->get_options()) {
      const std::string name = opt->get_single_name();
      if (name.empty() || name == "help" || name == "config") continue;
      if (opt->get_expected_min() == 0) {
        config[name] = opt->count() > 0;
      } else if (opt->count() > 0) {
        const auto values = opt->results();
        if (opt->get_expected_max() > 1) {
          config[name] = values;
        } else {
          config[name] = values.back();
        }
      } else if (!opt->get_default_str().empty()) {
        config[name] = opt->get_default_str();
      }
    }
  }
  return config;
}

struct Run {
  const CLI::App* app;
  const CLI::App* sub;
  Clock::time_point started = Clock::now();
  json seed = nullptr;
  std::vector<std::string> artifacts;
  json extra = json::object();

  void finish(const fs::path& dir) {
    json m;
    m["command"] = sub->get_name();
    m["config"] = resolved_config(*app, *sub);
    m["seed"] = seed;
    m["artifacts"] = artifacts;
    m["tool_version"] = MVTT_VERSION;
    for (auto& [k, v] : extra.items()) m[k] = v;
    m["seconds"] = std::chrono::duration<double>(Clock::now() - started).count();
    write_json(dir / "run_manifest.json", m);
  }
};

// ---------------------------------------------------------------------------
// Argument preprocessing: `--config file.json` supplies flags that the command
// line may override, and bare `key=value` tokens mean `--key=value`.

std::vector<std::string> config_tokens(const fs::path& path, std::string* command) {
  std::ifstream in(path);
  if (!in) throw mvtt::Error("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw mvtt::Error("config file " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw mvtt::Error("config file " + path.string() + ": expected a JSON object");
  // A run manifest replays its own resolved configuration.
  if (j.contains("config") && j["config"].is_object()) {
    if (j.contains("command") && j["command"].is_string()) *command = j["command"].get<std::string>();
    j = j["config"];
  }
  std::vector<std::string> tokens;
  for (auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      if (value.get<bool>()) tokens.push_back(flag);
    } else if (value.is_string()) {
      tokens.push_back(flag + "=" + value.get<std::string>());
    } else if (value.is_number()) {
      tokens.push_back(flag + "=" + value.dump());
    } else if (value.is_array()) {
      for (const auto& item : value) {
        tokens.push_back(flag);
        tokens.push_back(item.is_string() ? item.get<std::string>() : item.dump());
      }
    } else if (!value.is_null()) {
      throw mvtt::Error("config file " + path.string() + ": unsupported value for '" + key + "'");
    }
  }
  return tokens;
}

std::vector<std::string> preprocess(int argc, char** argv) {
  std::vector<std::string> args;
  std::optional<std::string> config_path;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--config") {
      if (i + 1 >= argc) throw mvtt::Error("--config needs a file argument");
      config_path = argv[++i];
      continue;
    }
    if (a.rfind("--config=", 0) == 0) {
      config_path = a.substr(9);
      continue;
    }
    const auto eq = a.find('=');
    if (a.rfind("-", 0) != 0 && eq != std::string::npos && eq > 0) a = "--" + a;
    args.push_back(a);
  }
  if (!config_path) return args;
  std::string command;
  auto extra = config_tokens(*config_path, &command);
  auto pos = std::find_if(args.begin(), args.end(), [](const std::string& a) {
    return std::find(kCommands.begin(), kCommands.end(), a) != kCommands.end();
  });
  if (pos == args.end()) {
    if (command.empty()) throw mvtt::Error("no subcommand given");
    args.insert(args.begin(), command);
    pos = args.begin();
  }
  args.insert(pos + 1, extra.begin(), extra.end());
  return args;
}

// ---------------------------------------------------------------------------
// Commands

struct PhantomArgs {
  std::size_t count = 4;
  std::string dims = "16x32x32";
  std::string spacing = "2x1x1";
  std::uint64_t seed = 0;
  std::string out = "phantoms";
  std::size_t scar_patches = 3;
  std::size_t pv_stubs = 2;
  double angle_min = mvtt::PhantomSpec{}.scar_half_angle_min;
  double angle_max = mvtt::PhantomSpec{}.scar_half_angle_max;
  double noise_sd = mvtt::PhantomSpec{}.noise_sd;
};

int cmd_phantom(const PhantomArgs& a, Run& run) {
  auto base = mvtt::PhantomSpec::for_grid(parse_triple<std::size_t, 3>(a.dims, "--dims"),
                                          parse_triple<double, 3>(a.spacing, "--spacing"));
  base.scar_patch_count = a.scar_patches;
  base.pv_stub_count = a.pv_stubs;
  base.scar_half_angle_min = a.angle_min;
  base.scar_half_angle_max = a.angle_max;
  base.noise_sd = a.noise_sd;
  base.validate();
  if (a.count == 0) throw mvtt::Error("--count must be >= 1");
  const fs::path out(a.out);
  fs::create_directories(out);
  json cases = json::array();
  for (std::size_t i = 0; i < a.count; ++i) {
    const std::uint64_t case_seed = a.seed * 1000003ull + i;
    const auto spec = base.variant(case_seed);
    const auto p = mvtt::generate_phantom(spec);
    const auto id = case_name(i);
    mvtt::write_volume(p.intensity, out / id);
    mvtt::write_volume(p.anatomy, out / (id + "_anatomy"));
    mvtt::write_volume(p.scar, out / (id + "_scar"));
    for (const auto& stem : {id, id + "_anatomy", id + "_scar"}) run.artifacts.push_back((out / (stem + ".vjson")).string());
    cases.push_back({{"id", id}, {"case_seed", case_seed}, {"scar_fraction", p.scar_fraction},
                     {"scar_burden_pct", 100.0 * p.scar_fraction}});
    std::cout << id << "  scar burden " << 100.0 * p.scar_fraction << " %\n";
  }
  write_json(out / "phantoms.json", {{"cases", cases}});
  run.artifacts.push_back((out / "phantoms.json").string());
  run.seed = a.seed;
  run.finish(out);
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string val;
  std::string out = "run";
  std::size_t epochs = 100;
  double lr = 0.001;
  double lr_decay = 0.98;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  double width = 1.0;
  std::size_t base_channels = 16;
  std::size_t blocks = 2;
  double threshold = 0.5;
  bool resume = false;
};

int cmd_train(const TrainArgs& a, bool deterministic, Run& run) {
  const auto train_set = load_dataset(a.data);
  std::vector<mvtt::Sample> val_set;
  if (!a.val.empty()) val_set = load_dataset(a.val);

  mvtt::TrainConfig tc;
  tc.max_epochs = a.epochs;
  tc.initial_lr = a.lr;
  tc.lr_decay_rate = a.lr_decay;
  tc.early_stop_patience = a.patience;
  tc.seed = a.seed;
  tc.deterministic = deterministic;
  tc.validate();
  mvtt::MvttConfig mc;
  mc.width_multiplier = a.width;
  mc.base_channels = a.base_channels;
  mc.residual_blocks_per_branch = a.blocks;
  mc.threshold = a.threshold;
  mc.slice_height = train_set.front().image.dims[1];
  mc.slice_width = train_set.front().image.dims[2];
  mc.validate();
  for (const auto& s : val_set)
    if (s.image.dims[1] != mc.slice_height || s.image.dims[2] != mc.slice_width)
      throw mvtt::Error("validation volume '" + s.id + "' has a different slice size than the training data");

  mvtt::TrainHooks hooks;
  hooks.on_epoch = [](const mvtt::EpochLog& e) {
    std::cout << "epoch " << e.epoch << "  lr " << e.lr << "  train " << e.train_loss;
    if (e.val_loss) std::cout << "  val " << *e.val_loss;
    std::cout << "  (" << e.seconds << " s)" << std::endl;
  };
  const fs::path out(a.out);
  auto result = mvtt::train(train_set, val_set, tc, mc, {out, a.resume, std::nullopt}, hooks);
  run.seed = a.seed;
  run.artifacts = {(out / "checkpoint").string(), (out / "last").string(), (out / "train_log.jsonl").string()};
  run.extra["train_config"] = tc;
  run.extra["model_config"] = mc;
  run.extra["best_epoch"] = result.best_epoch;
  run.extra["stopped_early"] = result.stopped_early;
  run.finish(out);
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::vector<std::string> inputs;
  std::string data;
  std::string out = "pred";
};

int cmd_infer(const InferArgs& a, Run& run) {
  auto params = mvtt::load_checkpoint(a.checkpoint);
  std::vector<std::pair<std::string, fs::path>> cases;
  for (const auto& in : a.inputs) cases.emplace_back(fs::path(in).stem().string(), fs::path(in));
  if (!a.data.empty())
    for (const auto& id : case_ids(a.data)) cases.emplace_back(id, fs::path(a.data) / (id + ".vjson"));
  if (cases.empty()) throw mvtt::Error("infer: give --input files or a --data directory");
  const fs::path out(a.out);
  fs::create_directories(out);
  json timing = json::array();
  for (const auto& [id, path] : cases) {
    const auto volume = mvtt::read_volume(path);
    if (volume.kind != mvtt::VolumeKind::intensity) throw mvtt::Error(path.string() + ": expected an intensity volume");
    const auto t0 = Clock::now();
    const auto seg = mvtt::infer(mvtt::normalize(volume), params);
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    const std::pair<const mvtt::Volume*, std::string> outputs[] = {{&seg.anatomy_prob, "_anatomy_prob"},
                                                                   {&seg.scar_prob, "_scar_prob"},
                                                                   {&seg.anatomy_mask, "_anatomy"},
                                                                   {&seg.scar_mask, "_scar"}};
    for (const auto& [v, suffix] : outputs) {
      mvtt::write_volume(*v, out / (id + suffix));
      run.artifacts.push_back((out / (id + suffix + ".vjson")).string());
    }
    timing.push_back({{"id", id}, {"dims", volume.dims}, {"seconds", seconds}});
    std::cout << id << "  " << mvtt::dims_string(volume.dims) << "  " << seconds << " s\n";
  }
  run.extra["per_case_seconds"] = timing;
  run.finish(out);
  return 0;
}

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string out = "report.json";
};

int cmd_eval(const EvalArgs& a, Run& run) {
  const auto ids = case_ids(a.gt);
  if (ids.empty()) throw mvtt::Error("eval: no ground-truth volumes in " + a.gt);
  json records = json::array();
  std::vector<std::optional<double>> dice[2][4];
  std::vector<double> truth_burden, pred_burden;
  std::vector<std::optional<double>> burden_summary;
  for (const auto& id : ids) {
    const auto gt_anatomy = mvtt::read_volume(fs::path(a.gt) / (id + "_anatomy.vjson"));
    const auto gt_scar = mvtt::read_volume(fs::path(a.gt) / (id + "_scar.vjson"));
    const auto pr_anatomy = mvtt::read_volume(fs::path(a.pred) / (id + "_anatomy.vjson"));
    const auto pr_scar = mvtt::read_volume(fs::path(a.pred) / (id + "_scar.vjson"));
    const auto ma = mvtt::metrics(mvtt::confusion(pr_anatomy, gt_anatomy));
    const auto ms = mvtt::metrics(mvtt::confusion(pr_scar, gt_scar));
    int k = 0;
    for (const auto& m : {ma, ms}) {
      dice[k][0].push_back(m.accuracy);
      dice[k][1].push_back(m.sensitivity);
      dice[k][2].push_back(m.specificity);
      dice[k][3].push_back(m.dice);
      ++k;
    }
    std::optional<double> burden, burden_gt;
    try {
      burden = mvtt::scar_burden(pr_scar, pr_anatomy).percentage;
    } catch (const mvtt::Error&) {
    }
    try {
      burden_gt = mvtt::scar_burden(gt_scar, gt_anatomy).percentage;
    } catch (const mvtt::Error&) {
    }
    if (burden && burden_gt) {
      pred_burden.push_back(*burden);
      truth_burden.push_back(*burden_gt);
    }
    burden_summary.push_back(burden);
    records.push_back({{"id", id},
                       {"anatomy", metrics_json(ma)},
                       {"scar", metrics_json(ms)},
                       {"scar_burden_pct", optional_number(burden)},
                       {"scar_burden_pct_gt", optional_number(burden_gt)}});
  }
  auto block = [&](std::size_t task) {
    json means, sds;
    const char* keys[] = {"ac", "se", "sp", "di"};
    for (std::size_t m = 0; m < 4; ++m) {
      const auto s = mvtt::summarize(dice[task][m]);
      means[keys[m]] = optional_number(s.mean);
      sds[keys[m]] = optional_number(s.sd);
    }
    return std::make_pair(means, sds);
  };
  json aggregate;
  const auto [anat_mean, anat_sd] = block(0);
  const auto [scar_mean, scar_sd] = block(1);
  const auto burden_stats = mvtt::summarize(burden_summary);
  aggregate["count"] = ids.size();
  aggregate["means"] = {{"anatomy", anat_mean}, {"scar", scar_mean}, {"scar_burden_pct", optional_number(burden_stats.mean)}};
  aggregate["sds"] = {{"anatomy", anat_sd}, {"scar", scar_sd}, {"scar_burden_pct", optional_number(burden_stats.sd)}};
  aggregate["pearson"] = nullptr;
  aggregate["bland_altman"] = nullptr;
  if (truth_burden.size() >= 2) {
    try {
      aggregate["pearson"] = mvtt::pearson(truth_burden, pred_burden);
    } catch (const mvtt::Error&) {
    }
    const auto ba = mvtt::bland_altman(truth_burden, pred_burden);
    aggregate["bland_altman"] = {{"bias", ba.bias}, {"sd", ba.sd}, {"loa_low", ba.loa_low}, {"loa_high", ba.loa_high}};
  }
  const fs::path out(a.out);
  write_json(out, {{"volumes", records}, {"aggregate", aggregate}});
  std::cout << aggregate.dump(2) << '\n';
  run.artifacts.push_back(out.string());
  run.finish(out.has_parent_path() ? out.parent_path() : fs::path("."));
  return 0;
}

struct GradcheckArgs {
  std::uint64_t seed = 2024;
  std::string fault;
  std::string out = "gradcheck";
};

int cmd_gradcheck(const GradcheckArgs& a, Run& run) {
  if (!a.fault.empty()) {
    if (a.fault != "conv-grad") throw mvtt::Error("unknown fault '" + a.fault + "' (known: conv-grad)");
    mvtt::detail::conv_weight_grad_fault() = 1.01;
  }
  const auto checks = mvtt::run_gradcheck_suite(a.seed);
  json report = json::array();
  std::vector<std::string> failed;
  for (const auto& c : checks) {
    const bool ok = c.result.passed(mvtt::kGradcheckTolerance);
    std::cout << std::left << std::setw(24) << c.name << std::scientific << std::setprecision(3)
              << c.result.max_relative_error() << "  " << (ok ? "ok" : "FAIL") << std::defaultfloat << '\n';
    json tensors = json::array();
    for (const auto& e : c.result.entries)
      tensors.push_back({{"name", e.name}, {"elements", e.elements}, {"max_abs_error", e.max_abs_error},
                         {"max_relative_error", e.max_relative_error}});
    report.push_back({{"check", c.name}, {"max_relative_error", c.result.max_relative_error()}, {"passed", ok},
                      {"tensors", tensors}});
    if (!ok) failed.push_back(c.name);
  }
  const fs::path out(a.out);
  write_json(out / "gradcheck_report.json", {{"tolerance", mvtt::kGradcheckTolerance}, {"checks", report}});
  run.seed = a.seed;
  run.artifacts.push_back((out / "gradcheck_report.json").string());
  run.extra["passed"] = failed.empty();
  run.finish(out);
  if (!failed.empty()) {
    std::cerr << "gradcheck failed:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << '\n';
    return 1;
  }
  std::cout << "all " << checks.size() << " checks passed\n";
  return 0;
}

struct ExportArgs {
  std::string input;
  std::string out;
};

int cmd_export(const ExportArgs& a, Run& run) {
  const auto v = mvtt::read_volume(a.input);
  const auto [lo_it, hi_it] = std::minmax_element(v.values.begin(), v.values.end());
  const double lo = *lo_it, hi = *hi_it;
  const fs::path out(a.out);
  fs::create_directories(out);
  const std::size_t plane = v.dims[1] * v.dims[2];
  const int digits = std::max<int>(3, static_cast<int>(std::to_string(v.dims[0] - 1).size()));
  for (std::size_t z = 0; z < v.dims[0]; ++z) {
    std::ostringstream name;
    name << "slice_" << std::setw(digits) << std::setfill('0') << z << ".pgm";
    std::ofstream f(out / name.str(), std::ios::binary | std::ios::trunc);
    if (!f) throw mvtt::Error("cannot write " + (out / name.str()).string());
    f << "P5\n" << v.dims[2] << ' ' << v.dims[1] << "\n255\n";
    for (std::size_t i = 0; i < plane; ++i) {
      const double x = v.values[z * plane + i];
      const int pixel = hi == lo ? 128 : static_cast<int>(std::lround(255.0 * (x - lo) / (hi - lo)));
      f.put(static_cast<char>(static_cast<unsigned char>(pixel)));
    }
    if (!f) throw mvtt::Error("failed writing " + (out / name.str()).string());
    run.artifacts.push_back((out / name.str()).string());
  }
  run.extra["window"] = {{"min", lo}, {"max", hi}};
  run.finish(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiview two-task LA anatomy and scar segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.set_version_flag("--version", MVTT_VERSION);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "Single-threaded, fixed reduction order");
  std::string config_unused;
  app.add_option("--config", config_unused, "JSON file supplying any flag (command line wins)");

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate synthetic phantoms with ground truth");
  phantom->add_option("--count", pa.count, "Number of phantoms");
  phantom->add_option("--dims", pa.dims, "Grid as ZxYxX");
  phantom->add_option("--spacing", pa.spacing, "Voxel spacing in mm as ZxYxX");
  phantom->add_option("--seed", pa.seed, "Generator seed");
  phantom->add_option("--out", pa.out, "Output directory");
  phantom->add_option("--scar-patches", pa.scar_patches, "Scar patches per phantom");
  phantom->add_option("--pv-stubs", pa.pv_stubs, "Vein stubs per phantom");
  phantom->add_option("--scar-angle-min", pa.angle_min, "Smallest patch half-angle (rad)");
  phantom->add_option("--scar-angle-max", pa.angle_max, "Largest patch half-angle (rad)");
  phantom->add_option("--noise-sd", pa.noise_sd, "Voxel noise standard deviation");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train on a phantom directory");
  train->add_option("--data", ta.data, "Training volumes")->required();
  train->add_option("--val", ta.val, "Validation volumes (enables early stopping)");
  train->add_option("--out", ta.out, "Run directory");
  train->add_option("--epochs", ta.epochs, "Maximum epochs");
  train->add_option("--lr", ta.lr, "Initial learning rate");
  train->add_option("--lr-decay", ta.lr_decay, "Per-epoch decay factor");
  train->add_option("--patience", ta.patience, "Early-stopping patience");
  train->add_option("--seed", ta.seed, "Initialization and shuffle seed");
  train->add_option("--width", ta.width, "Channel width multiplier");
  train->add_option("--base-channels", ta.base_channels, "Channels before the multiplier");
  train->add_option("--blocks", ta.blocks, "Residual HDC blocks per view branch");
  train->add_option("--threshold", ta.threshold, "Binarization threshold");
  train->add_flag("--resume", ta.resume, "Continue from <out>/last");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Segment volumes with a checkpoint");
  infer->add_option("--checkpoint", ia.checkpoint, "Checkpoint directory")->required();
  infer->add_option("--input", ia.inputs, "Intensity volume(s)")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  infer->add_option("--data", ia.data, "Directory of intensity volumes");
  infer->add_option("--out", ia.out, "Output directory");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  eval->add_option("--pred", ea.pred, "Prediction directory")->required();
  eval->add_option("--gt", ea.gt, "Ground-truth directory")->required();
  eval->add_option("--out", ea.out, "Report path");

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_option("--seed", ga.seed, "Seed for random instances");
  grad->add_option("--inject-fault", ga.fault, "Deliberately corrupt a gradient (conv-grad)");
  grad->add_option("--out", ga.out, "Report directory");

  ExportArgs xa;
  auto* exp = app.add_subcommand("export-slices", "Write axial slices as PGM images");
  exp->add_option("--input", xa.input, "Volume to export")->required();
  exp->add_option("--out", xa.out, "Output directory")->required();

  try {
    auto args = preprocess(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  if (deterministic) mvtt::set_deterministic(true);
  try {
    CLI::App* sub = app.get_subcommands().front();
    Run run{&app, sub};
    if (sub == phantom) return cmd_phantom(pa, run);
    if (sub == train) return cmd_train(ta, deterministic, run);
    if (sub == infer) return cmd_infer(ia, run);
    if (sub == eval) return cmd_eval(ea, run);
    if (sub == grad) return cmd_gradcheck(ga, run);
    if (sub == exp) return cmd_export(xa, run);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
