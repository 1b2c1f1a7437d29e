// End-to-end acceptance run: one PASS/FAIL line per criterion.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvtt/checkpoint.hpp"
#include "mvtt/gradcheck_suite.hpp"
#include "mvtt/metrics.hpp"
#include "mvtt/model.hpp"
#include "mvtt/phantom.hpp"
#include "mvtt/trainer.hpp"
#include "oracles.hpp"

using namespace mvtt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Phantom overfit regime shared by criteria 5, 6 and 9.
constexpr std::size_t kOverfitEpochs = 300;
constexpr double kOverfitLr = 0.005;
constexpr double kOverfitDecay = 0.99;
constexpr double kOverfitWidth = 0.25;  // C = 4
constexpr std::uint64_t kTrainSeed = 7;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Report {
  int failures = 0;
  void line(int id, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
    failures += !ok;
  }
};

// Runs a criterion body, turning an exception into a failure line.
void criterion(Report& r, int id, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    const auto [ok, detail] = body();
    r.line(id, ok, detail);
  } catch (const std::exception& e) {
    r.line(id, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "mvtt_acceptance" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

#ifdef MVTT_TOOL_PATH
int tool(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + MVTT_TOOL_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Compares every file under two trees except the run manifests, which carry wall-clock time.
bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files, std::string& diff) {
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    const auto rel = fs::relative(e.path(), a);
    ++files;
    if (!fs::exists(b / rel) || read_bytes(e.path()) != read_bytes(b / rel)) {
      diff = rel.string();
      return false;
    }
  }
  return files > 0;
}
#endif

// -- criterion 1 -------------------------------------------------------------

std::pair<bool, std::string> gradcheck_suite() {
  const auto t0 = Clock::now();
  const auto checks = run_gradcheck_suite();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string failed;
  for (const auto& c : checks) {
    worst = std::max(worst, c.result.max_relative_error());
    if (!c.result.passed(kGradcheckTolerance)) failed += " " + c.name;
  }
  const bool ok = failed.empty() && secs < 120.0;
  return {ok, std::to_string(checks.size()) + " checks, max rel err " + fmt(worst) + ", " + fmt(secs) + " s" +
                  (failed.empty() ? "" : ", failed:" + failed)};
}

// -- criterion 2 -------------------------------------------------------------

std::pair<bool, std::string> identities() {
  Rng rng(42);
  std::string problems;
  // Fusion: zero-branch identity and additivity, bitwise.
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t Z = 2 + rng.below(4), C = 1 + rng.below(3), Y = 2 + rng.below(5), X = 2 + rng.below(5);
    auto fa = oracle::dyadic_tensor({Z, C, Y, X}, rng);
    auto fs_ = oracle::dyadic_tensor({X, C, Y, Z}, rng);
    auto fc = oracle::dyadic_tensor({Y, C, X, Z}, rng);
    auto delta = oracle::dyadic_tensor({Z, C, Y, X}, rng);
    if (fuse(fa, Tensor({X, C, Y, Z}), Tensor({Y, C, X, Z})).data() != fa.data()) problems = " fuse-identity";
    if (fuse(add(fa, delta), fs_, fc).data() != add(fuse(fa, fs_, fc), delta).data()) problems += " fuse-additivity";
  }

  // Attention mask strictly inside (0,1), including with saturating weights.
  MvttConfig cfg;
  cfg.width_multiplier = 0.125;
  cfg.slice_height = 6;
  cfg.slice_width = 6;
  auto params = MvttParams::initialized(cfg, 3);
  const auto base_project = params.theta_am.project.weight.data();
  std::size_t bound_instances = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double scale = trial % 10 == 0 ? 1e4 : rng.uniform(0.1, 20.0);
    auto& w = params.theta_am.project.weight.data();
    for (std::size_t i = 0; i < base_project.size(); ++i) w[i] = base_project[i] * scale;
    auto x = oracle::random_tensor({3, 1, 6, 6}, rng, -2, 2);
    auto fv = oracle::random_tensor({3, cfg.channels(), 6, 6}, rng, 0.0, 5.0);
    auto out = attention_apply(x, fv, params.theta_am);
    for (double a : out.mask.data())
      if (!(a > 0.0 && a < 1.0)) {
        problems += " mask-range";
        break;
      }
    for (std::size_t i = 0; i < fv.numel(); ++i)
      if (!(fv[i] <= out.enhanced[i] && out.enhanced[i] <= 2.0 * fv[i])) {
        problems += " gate-bound";
        break;
      }
    ++bound_instances;
  }

  // Hybrid loss range and extreme cases.
  double lo = 1e300, hi = -1e300;
  for (int trial = 0; trial < 200; ++trial) {
    const Shape s{2, 1, 4, 4};
    auto pl = oracle::random_tensor(s, rng, 1e-6, 1 - 1e-6), ps = oracle::random_tensor(s, rng, 1e-6, 1 - 1e-6);
    Tensor gl(s), gs(s);
    for (double& v : gl.data()) v = rng.uniform() < 0.5;
    for (double& v : gs.data()) v = rng.uniform() < 0.2;
    const double l = hybrid_loss(pl, gl, ps, gs).item();
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  if (lo < 0.0 || hi > 2.0) problems += " loss-range";
  const Shape s{3, 1, 5, 5};
  Tensor gl(s), gs(s);
  for (double& v : gl.data()) v = rng.uniform() < 0.5;
  for (std::size_t i = 0; i < gs.numel(); ++i) gs.data()[i] = gl[i] * (rng.uniform() < 0.3);
  Tensor not_gs(s);
  for (std::size_t i = 0; i < gs.numel(); ++i) not_gs.data()[i] = 1.0 - gs[i];
  const double perfect = hybrid_loss(gl, gl, gs, gs).item();
  const double disjoint = hybrid_loss(gl, gl, not_gs, gs).item();
  if (!(perfect < 1e-5)) problems += " perfect-loss";
  if (!(std::abs(disjoint - 1.0) < 1e-5)) problems += " disjoint-loss";

  return {problems.empty(), "fusion bitwise; " + std::to_string(bound_instances) +
                                " attention instances in bounds; loss range [" + fmt(lo) + ", " + fmt(hi) +
                                "], perfect " + fmt(perfect) + ", disjoint " + fmt(disjoint) + problems};
}

// -- criterion 3 -------------------------------------------------------------

std::pair<bool, std::string> convlstm_forms() {
  std::string problems;
  Rng rng(17);
  {
    auto p = ConvLstmParams::zeros(2, 3, 3, 4, 5);
    auto t = convlstm_step_traced(oracle::random_tensor({1, 2, 4, 5}, rng, -5, 5), ConvLstmState::zeros(3, 4, 5), p);
    for (const Tensor* g : {&t.forget, &t.input, &t.output})
      for (double v : g->data())
        if (v != 0.5) problems = " zero-gates";
    for (const Tensor* g : {&t.state.c, &t.state.h})
      for (double v : g->data())
        if (v != 0.0) problems += " zero-state";
  }
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    auto p = ConvLstmParams::zeros(1, 1, 1, 1, 1);
    for (auto& [name, t] : p.named(""))
      for (double& v : t.data()) v = rng.uniform(-1.5, 1.5);
    oracle::ScalarLstm s{p.w_xf[0], p.w_hf[0], p.w_cf[0], p.b_f[0], p.w_xi[0], p.w_hi[0], p.w_ci[0], p.b_i[0],
                         p.w_xc[0], p.w_hc[0], p.b_c[0],  p.w_xo[0], p.w_ho[0], p.w_co[0], p.b_o[0]};
    const double x = rng.uniform(-2, 2), h0 = rng.uniform(0, 1), c0 = rng.uniform(0, 2);
    auto t = convlstm_step_traced(Tensor({1, 1, 1, 1}, x), {Tensor({1, 1, 1, 1}, h0), Tensor({1, 1, 1, 1}, c0)}, p);
    const auto e = s.step(x, h0, c0);
    for (auto [a, b] : {std::pair{t.forget.item(), e.f}, {t.input.item(), e.i}, {t.output.item(), e.o},
                        {t.state.c.item(), e.c}, {t.state.h.item(), e.h}})
      worst = std::max(worst, std::abs(a - b));
  }
  if (worst > 1e-12) problems += " scalar-oracle";
  std::size_t steps = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto p = ConvLstmParams::zeros(2, 2, 3, 3, 4);
    for (auto& [name, t] : p.named(""))
      for (double& v : t.data()) v = rng.uniform(-1, 1);
    ConvLstmState state{Tensor({1, 2, 3, 4}), oracle::random_tensor({1, 2, 3, 4}, rng, 0, 3)};
    for (int k = 0; k < 10; ++k, ++steps) {
      state = convlstm_step(oracle::random_tensor({1, 2, 3, 4}, rng, -4, 4), state, p);
      for (const Tensor* g : {&state.c, &state.h})
        for (double v : g->data())
          if (v < 0.0) problems += " positivity";
    }
  }
  return {problems.empty(), "zero-parameter closed form exact; scalar max err " + fmt(worst) + "; " +
                                std::to_string(steps) + " random steps nonnegative" + problems};
}

// -- criterion 4 -------------------------------------------------------------

std::pair<bool, std::string> oracle_equivalence() {
  std::string problems;
  Rng rng(99);
  double conv_err = 0.0;
  std::size_t conv_cases = 0;
  for (std::size_t d : {1u, 2u, 5u})
    for (auto pad : {Padding::same, Padding::valid})
      for (std::size_t k : {1u, 2u, 3u}) {
        auto spec = ConvSpec::square(k, 2, 3, d, pad);
        const std::size_t size = 2 * d * k + 3;
        auto x = oracle::random_tensor({2, 2, size, size + 1}, rng);
        auto w = oracle::random_tensor(spec.weight_shape(), rng);
        auto b = oracle::random_tensor({3}, rng);
        std::size_t oh = 0, ow = 0;
        const auto expected = oracle::conv2d(x, w, b.data(), spec, oh, ow);
        const auto got = conv2d(x, w, b, spec);
        if (got.dim(2) != oh || got.dim(3) != ow) problems += " conv-shape";
        for (std::size_t i = 0; i < expected.size(); ++i) conv_err = std::max(conv_err, std::abs(got[i] - expected[i]));
        ++conv_cases;
      }
  if (conv_err > 1e-12) problems += " conv-value";

  std::size_t pairs = 0;
  for (int trial = 0; trial < 100; ++trial, ++pairs) {
    const std::array<std::size_t, 3> dims{1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(16)};
    Volume p(dims, {1, 1, 1}, VolumeKind::label), t(dims, {1, 1, 1}, VolumeKind::label);
    std::vector<int> pv(p.size()), tv(p.size());
    const double rate = rng.uniform();
    for (std::size_t i = 0; i < p.size(); ++i) {
      pv[i] = rng.uniform() < rate;
      tv[i] = rng.uniform() < 0.5;
      p.values[i] = pv[i];
      t.values[i] = tv[i];
    }
    const auto a = confusion(p, t), e = oracle::confusion(pv, tv);
    if (a.tp != e.tp || a.fp != e.fp || a.fn != e.fn || a.tn != e.tn) problems += " confusion";
  }

  std::size_t round_trips = 0;
  for (int trial = 0; trial < 30; ++trial, ++round_trips) {
    const std::array<std::size_t, 3> dims{1 + rng.below(12), 1 + rng.below(12), 1 + rng.below(12)};
    Volume v(dims, {1, 1, 1}, VolumeKind::intensity);
    for (double& x : v.values) x = rng.normal();
    const auto views = reslice(v);
    if (sagittal_to_axial(views.sagittal).data() != views.axial.data() ||
        coronal_to_axial(views.coronal).data() != views.axial.data())
      problems += " reslice";
  }
  return {problems.empty(), std::to_string(conv_cases) + " conv configs max err " + fmt(conv_err) + "; " +
                                std::to_string(pairs) + " confusion pairs exact; " + std::to_string(round_trips) +
                                " reslice round trips bitwise" + problems};
}

// -- criteria 5, 6 -----------------------------------------------------------

struct Overfit {
  MvttParams params;
  double seconds = 0.0;
  std::vector<double> anatomy_dice, scar_dice;
};

Overfit overfit_run() {
  const PhantomSpec base;  // 16x32x32 grid
  std::vector<Sample> train_set;
  std::vector<Phantom> truth;
  for (std::uint64_t i = 0; i < 4; ++i) {
    auto p = generate_phantom(base.variant(1000 + i));
    train_set.push_back(Sample::from_volumes("train" + std::to_string(i), p.intensity, p.anatomy, p.scar));
    truth.push_back(std::move(p));
  }
  MvttConfig mc;
  mc.width_multiplier = kOverfitWidth;
  TrainConfig tc;
  tc.max_epochs = kOverfitEpochs;
  tc.initial_lr = kOverfitLr;
  tc.lr_decay_rate = kOverfitDecay;
  tc.seed = kTrainSeed;
  const auto t0 = Clock::now();
  auto result = train(train_set, {}, tc, mc, {}, {});
  Overfit out{std::move(result.best), seconds_since(t0), {}, {}};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto seg = infer(normalize(truth[i].intensity), out.params);
    out.anatomy_dice.push_back(metrics(confusion(seg.anatomy_mask, truth[i].anatomy)).dice.value_or(0.0));
    out.scar_dice.push_back(metrics(confusion(seg.scar_mask, truth[i].scar)).dice.value_or(0.0));
  }
  return out;
}

double mean(const std::vector<double>& v) { return mean_of(v); }

std::pair<bool, std::string> overfit_criterion(const Overfit& o) {
  const double a = mean(o.anatomy_dice), s = mean(o.scar_dice);
  const double amin = *std::min_element(o.anatomy_dice.begin(), o.anatomy_dice.end());
  const double smin = *std::min_element(o.scar_dice.begin(), o.scar_dice.end());
  const bool ok = a >= 0.95 && s >= 0.85 && o.seconds <= 1800.0;
  return {ok, "train Dice anatomy " + fmt(a) + " (min " + fmt(amin) + "), scar " + fmt(s) + " (min " + fmt(smin) +
                  "), " + std::to_string(kOverfitEpochs) + " epochs in " + fmt(o.seconds) + " s"};
}

std::pair<bool, std::string> quantification(Overfit& o) {
  const PhantomSpec base;
  std::vector<double> truth, predicted;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto p = generate_phantom(base.variant(5000 + i));
    const auto seg = infer(normalize(p.intensity), o.params);
    truth.push_back(100.0 * p.scar_fraction);
    predicted.push_back(scar_burden(seg.scar_mask, seg.anatomy_mask).percentage);
  }
  const double r = pearson(truth, predicted);
  const auto ba = bland_altman(truth, predicted);
  return {r >= 0.99 && std::abs(ba.bias) <= 1.0, "20 held-out phantoms: r " + fmt(r) + ", bias " + fmt(ba.bias) +
                                                     " pp, limits [" + fmt(ba.loa_low) + ", " + fmt(ba.loa_high) + "]"};
}

// -- criterion 7 -------------------------------------------------------------

std::pair<bool, std::string> schedule_and_folds() {
  TrainConfig tc;
  const double lr1 = lr_schedule(1, tc);
  std::vector<std::string> ids;
  for (int i = 0; i < 170; ++i) ids.push_back("scan" + std::to_string(i));
  const auto plan = make_folds(ids, 10, 0);
  bool sizes = plan.folds.size() == 10;
  for (const auto& f : plan.folds) sizes = sizes && f.size() == 17;
  const bool ok = std::abs(lr1 - 0.00098) < 1e-15 && sizes;
  return {ok, "lr(1) = " + fmt(lr1) + "; 170 ids into " + std::to_string(plan.folds.size()) + " folds" +
                  (sizes ? " of 17" : " of uneven size")};
}

// -- criteria 8, 9 -----------------------------------------------------------

std::pair<bool, std::string> determinism() {
#ifdef MVTT_TOOL_PATH
  const auto root = scratch("determinism");
  for (const char* run : {"a", "b"}) {
    const auto d = root / run;
    const std::string data = (d / "data").string(), model = (d / "model").string(), pred = (d / "pred").string();
    const auto log = d.string() + ".log";
    if (tool("--deterministic phantom --count 2 --dims 8x16x16 --seed 21 --out " + data, log) != 0 ||
        tool("--deterministic train --data " + data + " --out " + model + " --epochs 3 --width 0.125 --seed 5", log) != 0 ||
        tool("--deterministic infer --checkpoint " + model + "/checkpoint --data " + data + " --out " + pred, log) != 0)
      return {false, "tool invocation failed, see " + log};
  }
  std::size_t files = 0;
  std::string diff;
  const bool ok = same_tree(root / "a", root / "b", files, diff);
  return {ok, ok ? std::to_string(files) + " phantom, log, checkpoint and inference files bitwise identical"
                 : "mismatch in " + diff};
#else
  return {false, "command-line tool not built"};
#endif
}

std::pair<bool, std::string> timing(const Overfit& o) {
#ifdef MVTT_TOOL_PATH
  const auto root = scratch("timing");
  save_checkpoint(o.params, root / "checkpoint");
  const auto log = (root / "tool.log");
  if (tool("phantom --count 1 --dims 60x32x32 --spacing 2x1x1 --seed 60 --out " + (root / "data").string(), log) != 0 ||
      tool("infer --checkpoint " + (root / "checkpoint").string() + " --data " + (root / "data").string() + " --out " +
               (root / "pred").string(),
           log) != 0)
    return {false, "tool invocation failed, see " + log.string()};
  const auto manifest = nlohmann::json::parse(read_bytes(root / "pred" / "run_manifest.json"));
  const auto& entry = manifest.at("per_case_seconds").at(0);
  return {true, "60-slice volume (C=" + std::to_string(o.params.config.channels()) + ") inferred in " +
                    fmt(entry.at("seconds").get<double>()) + " s (logged in run manifest)"};
#else
  return {false, "command-line tool not built"};
#endif
}

}  // namespace

int main() {
  Report report;
  criterion(report, 1, gradcheck_suite);
  criterion(report, 2, identities);
  criterion(report, 3, convlstm_forms);
  criterion(report, 4, oracle_equivalence);

  std::optional<Overfit> overfit;
  try {
    overfit = overfit_run();
  } catch (const std::exception& e) {
    std::cout << "overfit run failed: " << e.what() << std::endl;
  }
  if (overfit) {
    criterion(report, 5, [&] { return overfit_criterion(*overfit); });
    criterion(report, 6, [&] { return quantification(*overfit); });
  } else {
    report.line(5, false, "training did not complete");
    report.line(6, false, "no trained model");
  }
  criterion(report, 7, schedule_and_folds);
  criterion(report, 8, determinism);
  if (overfit) {
    criterion(report, 9, [&] { return timing(*overfit); });
  } else {
    report.line(9, false, "no trained model");
  }
  std::cout << (report.failures == 0 ? "all criteria passed" : std::to_string(report.failures) + " criteria failed")
            << std::endl;
  return report.failures == 0 ? 0 : 1;
}
