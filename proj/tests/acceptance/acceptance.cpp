// Runs the acceptance criteria and prints one line per criterion.
//
//   susa_acceptance [--only 1,2,...]
//
// Exit status is 0 only when every selected criterion passes.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "oracles.hpp"
#include "susa/cli/cli.hpp"
#include "susa/eval/eval.hpp"
#include "susa/numerics/gradient_suite.hpp"
#include "susa/numerics/log.hpp"
#include "susa/smcae/smcae.hpp"
#include "susa/ssmlp/ssmlp.hpp"
#include "test_support.hpp"

using namespace susa;
namespace k = susa::kernels;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string g(double v) { return fmt::format("{:.4g}", v); }

// ------------------------------------------------------------------ 1

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::size_t trials = 20;
  bool ok = true;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  auto note = [&](const std::string& name, std::size_t n, double err) {
    ++checks;
    ok = ok && n >= trials && err < 1e-5;
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  };
  for (const auto& s : kernel_gradient_suite(trials, 101)) note(s.kernel, s.trials, s.max_relative_error);
  auto repeat = [&](const std::string& name, auto&& check) {
    double err = 0.0;
    for (std::size_t t = 0; t < trials; ++t) err = std::max(err, check(optim::derive_seed(202, t)).max_relative_error);
    note(name, trials, err);
  };
  repeat("mcae_pelu", [](std::uint64_t s) { return mcae_gradient_check(s, Activation::pelu); });
  repeat("mcae_relu", [](std::uint64_t s) { return mcae_gradient_check(s, Activation::relu); });
  repeat("ssmlp_labeled", [](std::uint64_t s) { return ssmlp_gradient_check(s, false); });
  repeat("ssmlp_unlabeled", [](std::uint64_t s) { return ssmlp_gradient_check(s, true); });
  const double secs = seconds_since(t0);
  ok = ok && secs < 300.0;
  return {ok, fmt::format("checks={} trials_each={} max_rel_err={:.3e} worst={} runtime={:.0f}s", checks,
                          trials, worst, worst_name, secs)};
}

// ------------------------------------------------------------------ 2

Outcome oracle_equivalence() {
  std::mt19937_64 rng(7);
  // conv2d against the direct loop.
  double conv_err = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 9), ch(1, 6), kk(0, 2);
    const std::size_t ksize = 1 + 2 * kk(rng);
    const std::size_t h = ksize + dim(rng), w = ksize + dim(rng);
    const auto x = test::random_tensor(rng(), {2, h, w, ch(rng)});
    const auto wt = test::random_tensor(rng(), {ksize, ksize, x.dim(3), ch(rng)});
    conv_err = std::max({conv_err,
                         test::max_rel_diff(k::conv2d(x, wt, k::Padding::same), oracle::direct_conv(x, wt, true)),
                         test::max_rel_diff(k::conv2d(x, wt, k::Padding::valid), oracle::direct_conv(x, wt, false)),
                         test::max_rel_diff(k::conv2d(x, wt, k::Padding::edge), oracle::direct_conv(x, wt, true, true))});
  }
  // Band resampling against fine-grid integration.
  double resample_err = 0.0;
  std::uniform_real_distribution<double> gap(1.5, 14.0), fw(4.0, 40.0), val(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    SensorSpec src{"irregular", {}, {}};
    double c = 400.0;
    for (int b = 0; b < 80; ++b) {
      c += gap(rng);
      src.centers_nm.push_back(c);
      src.fwhm_nm.push_back(fw(rng) / 4);
    }
    SensorSpec tgt{"target", {}, {}};
    for (double t = 450.0; t < c - 40.0; t += 37.0 + 10 * val(rng)) {
      tgt.centers_nm.push_back(t);
      tgt.fwhm_nm.push_back(fw(rng));
    }
    const HsiCube cube{test::random_tensor<float>(rng(), {2, 3, src.bands()}, 0.0, 1.0), src, 2.0};
    const auto out = resample_bands(cube, tgt);
    for (std::size_t p = 0; p < 6; ++p) {
      std::vector<double> px(src.bands());
      for (std::size_t s = 0; s < px.size(); ++s) px[s] = cube.values[p * src.bands() + s];
      for (std::size_t t = 0; t < tgt.bands(); ++t) {
        const double o = oracle::integrate_band(src, px, tgt.centers_nm[t], tgt.fwhm_nm[t]);
        resample_err = std::max(resample_err, std::abs(out.values[p * tgt.bands() + t] - o) / std::abs(o));
      }
    }
  }
  // OA / AA / kappa against the list-based reference.
  double metric_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 2 + trial % 7;
    ConfusionMatrix cm(c);
    std::uniform_int_distribution<int> cnt(0, 40), coin(0, 4);
    for (std::size_t i = 0; i < c; ++i) {
      const bool empty_row = coin(rng) == 0 && i > 0;
      for (std::size_t j = 0; j < c; ++j) cm.at(i, j) = empty_row ? 0 : cnt(rng) + (i == j ? 30 : 0);
    }
    const auto m = metrics(cm);
    const auto ref = oracle::reference_metrics(cm);
    metric_err = std::max({metric_err, std::abs(m.oa - static_cast<double>(ref.oa)),
                           std::abs(m.aa - static_cast<double>(ref.aa)),
                           std::abs(m.kappa - static_cast<double>(ref.kappa))});
  }
  // Worked three-pixel example.
  const Tensor<float> x({3, 2}, {1, 3, 2, 1, 3, 2});
  const Tensor<float> y({3, 2}, {2, -1, 4, -2, 6, -3});
  const double d = dissimilarity(x, y);

  const bool ok = conv_err < 1e-6 && resample_err < 1e-4 && metric_err < 1e-10 && d == 0.25;
  return {ok, fmt::format("conv_rel={:.2e} resample_rel={:.2e} metrics_abs={:.2e} worked_d={}", conv_err,
                          resample_err, metric_err, d)};
}

// ------------------------------------------------------------------ 3

Outcome reduction_identities() {
  bool cae_exact = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    McaeConfig c;
    c.width_scale = 1.0 / 16;
    c.activation = Activation::relu;
    c.loss_weights = {1, 0, 0, 0};
    const auto m = build_mcae<double>(c, 4, seed);
    const auto x = test::random_tensor(seed + 10, {2, 16, 16, 4});
    cae_exact = cae_exact && mcae_objective(mcae_forward(m, x), c.loss_weights).value == oracle::reference_cae_loss(m, x);
  }

  SyntheticSceneSpec spec;
  spec.bands = 16;
  spec.height = 40;
  spec.width = 40;
  spec.seed = 3;
  const auto scene = synth_scene(spec);
  Tensor<float> image = scene.cube.values.reshaped({spec.height * spec.width, spec.bands});
  standardize(image);
  const auto split = lowshot_split(scene.labels, 6, 3);
  Tensor<float> labeled({split.total(), spec.bands});
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < split.pixels.size(); ++c) {
    for (const auto& [r, col] : split.pixels[c]) {
      const std::size_t src = r * spec.width + col;
      std::copy(image.data() + src * spec.bands, image.data() + (src + 1) * spec.bands,
                labeled.data() + labels.size() * spec.bands);
      labels.push_back(c);
    }
  }
  SsmlpConfig c;
  c.hidden_widths = {24, 16, 12, 8};
  c.recon_weights.assign(6, 0.0);
  c.unlabeled_ratio = 0.0;
  auto model = build_ssmlp<float>(c, spec.bands, 4, 11);
  const auto init = model;
  SsmlpTrainOptions o;
  o.seed = 11;
  o.max_steps = 40;
  const auto h = train_ssmlp(model, labeled, labels, image, o);
  const auto reference = oracle::plain_mlp_losses(init, labeled, labels, 11, 40);
  const bool mlp_exact = h.step_loss == reference;
  return {cae_exact && mlp_exact,
          fmt::format("cae_objective_exact={} plain_mlp_trajectory_exact={} steps={}", cae_exact, mlp_exact,
                      h.step_loss.size())};
}

// ------------------------------------------------------------------ 4

Outcome multi_loss_direction() {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSceneSpec spec;
  spec.seed = 41;
  const auto scene = synth_scene(spec);
  const std::vector<HsiCube> cubes{scene.cube};
  const auto sample = sample_patches(cubes, 80, 32, 42, 0.2);
  auto train = gather_patches(cubes, sample.train, 32);
  auto held_out = gather_patches(cubes, sample.validation, 32);
  apply_stats(held_out, standardize(train));

  std::vector<double> deep_multi, deep_single, data_multi, data_single;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (bool multi : {true, false}) {
      McaeConfig c;
      c.width_scale = 1.0 / 16;
      c.batch_size = 4;
      c.loss_weights = multi ? std::vector<double>{1, 0.1, 0.01, 0.01} : std::vector<double>{1, 0, 0, 0};
      auto model = build_mcae<float>(c, spec.bands, seed);
      McaeTrainOptions o;
      o.seed = seed;
      o.max_steps = 2000;
      o.max_epochs = 100000;
      o.schedule.drop_patience = 1000000;
      o.schedule.stop_patience = 1000000;
      train_mcae(model, train, held_out, o);
      const auto loss = evaluate_mcae(model, held_out);
      (multi ? deep_multi : deep_single).push_back(loss.layer_mse.back());
      (multi ? data_multi : data_single).push_back(loss.layer_mse.front());
    }
  }
  const double secs = seconds_since(t0);
  const double m = median(deep_multi), s = median(deep_single);
  return {m < s && secs < 1200.0,
          fmt::format("patches={} median_deepest_mse multi={} single={} median_data_mse multi={} single={} "
                      "runtime={:.0f}s",
                      train.dim(0), g(m), g(s), g(median(data_multi)), g(median(data_single)), secs)};
}

// ------------------------------------------------------------------ 5

double heldout_aa(const cli::LowShotRun& run, const SyntheticScene& scene) {
  const auto pred = predict_map(run.model, scene.cube.values, run.stats, scene.labels.class_names);
  return metrics(confusion(scene.labels, pred.labels, evaluation_pixels(scene.labels, run.split, false))).aa;
}

Outcome semi_supervised_direction() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> on, off, diff;
  for (std::uint64_t pair = 0; pair < 10; ++pair) {
    SyntheticSceneSpec spec;
    spec.noise = 0.05;
    spec.variation = 0.2;
    spec.min_angle_deg = 2.0;
    spec.seed = 500 + pair;
    const auto scene = synth_scene(spec);
    cli::LowShotOptions o;
    o.per_class = 5;
    o.seed = 600 + pair;
    o.pool_size = 2000;
    const auto with_recon = cli::train_lowshot(scene.cube.values, scene.labels, o);
    o.config.recon_weights.assign(o.config.recon_weights.size(), 0.0);
    o.config.unlabeled_ratio = 0.0;
    const auto without = cli::train_lowshot(scene.cube.values, scene.labels, o);
    on.push_back(heldout_aa(with_recon, scene));
    off.push_back(heldout_aa(without, scene));
    diff.push_back(on.back() - off.back());
  }
  const double secs = seconds_since(t0);
  const double gap = median(on) - median(off);
  std::string per_pair;
  for (double d : diff) per_pair += fmt::format("{}{:+.3f}", per_pair.empty() ? "" : ",", d);
  return {gap >= 0.02 && secs < 900.0,
          fmt::format("median_aa on={} off={} gap_pp={:.2f} median_paired_diff_pp={:.2f} pairs=[{}] runtime={:.0f}s",
                      g(median(on)), g(median(off)), 100 * gap, 100 * median(diff), per_pair, secs)};
}

// -------------------------------------------------------------- 6 and 7

SmcaeStack small_stack(const HsiCube& source, std::uint64_t seed) {
  const std::vector<HsiCube> cubes{source};
  const auto sample = sample_patches(cubes, 80, 32, seed, 0.2);
  SmcaeConfig c;
  c.stages = 2;
  c.mcae.width_scale = 1.0 / 16;
  c.mcae.batch_size = 4;
  McaeTrainOptions o;
  o.seed = seed;
  o.max_steps = 500;
  return train_smcae_stack(gather_patches(cubes, sample.train, 32), gather_patches(cubes, sample.validation, 32),
                           source.spec, c, o)
      .stack;
}

double heldout_oa(const Tensor<float>& features, const LabelMap& labels, std::uint64_t seed) {
  cli::LowShotOptions o;
  o.per_class = 10;
  o.seed = seed;
  const auto run = cli::train_lowshot(features, labels, o);
  const auto pred = predict_map(run.model, features, run.stats, labels.class_names);
  return metrics(confusion(labels, pred.labels, evaluation_pixels(labels, run.split, false))).oa;
}

SyntheticScene target_scene() {
  SyntheticSceneSpec spec;
  spec.classes = 4;
  spec.bands = 32;
  spec.seed = 61;
  return synth_scene(spec);
}

Outcome lowshot_end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto scene = target_scene();
  const auto stack = small_stack(scene.cube, 62);
  const auto features = smcae_extract(stack, scene.cube);
  const double oa = heldout_oa(features, scene.labels, 63);
  const double secs = seconds_since(t0);
  return {oa >= 0.90 && secs < 1800.0,
          fmt::format("classes=4 bands=32 stages=2 features={} heldout_oa={} runtime={:.0f}s", features.dim(2), g(oa),
                      secs)};
}

Outcome dissimilarity_sanity() {
  const auto scene = target_scene();
  // Two source sensors with different band sets; each stack learns on its
  // own synthetic scene and is applied to the target after resampling.
  SyntheticSceneSpec a;
  a.bands = 24;
  a.seed = 71;
  SyntheticSceneSpec b;
  b.bands = 40;
  b.first_nm = 450.0;
  b.last_nm = 2350.0;
  b.seed = 72;
  const auto stack_a = small_stack(synth_scene(a).cube, 73);
  const auto stack_b = small_stack(synth_scene(b).cube, 74);
  const auto fa = smcae_extract(stack_a, scene.cube);
  const auto fb = smcae_extract(stack_b, scene.cube);
  const double self_a = dissimilarity(fa, fa);
  const double self_b = dissimilarity(fb, fb);
  const double cross = dissimilarity(fa, fb);
  const auto fused = fuse_sensor_features({fa, fb}, {"a", "b"});
  const double self_fused = dissimilarity(fused.features, fused.features);

  const double oa_a = heldout_oa(fa, scene.labels, 75);
  const double oa_b = heldout_oa(fb, scene.labels, 75);
  const double oa_fused = heldout_oa(fused.features, scene.labels, 75);
  const double self_max = std::max({self_a, self_b, self_fused});
  const bool ok = self_max < 1e-12 && oa_fused >= std::max(oa_a, oa_b) - 0.01;
  return {ok, fmt::format("max_d_self={:.2e} d_cross={} oa_a={} oa_b={} oa_fused={}", self_max, g(cross), g(oa_a),
                          g(oa_b), g(oa_fused))};
}

// ------------------------------------------------------------------ 8

struct Scratch {
  fs::path path;
  Scratch() {
    path = fs::temp_directory_path() / ("susa_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~Scratch() { fs::remove_all(path); }
};

Outcome determinism() {
  Scratch scratch;
  const fs::path run = scratch.path / "run", first = scratch.path / "first";
  auto s = [](const fs::path& p) { return p.string(); };
  const std::vector<std::vector<std::string>> commands{
      {"--workers", "1", "synth", "--seed", "81", "--out-dir", s(run / "scene"), "--height", "48", "--width", "48"},
      {"--workers", "1", "sample-patches", "--cube", s(run / "scene/scene.cube"), "--count", "40", "--size", "16",
       "--seed", "82", "--out-dir", s(run / "patches")},
      {"--workers", "1", "train-smcae", "--patches", s(run / "patches"), "--out", s(run / "stack.ckpt"), "--seed",
       "83", "--stages", "2", "--width-scale", "0.0625", "--batch-size", "4", "--max-steps", "60"},
      {"--workers", "1", "extract", "--stack", s(run / "stack.ckpt"), "--cube", s(run / "scene/scene.cube"),
       "--out", s(run / "features.tensor")},
      {"--workers", "1", "train-ssmlp", "--features", s(run / "features.tensor"), "--labels",
       s(run / "scene/truth.labels"), "--out", s(run / "classifier.ckpt"), "--seed", "84", "--max-epochs", "40"},
  };
  auto pipeline = [&]() -> std::string {
    for (const auto& args : commands) {
      std::ostringstream out, err;
      if (cli::run(args, out, err) != 0) return err.str();
    }
    return "";
  };
  if (auto e = pipeline(); !e.empty()) return {false, "first run failed: " + e};
  fs::rename(run, first);
  if (auto e = pipeline(); !e.empty()) return {false, "second run failed: " + e};

  std::size_t files = 0, differing = 0;
  std::string first_diff;
  for (const auto& entry : fs::recursive_directory_iterator(first)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), first);
    ++files;
    if (!fs::exists(run / rel) || read_file(first / rel) != read_file(run / rel)) {
      ++differing;
      if (first_diff.empty()) first_diff = rel.string();
    }
  }
  const bool have_outputs = fs::exists(run / "stack.ckpt.history.json") && fs::exists(run / "classifier.ckpt.history.json");
  return {differing == 0 && have_outputs && files > 0,
          fmt::format("files_compared={} differing={}{}", files, differing,
                      first_diff.empty() ? "" : " first=" + first_diff)};
}

// ------------------------------------------------------------------ 9

Outcome schedule_conformance() {
  using optim::PlateauAction;
  auto flat_run = [](optim::PlateauSchedule s, double value, int epochs) {
    std::vector<PlateauAction> actions;
    plateau_update(s, value);
    for (int e = 0; e < epochs; ++e) actions.push_back(plateau_update(s, value));
    return actions;
  };
  auto first = [](const std::vector<PlateauAction>& a, PlateauAction x) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] == x) return static_cast<int>(i + 1);
    }
    return -1;
  };
  const auto ae = flat_run(optim::PlateauSchedule::autoencoder(), 1.0, 10);
  const auto cls = flat_run(optim::PlateauSchedule::classifier(), 0.8, 50);
  const int ae_drop = first(ae, PlateauAction::drop_lr), ae_stop = first(ae, PlateauAction::stop);
  const int cl_drop = first(cls, PlateauAction::drop_lr), cl_stop = first(cls, PlateauAction::stop);
  const bool ok = ae_drop == 5 && ae_stop == 10 && cl_drop == 25 && cl_stop == 50 &&
                  optim::PlateauSchedule::autoencoder().direction == optim::Direction::minimize &&
                  optim::PlateauSchedule::classifier().direction == optim::Direction::maximize;
  return {ok, fmt::format("autoencoder drop={} stop={} classifier drop={} stop={}", ae_drop, ae_stop, cl_drop,
                          cl_stop)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  log::set_min_level(log::Level::warn);
  log::set_sink([](const std::string&) {});

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_equivalence},
      {"reduction identities", reduction_identities},
      {"multi-loss directional", multi_loss_direction},
      {"semi-supervised directional", semi_supervised_direction},
      {"low-shot end to end", lowshot_end_to_end},
      {"dissimilarity sanity", dissimilarity_sanity},
      {"determinism", determinism},
      {"schedule conformance", schedule_conformance},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    all = all && o.pass;
    std::cout << fmt::format("criterion {} [{}]: {} ({:.1f}s) {}", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                             seconds_since(t0), o.detail)
              << std::endl;
  }
  return all ? 0 : 1;
}
