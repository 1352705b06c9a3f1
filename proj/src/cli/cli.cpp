#include "susa/cli/cli.hpp"

#include <unistd.h>

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "susa/eval/eval.hpp"
#include "susa/mcae/mcae.hpp"
#include "susa/numerics/gradient_suite.hpp"
#include "susa/numerics/log.hpp"
#include "susa/numerics/parallel.hpp"
#include "susa/optim/optim.hpp"
#include "susa/smcae/smcae.hpp"
#include "susa/ssmlp/ssmlp.hpp"

namespace susa::cli {

using nlohmann::json;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("{}: cannot open", path.string()));
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest setup failed");
  }
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    const auto got = in.gcount();
    if (got > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(got));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

LowShotRun train_lowshot(const Tensor<float>& features, const LabelMap& labels,
                         const LowShotOptions& options) {
  if (features.rank() != 3) {
    throw std::invalid_argument(
        fmt::format("features must be [H, W, F], got {}", shape_string(features.shape())));
  }
  labels.validate();
  const std::size_t h = features.dim(0), w = features.dim(1), f = features.dim(2);
  if (labels.height != h || labels.width != w) {
    throw std::invalid_argument(fmt::format("features are {}x{} but labels are {}x{}", h, w,
                                            labels.height, labels.width));
  }
  const std::size_t classes = labels.classes();
  if (classes == 0) throw std::invalid_argument("label map declares no classes");

  Tensor<float> image = features.reshaped({h * w, f});
  LowShotRun run;
  run.stats = standardize(image);
  run.split = lowshot_split(labels, options.per_class, options.seed, options.overrides);
  const std::size_t n = run.split.total();
  if (n == 0) throw std::invalid_argument("the split holds no labeled pixels");

  Tensor<float> labeled({n, f});
  std::vector<std::size_t> label_index;
  std::vector<std::size_t> pixel_of_row;
  for (std::size_t c = 0; c < run.split.pixels.size(); ++c) {
    for (const auto& [r, col] : run.split.pixels[c]) {
      const std::size_t src = r * w + col;
      std::copy(image.data() + src * f, image.data() + (src + 1) * f,
                labeled.data() + label_index.size() * f);
      label_index.push_back(c);
      pixel_of_row.push_back(src);
    }
  }

  const auto folds = stratified_split(label_index, classes, options.config.validation_fraction,
                                      optim::derive_seed(options.seed, 1));
  std::set<std::size_t> held_out;
  for (std::size_t i : folds.validation) held_out.insert(pixel_of_row[i]);
  for (std::size_t p = 0; p < h * w; ++p) {
    if (!held_out.count(p)) run.pool.push_back(p);
  }
  if (options.pool_size > 0 && options.pool_size < run.pool.size()) {
    std::mt19937_64 rng(optim::derive_seed(options.seed, 5));
    std::shuffle(run.pool.begin(), run.pool.end(), rng);
    run.pool.resize(options.pool_size);
    std::sort(run.pool.begin(), run.pool.end());
  }
  Tensor<float> unlabeled({run.pool.size(), f});
  for (std::size_t i = 0; i < run.pool.size(); ++i) {
    const std::size_t src = run.pool[i];
    std::copy(image.data() + src * f, image.data() + (src + 1) * f, unlabeled.data() + i * f);
  }

  run.model = build_ssmlp<float>(options.config, f, classes, optim::derive_seed(options.seed, 0));
  SsmlpTrainOptions train = options.train;
  train.seed = options.seed;
  run.history = train_ssmlp(run.model, labeled, label_index, unlabeled, train);
  return run;
}

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
    if (c == '"') c = '\'';
  }
  return s;
}

std::string num(double v) { return fmt::format("{:.6g}", v); }

struct Context {
  std::vector<std::string> argv;
  std::string subcommand;
  std::size_t workers = 1;
  std::ostream* out = nullptr;
};

json file_entry(const fs::path& shown, const fs::path& actual) {
  return {{"path", shown.string()},
          {"bytes", fs::file_size(actual)},
          {"sha256", sha256_file(actual)}};
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  fs::path q = p;
  q += suffix;
  return q;
}

/// Collects inputs, stages outputs beside their final names, and on commit
/// writes the run manifest and renames everything into place. Staged files
/// left uncommitted are removed.
class RunRecord {
 public:
  RunRecord(const Context& ctx, json config, std::optional<std::uint64_t> seed)
      : ctx_(ctx), config_(std::move(config)), seed_(seed) {}

  RunRecord(const RunRecord&) = delete;
  RunRecord& operator=(const RunRecord&) = delete;

  ~RunRecord() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& [tmp, final_path] : staged_) {
      fs::remove(tmp, ec);
      fs::remove(sidecar_path(tmp), ec);
    }
  }

  /// Checks that `p` exists and records its hash (and its sidecar's, if any).
  void input(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw MissingInput(fmt::format("{}: no such file", p.string()));
    inputs_.push_back(file_entry(p, p));
    canonical_inputs_.insert(fs::weakly_canonical(p));
    const auto sc = sidecar_path(p);
    if (fs::is_regular_file(sc)) {
      inputs_.push_back(file_entry(sc, sc));
      canonical_inputs_.insert(fs::weakly_canonical(sc));
    }
  }

  /// Returns the staging path to write in place of `final_path`.
  fs::path output(const fs::path& final_path) {
    for (const auto& candidate : {final_path, sidecar_path(final_path)}) {
      if (canonical_inputs_.count(fs::weakly_canonical(candidate))) {
        throw std::invalid_argument(
            fmt::format("{}: output would overwrite an input", candidate.string()));
      }
    }
    const fs::path dir = final_path.parent_path();
    fs::path tmp = dir / fmt::format(".{}.staging-{}", final_path.filename().string(), ::getpid());
    staged_.emplace_back(tmp, final_path);
    return tmp;
  }

  void commit(const fs::path& manifest_path) {
    json outputs = json::array();
    for (const auto& [tmp, final_path] : staged_) {
      outputs.push_back(file_entry(final_path, tmp));
      if (fs::exists(sidecar_path(tmp))) {
        outputs.push_back(file_entry(sidecar_path(final_path), sidecar_path(tmp)));
      }
    }
    json manifest = {{"tool", "susa"},
                     {"manifest_version", 1},
                     {"subcommand", ctx_.subcommand},
                     {"argv", ctx_.argv},
                     {"config", config_},
                     {"seed", seed_ ? json(*seed_) : json(nullptr)},
                     {"workers", ctx_.workers},
                     {"inputs", inputs_},
                     {"outputs", outputs}};
    const fs::path mtmp = output(manifest_path);
    write_file_atomic(mtmp, manifest.dump(2) + "\n");
    for (const auto& [tmp, final_path] : staged_) {
      fs::rename(tmp, final_path);
      if (fs::exists(sidecar_path(tmp))) fs::rename(sidecar_path(tmp), sidecar_path(final_path));
    }
    committed_ = true;
  }

  json& config() { return config_; }

 private:
  const Context& ctx_;
  json config_;
  std::optional<std::uint64_t> seed_;
  json inputs_ = json::array();
  std::set<fs::path> canonical_inputs_;
  std::vector<std::pair<fs::path, fs::path>> staged_;
  bool committed_ = false;
};

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

optim::PlateauSchedule schedule_from(optim::PlateauSchedule base, int drop, int stop) {
  base.drop_patience = drop;
  base.stop_patience = stop;
  base.validate();
  return base;
}

json schedule_json(const optim::PlateauSchedule& s) {
  return {{"direction", s.direction == optim::Direction::minimize ? "minimize" : "maximize"},
          {"drop_patience", s.drop_patience},
          {"stop_patience", s.stop_patience},
          {"drop_factor", s.drop_factor},
          {"min_delta", s.min_delta}};
}

std::map<std::size_t, std::size_t> parse_overrides(const std::vector<std::string>& items) {
  std::map<std::size_t, std::size_t> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    std::size_t cls = 0, count = 0;
    try {
      if (eq == std::string::npos) throw std::invalid_argument(item);
      std::size_t used = 0;
      cls = std::stoul(item.substr(0, eq), &used);
      if (used != eq) throw std::invalid_argument(item);
      count = std::stoul(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(fmt::format("--override expects CLASS=COUNT, got '{}'", item));
    }
    if (cls == 0) throw UsageError("--override class ids start at 1");
    out[cls] = count;
  }
  return out;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::uint64_t seed = 0;
  std::string out_dir;
  SyntheticSceneSpec spec;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* s = app.add_subcommand("synth", "Generate a labeled synthetic scene (scene.cube, truth.labels)");
  s->add_option("--seed", a.seed, "Random seed")->required();
  s->add_option("--out-dir", a.out_dir, "Output directory")->required();
  s->add_option("--classes", a.spec.classes, "Number of classes")->capture_default_str();
  s->add_option("--bands", a.spec.bands, "Number of bands")->capture_default_str();
  s->add_option("--height", a.spec.height, "Rows")->capture_default_str();
  s->add_option("--width", a.spec.width, "Columns")->capture_default_str();
  s->add_option("--first-nm", a.spec.first_nm, "First band center (nm)")->capture_default_str();
  s->add_option("--last-nm", a.spec.last_nm, "Last band center (nm)")->capture_default_str();
  s->add_option("--blobs-per-class", a.spec.blobs_per_class, "Blob seeds per class")->capture_default_str();
  s->add_option("--blob-radius", a.spec.blob_radius, "Blob radius (pixels)")->capture_default_str();
  s->add_option("--variation", a.spec.variation, "Within-class variation")->capture_default_str();
  s->add_option("--noise", a.spec.noise, "White noise standard deviation")->capture_default_str();
  s->add_option("--min-angle", a.spec.min_angle_deg, "Minimum endmember angle (degrees)")
      ->capture_default_str();
}

int run_synth(const Context& ctx, SynthArgs a) {
  a.spec.seed = a.seed;
  json config = {{"classes", a.spec.classes},     {"bands", a.spec.bands},
                 {"height", a.spec.height},       {"width", a.spec.width},
                 {"first_nm", a.spec.first_nm},   {"last_nm", a.spec.last_nm},
                 {"blobs_per_class", a.spec.blobs_per_class},
                 {"blob_radius", a.spec.blob_radius}, {"variation", a.spec.variation},
                 {"noise", a.spec.noise},         {"min_angle_deg", a.spec.min_angle_deg},
                 {"min_class_pixels", a.spec.min_class_pixels}};
  RunRecord rec(ctx, config, a.seed);
  const auto scene = synth_scene(a.spec);
  const fs::path dir = a.out_dir;
  save_cube(rec.output(dir / "scene.cube"), scene.cube);
  save_labels(rec.output(dir / "truth.labels"), scene.labels);
  write_json(rec.output(dir / "endmembers.json"), json(scene.endmembers));
  rec.commit(dir / "synth.manifest.json");
  *ctx.out << fmt::format("height={} width={} bands={} classes={}\n", scene.cube.height(),
                          scene.cube.width(), scene.cube.bands(), scene.labels.classes());
  return 0;
}

// ------------------------------------------------------- sample-patches

struct SampleArgs {
  std::vector<std::string> cubes;
  std::size_t count = 50000;
  std::size_t size = 32;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool resample = false;
};

void add_sample(CLI::App& app, SampleArgs& a) {
  auto* s = app.add_subcommand("sample-patches", "Draw training and validation patches from cubes");
  s->add_option("--cube", a.cubes, "Input cube (repeatable)")->required();
  s->add_option("--count", a.count, "Total patches drawn")->capture_default_str();
  s->add_option("--size", a.size, "Patch side in pixels")->capture_default_str();
  s->add_option("--validation-fraction", a.validation_fraction, "Share held out for validation")
      ->capture_default_str();
  s->add_option("--seed", a.seed, "Random seed")->required();
  s->add_option("--out-dir", a.out_dir, "Output directory")->required();
  s->add_flag("--resample", a.resample,
              "Resample every cube onto the bands of the first one instead of rejecting a mismatch");
}

json coords_json(const std::vector<PatchCoord>& coords) {
  json j = json::array();
  for (const auto& c : coords) j.push_back({c.cube, c.row, c.col});
  return j;
}

int run_sample(const Context& ctx, const SampleArgs& a) {
  json config = {{"cubes", a.cubes},   {"count", a.count},
                 {"size", a.size},     {"validation_fraction", a.validation_fraction},
                 {"resample", a.resample}};
  RunRecord rec(ctx, config, a.seed);
  std::vector<HsiCube> cubes;
  for (const auto& p : a.cubes) {
    rec.input(p);
    cubes.push_back(load_cube(p));
  }
  for (std::size_t i = 1; i < cubes.size(); ++i) {
    if (cubes[i].spec == cubes[0].spec) continue;
    if (!a.resample) {
      throw std::invalid_argument(fmt::format(
          "{}: bands differ from {}; pass --resample to map them onto the first cube's sensor",
          a.cubes[i], a.cubes[0]));
    }
    cubes[i] = resample_bands(cubes[i], cubes[0].spec);
  }
  const auto sample = sample_patches(cubes, a.count, a.size, a.seed, a.validation_fraction);
  if (sample.train.empty()) throw std::invalid_argument("no patches could be drawn");
  const fs::path dir = a.out_dir;
  save_tensor(rec.output(dir / "patches.train.tensor"), gather_patches(cubes, sample.train, a.size),
              "patches");
  if (!sample.validation.empty()) {
    save_tensor(rec.output(dir / "patches.validation.tensor"),
                gather_patches(cubes, sample.validation, a.size), "patches");
  }
  json meta = {{"size", a.size},
               {"sensor", to_json(cubes[0].spec)},
               {"cubes", a.cubes},
               {"train", coords_json(sample.train)},
               {"validation", coords_json(sample.validation)}};
  write_json(rec.output(dir / "patches.json"), meta);
  rec.commit(dir / "sample-patches.manifest.json");
  *ctx.out << fmt::format("train={} validation={} size={} bands={}\n", sample.train.size(),
                          sample.validation.size(), a.size, cubes[0].bands());
  return 0;
}

// ---------------------------------------------------------- train-smcae

struct SmcaeArgs {
  std::string patches;
  std::string out;
  std::uint64_t seed = 0;
  SmcaeConfig config;
  std::string activation = "pelu";
  std::size_t max_epochs = 1000;
  std::size_t max_steps = 0;
  int drop_patience = 5;
  int stop_patience = 10;
};

void add_smcae(CLI::App& app, SmcaeArgs& a) {
  auto* s = app.add_subcommand("train-smcae", "Train a stack of convolutional autoencoders on patches");
  s->add_option("--patches", a.patches, "Directory written by sample-patches")->required();
  s->add_option("--out", a.out, "Checkpoint path")->required();
  s->add_option("--seed", a.seed, "Random seed")->required();
  s->add_option("--stages", a.config.stages, "Autoencoders in the stack")->capture_default_str();
  s->add_option("--width-scale", a.config.mcae.width_scale, "Multiplier on every layer width")
      ->capture_default_str();
  s->add_option("--encoder-widths", a.config.mcae.encoder_widths, "Encoder widths, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  s->add_option("--refinement-widths", a.config.mcae.refinement_widths,
                "Refinement widths, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  s->add_option("--lambda", a.config.mcae.loss_weights,
                "Reconstruction weights, data layer first, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  s->add_option("--activation", a.activation, "pelu or relu")->capture_default_str();
  s->add_option("--learning-rate", a.config.mcae.learning_rate, "Initial Nadam learning rate")
      ->capture_default_str();
  s->add_option("--batch-size", a.config.mcae.batch_size, "Patches per mini-batch")->capture_default_str();
  s->add_option("--pool-window", a.config.pool_window, "Mean-pool window applied at extraction")
      ->capture_default_str();
  s->add_option("--max-epochs", a.max_epochs, "Epoch limit per stage")->capture_default_str();
  s->add_option("--max-steps", a.max_steps, "Step limit per stage (0: none)")->capture_default_str();
  s->add_option("--drop-patience", a.drop_patience, "Epochs without improvement before lr /10")
      ->capture_default_str();
  s->add_option("--stop-patience", a.stop_patience, "Epochs without improvement before stopping")
      ->capture_default_str();
}

json mcae_history_json(const McaeHistory& h) {
  return {{"train_loss", h.train_loss},
          {"validation_loss", h.validation_loss},
          {"learning_rate", h.learning_rate},
          {"validation_layer_mse", h.validation_layer_mse},
          {"steps", h.steps},
          {"stop_reason", h.stop_reason}};
}

int run_smcae(const Context& ctx, SmcaeArgs a) {
  a.config.mcae.activation = activation_from_string(a.activation);
  a.config.validate();
  McaeTrainOptions opts;
  opts.seed = a.seed;
  opts.max_epochs = a.max_epochs;
  opts.max_steps = a.max_steps;
  opts.schedule = schedule_from(optim::PlateauSchedule::autoencoder(), a.drop_patience, a.stop_patience);

  json config = {{"smcae", {{"mcae", to_json(a.config.mcae)},
                            {"stages", a.config.stages},
                            {"pool_window", a.config.pool_window}}},
                 {"patches", a.patches},
                 {"max_epochs", a.max_epochs},
                 {"max_steps", a.max_steps},
                 {"schedule", schedule_json(opts.schedule)}};
  RunRecord rec(ctx, config, a.seed);
  const fs::path dir = a.patches;
  rec.input(dir / "patches.json");
  rec.input(dir / "patches.train.tensor");
  const auto meta = read_json(dir / "patches.json");
  const SensorSpec sensor = sensor_from_json(meta.at("sensor"));
  const Tensor<float> train = load_tensor(dir / "patches.train.tensor");
  Tensor<float> validation;
  if (fs::exists(dir / "patches.validation.tensor")) {
    rec.input(dir / "patches.validation.tensor");
    validation = load_tensor(dir / "patches.validation.tensor");
  } else {
    throw MissingInput(fmt::format("{}: no validation patches", dir.string()));
  }

  const auto result = train_smcae_stack(train, validation, sensor, a.config, opts);
  json histories = json::array();
  for (const auto& h : result.histories) histories.push_back(mcae_history_json(h));
  save_checkpoint(rec.output(a.out), to_checkpoint(result.stack));
  write_json(rec.output(with_suffix(a.out, ".history.json")), {{"stages", histories}});
  rec.commit(with_suffix(a.out, ".manifest.json"));
  for (std::size_t k = 0; k < result.histories.size(); ++k) {
    const auto& h = result.histories[k];
    *ctx.out << fmt::format("stage={} epochs={} steps={} validation_loss={} stop={}\n", k + 1,
                            h.validation_loss.size(), h.steps,
                            num(h.validation_loss.empty() ? 0.0 : h.validation_loss.back()),
                            h.stop_reason);
  }
  return 0;
}

// -------------------------------------------------------------- extract

struct ExtractArgs {
  std::string stack;
  std::string cube;
  std::string out;
  bool no_resample = false;
};

void add_extract(CLI::App& app, ExtractArgs& a) {
  auto* s = app.add_subcommand("extract", "Compute stack features for a cube");
  s->add_option("--stack", a.stack, "Stack checkpoint")->required();
  s->add_option("--cube", a.cube, "Input cube")->required();
  s->add_option("--out", a.out, "Feature tensor path")->required();
  s->add_flag("--no-resample", a.no_resample, "Reject cubes whose bands differ from the stack's");
}

int run_extract(const Context& ctx, const ExtractArgs& a) {
  RunRecord rec(ctx, {{"stack", a.stack}, {"cube", a.cube}, {"resample", !a.no_resample}}, std::nullopt);
  rec.input(a.stack);
  rec.input(a.cube);
  const auto stack = smcae_from_checkpoint(load_checkpoint(a.stack));
  const auto cube = load_cube(a.cube);
  ExtractOptions opts;
  opts.resample = !a.no_resample;
  const auto features = smcae_extract(stack, cube, opts);
  save_tensor(rec.output(a.out), features, "features");
  rec.commit(with_suffix(a.out, ".manifest.json"));
  *ctx.out << fmt::format("height={} width={} features={}\n", features.dim(0), features.dim(1),
                          features.dim(2));
  return 0;
}

// ----------------------------------------------------------------- fuse

struct FuseArgs {
  std::vector<std::string> features;
  std::vector<std::string> names;
  std::string out;
};

void add_fuse(CLI::App& app, FuseArgs& a) {
  auto* s = app.add_subcommand("fuse", "Concatenate feature tensors in the given order");
  s->add_option("--features", a.features, "Feature tensor (repeatable, order kept)")->required();
  s->add_option("--name", a.names, "Source name per feature tensor (repeatable)");
  s->add_option("--out", a.out, "Fused tensor path")->required();
}

int run_fuse(const Context& ctx, const FuseArgs& a) {
  if (!a.names.empty() && a.names.size() != a.features.size()) {
    throw UsageError(fmt::format("{} --name values for {} --features", a.names.size(), a.features.size()));
  }
  RunRecord rec(ctx, {{"features", a.features}, {"names", a.names}}, std::nullopt);
  std::vector<Tensor<float>> parts;
  for (const auto& p : a.features) {
    rec.input(p);
    parts.push_back(load_tensor(p));
  }
  const auto fused = fuse_sensor_features(parts, a.names);
  rec.config()["sources"] = fused.sources;
  rec.config()["channels"] = fused.channels;
  save_tensor(rec.output(a.out), fused.features, "features");
  rec.commit(with_suffix(a.out, ".manifest.json"));
  *ctx.out << fmt::format("features={}\n", fused.features.dim(2));
  return 0;
}

// ---------------------------------------------------------- train-ssmlp

struct SsmlpArgs {
  std::string features;
  std::string labels;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t per_class = 10;
  std::vector<std::string> overrides;
  SsmlpConfig config;
  std::string activation = "pelu";
  std::size_t max_epochs = 2000;
  std::size_t max_steps = 0;
  int drop_patience = 25;
  int stop_patience = 50;
  std::size_t pool_size = 0;
};

void add_ssmlp(CLI::App& app, SsmlpArgs& a) {
  auto* s = app.add_subcommand("train-ssmlp", "Train the semi-supervised classifier on a low-shot split");
  s->add_option("--features", a.features, "Feature tensor [H, W, F]")->required();
  s->add_option("--labels", a.labels, "Ground-truth label map")->required();
  s->add_option("--out", a.out, "Checkpoint path")->required();
  s->add_option("--seed", a.seed, "Random seed")->required();
  s->add_option("--per-class", a.per_class, "Labeled pixels per class")->capture_default_str();
  s->add_option("--override", a.overrides, "Per-class count as CLASS=COUNT (repeatable)");
  s->add_option("--hidden", a.config.hidden_widths, "Hidden widths, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  s->add_option("--lambda", a.config.recon_weights,
                "Reconstruction weights: data layer, each hidden layer, class layer")
      ->delimiter(',')
      ->capture_default_str();
  s->add_option("--activation", a.activation, "pelu or relu")->capture_default_str();
  s->add_option("--learning-rate", a.config.learning_rate, "Initial Nadam learning rate")
      ->capture_default_str();
  s->add_option("--batch-size", a.config.batch_size, "Labeled samples per mini-batch")
      ->capture_default_str();
  s->add_option("--weight-decay", a.config.weight_decay, "L2 coefficient on weights")
      ->capture_default_str();
  s->add_option("--unlabeled-ratio", a.config.unlabeled_ratio,
                "Unlabeled samples per labeled sample in a mini-batch")
      ->capture_default_str();
  s->add_option("--validation-fraction", a.config.validation_fraction,
                "Share of labeled pixels per class used for validation")
      ->capture_default_str();
  s->add_option("--decoder-noise", a.config.decoder_noise, "Gaussian noise on encoder activations")
      ->capture_default_str();
  s->add_option("--max-epochs", a.max_epochs, "Epoch limit")->capture_default_str();
  s->add_option("--max-steps", a.max_steps, "Step limit (0: none)")->capture_default_str();
  s->add_option("--drop-patience", a.drop_patience, "Epochs without improvement before lr /10")
      ->capture_default_str();
  s->add_option("--stop-patience", a.stop_patience, "Epochs without improvement before stopping")
      ->capture_default_str();
  s->add_option("--pool-size", a.pool_size, "Unlabeled pixels used (0: all outside validation)")
      ->capture_default_str();
}

json ssmlp_history_json(const SsmlpHistory& h) {
  return {{"train_loss", h.train_loss},
          {"class_loss", h.class_loss},
          {"recon_loss", h.recon_loss},
          {"validation_oa", h.validation_oa},
          {"validation_aa", h.validation_aa},
          {"learning_rate", h.learning_rate},
          {"steps", h.steps},
          {"stop_reason", h.stop_reason},
          {"train_index", h.train_index},
          {"validation_index", h.validation_index},
          {"absent_classes", h.absent_classes}};
}

int run_ssmlp(const Context& ctx, SsmlpArgs a) {
  a.config.activation = activation_from_string(a.activation);
  a.config.validate();
  LowShotOptions opts;
  opts.per_class = a.per_class;
  opts.overrides = parse_overrides(a.overrides);
  opts.seed = a.seed;
  opts.config = a.config;
  opts.pool_size = a.pool_size;
  opts.train.max_epochs = a.max_epochs;
  opts.train.max_steps = a.max_steps;
  opts.train.schedule =
      schedule_from(optim::PlateauSchedule::classifier(), a.drop_patience, a.stop_patience);

  json overrides = json::object();
  for (const auto& [c, n] : opts.overrides) overrides[std::to_string(c)] = n;
  json config = {{"ssmlp", to_json(a.config)},
                 {"features", a.features},
                 {"labels", a.labels},
                 {"per_class", a.per_class},
                 {"overrides", overrides},
                 {"pool_size", a.pool_size},
                 {"max_epochs", a.max_epochs},
                 {"max_steps", a.max_steps},
                 {"schedule", schedule_json(opts.train.schedule)}};
  RunRecord rec(ctx, config, a.seed);
  rec.input(a.features);
  rec.input(a.labels);
  const auto features = load_tensor(a.features);
  const auto labels = load_labels(a.labels);
  const auto run = train_lowshot(features, labels, opts);

  save_checkpoint(rec.output(a.out), to_checkpoint(run.model, run.stats, labels.class_names));
  write_json(rec.output(with_suffix(a.out, ".split.json")), to_json(run.split));
  json history = ssmlp_history_json(run.history);
  history["unlabeled_pool_size"] = run.pool.size();
  write_json(rec.output(with_suffix(a.out, ".history.json")), history);
  rec.commit(with_suffix(a.out, ".manifest.json"));
  const auto& h = run.history;
  *ctx.out << fmt::format("labeled={} unlabeled={} epochs={} steps={} validation_oa={} stop={}\n",
                          run.split.total(), run.pool.size(), h.train_loss.size(), h.steps,
                          num(h.validation_oa.empty() ? 0.0 : h.validation_oa.back()),
                          h.stop_reason);
  return 0;
}

// ------------------------------------------------------------- classify

struct ClassifyArgs {
  std::string model;
  std::string features;
  std::string out;
  std::string probabilities;
};

void add_classify(CLI::App& app, ClassifyArgs& a) {
  auto* s = app.add_subcommand("classify", "Predict a label map from features");
  s->add_option("--model", a.model, "Classifier checkpoint")->required();
  s->add_option("--features", a.features, "Feature tensor [H, W, F]")->required();
  s->add_option("--out", a.out, "Predicted label map path")->required();
  s->add_option("--probabilities", a.probabilities, "Also write class probabilities here");
}

int run_classify(const Context& ctx, const ClassifyArgs& a) {
  RunRecord rec(ctx, {{"model", a.model}, {"features", a.features}, {"probabilities", a.probabilities}},
                std::nullopt);
  rec.input(a.model);
  rec.input(a.features);
  const auto bundle = ssmlp_from_checkpoint(load_checkpoint(a.model));
  const auto features = load_tensor(a.features);
  const auto pred = predict_map(bundle.model, features, bundle.stats, bundle.class_names);
  save_labels(rec.output(a.out), pred.labels);
  if (!a.probabilities.empty()) {
    save_tensor(rec.output(a.probabilities), pred.probabilities, "probabilities");
  }
  rec.commit(with_suffix(a.out, ".manifest.json"));
  *ctx.out << fmt::format("height={} width={} classes={}\n", pred.labels.height, pred.labels.width,
                          pred.labels.classes());
  return 0;
}

// ------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string truth;
  std::string prediction;
  std::string split;
  std::string out;
};

void add_evaluate(CLI::App& app, EvaluateArgs& a) {
  auto* s = app.add_subcommand("evaluate", "Score a predicted label map against ground truth");
  s->add_option("--truth", a.truth, "Ground-truth label map")->required();
  s->add_option("--prediction", a.prediction, "Predicted label map")->required();
  s->add_option("--split", a.split,
                "Training split; scores held-out pixels (exclusive) and all labeled pixels (inclusive)");
  s->add_option("--out", a.out, "Write the scores as JSON here");
}

json metrics_json(const std::string& mode, const ConfusionMatrix& cm, const Metrics& m) {
  json recall = json::array();
  for (double r : m.recall) recall.push_back(std::isnan(r) ? json(nullptr) : json(r));
  return {{"mode", mode},         {"pixels", cm.total()}, {"oa", m.oa},
          {"aa", m.aa},           {"kappa", m.kappa},     {"kappa_degenerate", m.kappa_degenerate},
          {"recall", recall},     {"confusion", cm.counts}};
}

int run_evaluate(const Context& ctx, const EvaluateArgs& a) {
  RunRecord rec(ctx, {{"truth", a.truth}, {"prediction", a.prediction}, {"split", a.split}}, std::nullopt);
  rec.input(a.truth);
  rec.input(a.prediction);
  const auto truth = load_labels(a.truth);
  const auto pred = load_labels(a.prediction);
  if (truth.classes() != pred.classes()) {
    throw std::invalid_argument(fmt::format("truth has {} classes, prediction has {}",
                                            truth.classes(), pred.classes()));
  }
  std::vector<std::pair<std::string, ConfusionMatrix>> results;
  if (a.split.empty()) {
    results.emplace_back("all", confusion(truth, pred));
  } else {
    rec.input(a.split);
    const auto split = split_from_json(read_json(a.split));
    results.emplace_back("exclusive", confusion(truth, pred, evaluation_pixels(truth, split, false)));
    results.emplace_back("inclusive", confusion(truth, pred, evaluation_pixels(truth, split, true)));
  }
  json report = json::array();
  for (const auto& [mode, cm] : results) {
    const auto m = metrics(cm);
    if (m.kappa_degenerate) log::warn("kappa_degenerate", {{"mode", log::value(mode)}});
    std::string line = fmt::format("OA={} AA={} kappa={}", num(m.oa), num(m.aa), num(m.kappa));
    if (mode != "all") line = fmt::format("mode={} {} pixels={}", mode, line, cm.total());
    *ctx.out << line << "\n";
    report.push_back(metrics_json(mode, cm, m));
  }
  if (!a.out.empty()) {
    write_json(rec.output(a.out), {{"class_names", truth.class_names}, {"results", report}});
    rec.commit(with_suffix(a.out, ".manifest.json"));
  }
  return 0;
}

// -------------------------------------------------------- dissimilarity

struct DissimArgs {
  std::string x;
  std::string y;
  std::size_t max_pixels = 0;
  std::uint64_t seed = 0;
  std::string out;
};

void add_dissim(CLI::App& app, DissimArgs& a) {
  auto* s = app.add_subcommand("dissimilarity", "Rank-correlation dissimilarity between two feature sets");
  s->add_option("--x", a.x, "First feature tensor")->required();
  s->add_option("--y", a.y, "Second feature tensor")->required();
  s->add_option("--max-pixels", a.max_pixels, "Subsample to this many pixels (0: all)")
      ->capture_default_str();
  s->add_option("--seed", a.seed, "Seed for the pixel subsample")->capture_default_str();
  s->add_option("--out", a.out, "Write the result as JSON here");
}

int run_dissim(const Context& ctx, const DissimArgs& a) {
  RunRecord rec(ctx, {{"x", a.x}, {"y", a.y}, {"max_pixels", a.max_pixels}}, a.seed);
  rec.input(a.x);
  rec.input(a.y);
  DissimilarityOptions opts;
  opts.max_pixels = a.max_pixels;
  opts.seed = a.seed;
  const double d = dissimilarity(load_tensor(a.x), load_tensor(a.y), opts);
  *ctx.out << fmt::format("d={}\n", num(d));
  if (!a.out.empty()) {
    write_json(rec.output(a.out), {{"dissimilarity", d}});
    rec.commit(with_suffix(a.out, ".manifest.json"));
  }
  return 0;
}

// ------------------------------------------------------------ gradcheck

struct GradArgs {
  std::size_t trials = 20;
  std::uint64_t seed = 1;
  double tolerance = 1e-5;
  std::string out;
};

void add_grad(CLI::App& app, GradArgs& a) {
  auto* s = app.add_subcommand("gradcheck", "Finite-difference checks of every kernel and both objectives");
  s->add_option("--trials", a.trials, "Randomized trials per check")->capture_default_str();
  s->add_option("--seed", a.seed, "Base seed")->capture_default_str();
  s->add_option("--tolerance", a.tolerance, "Largest accepted relative error")->capture_default_str();
  s->add_option("--out", a.out, "Write the report as JSON here");
}

int run_grad(const Context& ctx, const GradArgs& a) {
  RunRecord rec(ctx, {{"trials", a.trials}, {"tolerance", a.tolerance}}, a.seed);
  struct Row {
    std::string name;
    std::size_t trials;
    double err;
    std::string worst;
  };
  std::vector<Row> rows;
  for (const auto& s : kernel_gradient_suite(a.trials, a.seed)) {
    rows.push_back({s.kernel, s.trials, s.max_relative_error, s.worst_parameter});
  }
  auto repeat = [&](const std::string& name, auto&& check) {
    Row r{name, a.trials, 0.0, ""};
    for (std::size_t t = 0; t < a.trials; ++t) {
      const auto rep = check(optim::derive_seed(a.seed, t));
      if (rep.max_relative_error >= r.err) {
        r.err = rep.max_relative_error;
        r.worst = rep.worst_parameter;
      }
    }
    rows.push_back(r);
  };
  repeat("mcae_objective_pelu", [](std::uint64_t s) { return mcae_gradient_check(s, Activation::pelu); });
  repeat("mcae_objective_relu", [](std::uint64_t s) { return mcae_gradient_check(s, Activation::relu); });
  repeat("ssmlp_objective_labeled", [](std::uint64_t s) { return ssmlp_gradient_check(s, false); });
  repeat("ssmlp_objective_unlabeled", [](std::uint64_t s) { return ssmlp_gradient_check(s, true); });

  bool ok = true;
  json report = json::array();
  for (const auto& r : rows) {
    const bool pass = r.err < a.tolerance;
    ok = ok && pass;
    *ctx.out << fmt::format("check={} trials={} max_rel_err={:.3e} worst={} status={}\n", r.name,
                            r.trials, r.err, r.worst.empty() ? "-" : r.worst, pass ? "pass" : "fail");
    report.push_back({{"check", r.name},
                      {"trials", r.trials},
                      {"max_relative_error", r.err},
                      {"worst_parameter", r.worst},
                      {"passed", pass}});
  }
  if (!a.out.empty()) {
    write_json(rec.output(a.out), {{"checks", report}});
    rec.commit(with_suffix(a.out, ".manifest.json"));
  }
  if (!ok) throw CheckFailed("at least one gradient check exceeded the tolerance");
  return 0;
}

struct Failure {
  std::string code;
  int status;
};

Failure classify_error(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return {"usage", 2};
  if (dynamic_cast<const MissingInput*>(&e)) return {"missing_input", 1};
  if (dynamic_cast<const CheckFailed*>(&e)) return {"check_failed", 1};
  if (dynamic_cast<const FormatError*>(&e)) return {"format", 1};
  if (dynamic_cast<const NonFiniteError*>(&e)) return {"non_finite", 1};
  if (dynamic_cast<const StackTrainingAborted*>(&e) || dynamic_cast<const TrainingAborted*>(&e) ||
      dynamic_cast<const SsmlpTrainingAborted*>(&e)) {
    return {"training_aborted", 1};
  }
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return {"io", 1};
  if (dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const std::out_of_range*>(&e)) {
    return {"invalid_argument", 1};
  }
  if (dynamic_cast<const json::exception*>(&e)) return {"format", 1};
  return {"internal", 1};
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-taught feature extraction and semi-supervised classification of spectral imagery",
               "susa"};
  app.require_subcommand(1);
  app.fallthrough();
  Context ctx;
  ctx.argv = args;
  ctx.out = &out;
  app.add_option("--workers", ctx.workers, "Worker threads for kernels")->capture_default_str();

  SynthArgs synth;
  SampleArgs sample;
  SmcaeArgs smcae;
  ExtractArgs extract;
  FuseArgs fuse;
  SsmlpArgs ssmlp;
  ClassifyArgs classify;
  EvaluateArgs evaluate;
  DissimArgs dissim;
  GradArgs grad;
  add_synth(app, synth);
  add_sample(app, sample);
  add_smcae(app, smcae);
  add_extract(app, extract);
  add_fuse(app, fuse);
  add_ssmlp(app, ssmlp);
  add_classify(app, classify);
  add_evaluate(app, evaluate);
  add_dissim(app, dissim);
  add_grad(app, grad);

  std::string sub = "-";
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    if (subs.empty()) {
      for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--workers") {
          ++i;
          continue;
        }
        if (args[i].rfind("-", 0) == 0) continue;
        if (!app.get_subcommand_no_throw(args[i])) {
          err << app.help();
          err << fmt::format("error: code=usage subcommand=- message=\"unknown subcommand '{}'\"\n",
                             one_line(args[i]));
          return 2;
        }
        break;
      }
    }
    err << (subs.empty() ? app.help() : subs.front()->help());
    if (!subs.empty()) sub = subs.front()->get_name();
    err << fmt::format("error: code=usage subcommand={} message=\"{}\"\n", sub, one_line(e.what()));
    return 2;
  }
  sub = app.get_subcommands().front()->get_name();
  ctx.subcommand = sub;

  try {
    if (ctx.workers == 0) throw UsageError("--workers must be at least 1");
    set_worker_count(ctx.workers);
    if (sub == "synth") return run_synth(ctx, synth);
    if (sub == "sample-patches") return run_sample(ctx, sample);
    if (sub == "train-smcae") return run_smcae(ctx, smcae);
    if (sub == "extract") return run_extract(ctx, extract);
    if (sub == "fuse") return run_fuse(ctx, fuse);
    if (sub == "train-ssmlp") return run_ssmlp(ctx, ssmlp);
    if (sub == "classify") return run_classify(ctx, classify);
    if (sub == "evaluate") return run_evaluate(ctx, evaluate);
    if (sub == "dissimilarity") return run_dissim(ctx, dissim);
    if (sub == "gradcheck") return run_grad(ctx, grad);
    throw UsageError(fmt::format("unhandled subcommand {}", sub));
  } catch (const std::exception& e) {
    const auto f = classify_error(e);
    err << fmt::format("error: code={} subcommand={} message=\"{}\"\n", f.code, sub, one_line(e.what()));
    return f.status;
  }
}

}  // namespace susa::cli
