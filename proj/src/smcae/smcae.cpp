#include "susa/smcae/smcae.hpp"

#include <fmt/format.h>

#include "susa/numerics/log.hpp"

namespace susa {

namespace k = kernels;

void SmcaeConfig::validate() const {
  mcae.validate();
  if (stages < 1) throw std::invalid_argument("smcae: need at least one stage");
  if (pool_window < 1) throw std::invalid_argument("smcae: pool window must be positive");
}

std::size_t SmcaeStack::feature_channels() const {
  return stages.size() * config.mcae.feature_channels();
}

Tensor<float> mcae_patch_features(const McaeModel<float>& model, const Tensor<float>& patches) {
  const std::size_t n = patches.dim(0), h = patches.dim(1), w = patches.dim(2), b = patches.dim(3);
  const std::size_t fc = model.feature_channels();
  Tensor<float> out({n, h, w, fc});
  constexpr std::size_t batch = 32;
  const std::size_t in_per = h * w * b, out_per = h * w * fc;
  for (std::size_t first = 0; first < n; first += batch) {
    const std::size_t count = std::min(batch, n - first);
    Tensor<float> x({count, h, w, b});
    std::copy(patches.data() + first * in_per, patches.data() + (first + count) * in_per, x.data());
    const auto f = mcae_forward(model, x, false);
    std::copy(f.features.data(), f.features.data() + count * out_per, out.data() + first * out_per);
  }
  return out;
}

SmcaeTrainResult train_smcae_stack(const Tensor<float>& train, const Tensor<float>& validation,
                                   const SensorSpec& sensor, const SmcaeConfig& config,
                                   const McaeTrainOptions& options) {
  config.validate();
  sensor.validate();
  if (train.rank() != 4 || train.dim(3) != sensor.bands()) {
    throw ShapeError(fmt::format("smcae: patches {} do not carry the {} bands of sensor {}",
                                 shape_string(train.shape()), sensor.bands(), sensor.name));
  }
  const bool has_val = validation.rank() == 4 && validation.dim(0) > 0;
  SmcaeTrainResult result;
  result.stack.config = config;
  result.stack.sensor = sensor;

  Tensor<float> x = train;
  Tensor<float> v = has_val ? validation : Tensor<float>();
  result.stack.band_stats = standardize(x);
  if (has_val) apply_stats(v, result.stack.band_stats);

  for (std::size_t s = 0; s < config.stages; ++s) {
    const std::uint64_t seed = optim::derive_seed(options.seed, s);
    auto model = build_mcae<float>(config.mcae, x.dim(3), seed);
    McaeTrainOptions stage_options = options;
    stage_options.seed = seed;
    log::info("smcae_stage_start", {{"stage", std::to_string(s + 1)},
                                    {"input_channels", std::to_string(x.dim(3))}});
    try {
      result.histories.push_back(train_mcae(model, x, v, stage_options));
    } catch (const TrainingAborted& e) {
      result.histories.push_back(e.history);
      throw StackTrainingAborted(fmt::format("smcae stage {}: {}", s + 1, e.what()), std::move(result));
    }
    if (s + 1 < config.stages) {
      x = mcae_patch_features(model, x);
      result.stack.stage_stats.push_back(standardize(x));
      if (has_val) {
        v = mcae_patch_features(model, v);
        apply_stats(v, result.stack.stage_stats.back());
      }
    } else {
      // Statistics of the last stage are kept for completeness of the manifest.
      auto f = mcae_patch_features(model, x);
      result.stack.stage_stats.push_back(compute_stats(f));
    }
    result.stack.stages.push_back(std::move(model));
  }
  return result;
}

Tensor<float> smcae_extract(const SmcaeStack& stack, const HsiCube& cube, const ExtractOptions& options) {
  cube.validate();
  if (stack.stages.empty()) throw std::invalid_argument("smcae_extract: empty stack");
  HsiCube input;
  if (cube.spec == stack.sensor) {
    input = cube;
  } else if (options.resample) {
    input = resample_bands(cube, stack.sensor);
  } else {
    throw std::invalid_argument(fmt::format("smcae_extract: cube from sensor {} ({} bands) does not match "
                                            "stack sensor {} ({} bands) and resampling is off",
                                            cube.spec.name, cube.bands(), stack.sensor.name,
                                            stack.sensor.bands()));
  }
  const std::size_t h = input.height(), w = input.width();
  Tensor<float> x = std::move(input.values);
  standardize(x);
  std::vector<Tensor<float>> responses;
  for (const auto& stage : stack.stages) {
    auto f = extract_mcae_features(stage, x);
    standardize(f);
    responses.push_back(f);
    x = std::move(f);
  }
  auto all = fuse_sensor_features(responses).features;
  standardize(all);
  const std::size_t c = all.dim(2);
  const auto pooled = k::pool2d(all.reshaped({1, h, w, c}),
                                k::PoolSpec{k::PoolKind::mean, stack.config.pool_window, 1, k::Padding::same});
  return pooled.output.reshaped({h, w, c});
}

FusedFeatures fuse_sensor_features(const std::vector<Tensor<float>>& responses,
                                   const std::vector<std::string>& sources) {
  if (responses.empty()) throw std::invalid_argument("fuse: no feature responses");
  if (!sources.empty() && sources.size() != responses.size()) {
    throw std::invalid_argument("fuse: source names do not match responses");
  }
  FusedFeatures out;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const auto& r = responses[i];
    if (r.rank() != 3) throw ShapeError("fuse: responses must be [H,W,F], got " + shape_string(r.shape()));
    if (r.dim(0) != responses[0].dim(0) || r.dim(1) != responses[0].dim(1)) {
      throw ShapeError(fmt::format("fuse: response {} is {}x{} but response 0 is {}x{}", i, r.dim(0),
                                   r.dim(1), responses[0].dim(0), responses[0].dim(1)));
    }
    out.sources.push_back(sources.empty() ? fmt::format("input{}", i) : sources[i]);
    out.channels.push_back(r.dim(2));
  }
  if (responses.size() == 1) {
    out.features = responses[0];
    return out;
  }
  std::vector<Tensor<float>> batched;
  for (const auto& r : responses) batched.push_back(r.reshaped({1, r.dim(0), r.dim(1), r.dim(2)}));
  auto cat = k::concat_channels(std::span<const Tensor<float>>(batched));
  out.features = std::move(cat).reshaped({responses[0].dim(0), responses[0].dim(1), cat.dim(3)});
  return out;
}

Checkpoint to_checkpoint(const SmcaeStack& stack) {
  Checkpoint c;
  c.model_kind = "smcae";
  nlohmann::json stats = nlohmann::json::array();
  for (const auto& s : stack.stage_stats) stats.push_back(to_json(s));
  c.config = {{"mcae", to_json(stack.config.mcae)},
              {"stages", stack.stages.size()},
              {"pool_window", stack.config.pool_window},
              {"sensor", to_json(stack.sensor)},
              {"band_stats", to_json(stack.band_stats)},
              {"stage_stats", stats}};
  for (std::size_t s = 0; s < stack.stages.size(); ++s) {
    for (const auto& p : stack.stages[s].params) {
      Parameter<float> q = p;
      q.name = fmt::format("stage{}/{}", s + 1, p.name);
      c.params.push_back(std::move(q));
    }
  }
  return c;
}

SmcaeStack smcae_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "smcae") {
    throw FormatError(fmt::format("checkpoint holds a '{}' model, expected smcae", ckpt.model_kind));
  }
  SmcaeStack stack;
  try {
    stack.config.mcae = mcae_config_from_json(ckpt.config.at("mcae"));
    stack.config.stages = ckpt.config.at("stages").get<std::size_t>();
    stack.config.pool_window = ckpt.config.at("pool_window").get<std::size_t>();
    stack.sensor = sensor_from_json(ckpt.config.at("sensor"));
    stack.band_stats = feature_stats_from_json(ckpt.config.at("band_stats"));
    for (const auto& s : ckpt.config.at("stage_stats")) stack.stage_stats.push_back(feature_stats_from_json(s));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("smcae checkpoint: ") + e.what());
  }
  stack.config.validate();
  std::size_t at = 0;
  std::size_t bands = stack.sensor.bands();
  for (std::size_t s = 0; s < stack.config.stages; ++s) {
    Checkpoint part;
    part.model_kind = "mcae";
    part.config = {{"mcae", to_json(stack.config.mcae)}, {"bands", bands}};
    const std::string prefix = fmt::format("stage{}/", s + 1);
    const std::size_t count = build_mcae<float>(stack.config.mcae, bands, 0).params.size();
    for (std::size_t i = 0; i < count; ++i, ++at) {
      if (at >= ckpt.params.size() || ckpt.params[at].name.rfind(prefix, 0) != 0) {
        throw FormatError(fmt::format("smcae checkpoint: stage {} is missing parameters", s + 1));
      }
      Parameter<float> p = ckpt.params[at];
      p.name = p.name.substr(prefix.size());
      part.params.push_back(std::move(p));
    }
    stack.stages.push_back(mcae_from_checkpoint(part));
    bands = stack.stages.back().feature_channels();
  }
  if (at != ckpt.params.size()) throw FormatError("smcae checkpoint: unexpected extra parameters");
  return stack;
}

}  // namespace susa
