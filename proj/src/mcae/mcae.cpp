#include "susa/mcae/mcae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "susa/numerics/log.hpp"

namespace susa {

namespace k = kernels;

std::string_view to_string(Activation a) { return a == Activation::pelu ? "pelu" : "relu"; }

Activation activation_from_string(std::string_view s) {
  if (s == "pelu") return Activation::pelu;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument(fmt::format("unknown activation '{}'", s));
}

std::size_t McaeConfig::scaled(std::size_t width) const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(width) * width_scale)));
}

void McaeConfig::validate() const {
  if (encoder_widths.size() < 2) throw std::invalid_argument("mcae: need at least two encoder blocks");
  if (refinement_widths.size() + 1 != encoder_widths.size()) {
    throw std::invalid_argument(fmt::format("mcae: {} encoder blocks need {} refinement blocks, got {}",
                                            encoder_widths.size(), encoder_widths.size() - 1,
                                            refinement_widths.size()));
  }
  if (loss_weights.size() != encoder_widths.size()) {
    throw std::invalid_argument(fmt::format("mcae: {} loss weights for {} encoder blocks",
                                            loss_weights.size(), encoder_widths.size()));
  }
  for (auto w : encoder_widths) {
    if (w == 0) throw std::invalid_argument("mcae: encoder widths must be positive");
  }
  for (auto w : refinement_widths) {
    if (w == 0) throw std::invalid_argument("mcae: refinement widths must be positive");
  }
  for (double l : loss_weights) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("mcae: loss weights must be finite and >= 0");
  }
  if (!(width_scale > 0.0)) throw std::invalid_argument("mcae: width scale must be positive");
  if (batch_size == 0) throw std::invalid_argument("mcae: batch size must be positive");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("mcae: learning rate must be >= 0");
}

nlohmann::json to_json(const McaeConfig& c) {
  return {{"encoder_widths", c.encoder_widths},
          {"refinement_widths", c.refinement_widths},
          {"loss_weights", c.loss_weights},
          {"activation", std::string(to_string(c.activation))},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"width_scale", c.width_scale}};
}

McaeConfig mcae_config_from_json(const nlohmann::json& j) {
  McaeConfig c;
  c.encoder_widths = j.at("encoder_widths").get<std::vector<std::size_t>>();
  c.refinement_widths = j.at("refinement_widths").get<std::vector<std::size_t>>();
  c.loss_weights = j.at("loss_weights").get<std::vector<double>>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.width_scale = j.at("width_scale").get<double>();
  c.validate();
  return c;
}

namespace {

template <typename T>
ConvBlock add_conv(std::vector<Parameter<T>>& params, const std::string& name, std::size_t cin,
                   std::size_t cout, bool activated, Activation act, std::uint64_t seed) {
  ConvBlock b;
  b.weights = params.size();
  params.emplace_back(name + ".w", ParamKind::weight,
                      optim::xavier_init<T>({3, 3, cin, cout}, optim::derive_seed(seed, params.size())));
  b.bias = params.size();
  params.emplace_back(name + ".b", ParamKind::bias, Tensor<T>({cout}, T{1}));
  if (activated && act == Activation::pelu) {
    b.pelu_a = params.size();
    params.emplace_back(name + ".pelu_a", ParamKind::pelu, Tensor<T>({1}, T{1}));
    b.pelu_b = params.size();
    params.emplace_back(name + ".pelu_b", ParamKind::pelu, Tensor<T>({1}, T{1}));
  }
  return b;
}

template <typename T>
Tensor<T> conv_linear(const McaeModel<T>& m, const ConvBlock& b, const Tensor<T>& x) {
  return k::add_bias(k::conv2d(x, m.params[b.weights].value, k::Padding::edge), m.params[b.bias].value);
}

template <typename T>
k::PeluParams<T> pelu_of(const McaeModel<T>& m, const ConvBlock& b) {
  return {m.params[*b.pelu_a].value[0], m.params[*b.pelu_b].value[0]};
}

template <typename T>
Tensor<T> activate(const McaeModel<T>& m, const ConvBlock& b, const Tensor<T>& z) {
  if (b.pelu_a) return k::pelu(z, pelu_of(m, b));
  return k::relu(z);
}

template <typename T>
Tensor<T> activate_backward(McaeModel<T>& m, const ConvBlock& b, const Tensor<T>& z,
                            const Tensor<T>& grad) {
  if (!b.pelu_a) return k::relu_backward(z, grad);
  auto g = k::pelu_backward(z, pelu_of(m, b), grad);
  m.params[*b.pelu_a].grad[0] += g.a;
  m.params[*b.pelu_b].grad[0] += g.b;
  return std::move(g.input);
}

// Accumulates weight and bias gradients; returns the input gradient if asked.
template <typename T>
Tensor<T> conv_backward(McaeModel<T>& m, const ConvBlock& b, const Tensor<T>& input,
                        const Tensor<T>& grad_out, bool need_input) {
  auto g = k::conv2d_backward(input, m.params[b.weights].value, grad_out, k::Padding::edge, need_input);
  k::add_inplace(m.params[b.weights].grad, g.weights);
  k::add_inplace(m.params[b.bias].grad, k::bias_backward(grad_out));
  return std::move(g.input);
}

template <typename T>
void accumulate(Tensor<T>& acc, const Tensor<T>& x) {
  if (acc.empty()) acc = x;
  else k::add_inplace(acc, x);
}

constexpr k::PoolSpec kPool{k::PoolKind::max, 2, 2, k::Padding::valid};

}  // namespace

template <typename T>
McaeModel<T> build_mcae(const McaeConfig& config, std::size_t input_bands, std::uint64_t seed) {
  config.validate();
  if (input_bands == 0) throw std::invalid_argument("mcae: input bands must be positive");
  McaeModel<T> m;
  m.config = config;
  m.bands = input_bands;
  const std::size_t depth = config.depth();
  std::vector<std::size_t> enc(depth), ref(depth - 1);
  for (std::size_t i = 0; i < depth; ++i) enc[i] = config.scaled(config.encoder_widths[i]);
  for (std::size_t i = 0; i + 1 < depth; ++i) ref[i] = config.scaled(config.refinement_widths[i]);
  const Activation act = config.activation;

  std::size_t cin = input_bands;
  for (std::size_t i = 0; i < depth; ++i) {
    m.encoder.push_back(add_conv(m.params, fmt::format("enc{}", i + 1), cin, enc[i], true, act, seed));
    cin = enc[i];
  }
  std::size_t prev = enc[depth - 1];
  for (std::size_t i = 0; i + 1 < depth; ++i) {
    const std::size_t skip = enc[depth - 2 - i];
    m.refinement.push_back(add_conv(m.params, fmt::format("ref{}", i + 1), prev + skip, ref[i], true, act, seed));
    prev = ref[i];
  }
  m.head = add_conv(m.params, "head", prev, input_bands, false, act, seed);
  for (std::size_t j = 1; j < depth; ++j) {
    // Decoder stage at the resolution of encoder block j+1's input.
    const std::size_t stage = j == depth - 1 ? enc[depth - 1] : ref[depth - 2 - j];
    m.aux.push_back(add_conv(m.params, fmt::format("aux{}", j + 1), stage, enc[j - 1], false, act, seed));
  }
  return m;
}

Checkpoint to_checkpoint(const McaeModel<float>& model) {
  Checkpoint c;
  c.model_kind = "mcae";
  c.config = {{"mcae", to_json(model.config)}, {"bands", model.bands}};
  c.params = model.params;
  return c;
}

McaeModel<float> mcae_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "mcae") {
    throw FormatError(fmt::format("checkpoint holds a '{}' model, expected mcae", ckpt.model_kind));
  }
  auto m = build_mcae<float>(mcae_config_from_json(ckpt.config.at("mcae")),
                             ckpt.config.at("bands").get<std::size_t>(), 0);
  if (m.params.size() != ckpt.params.size()) {
    throw FormatError(fmt::format("checkpoint has {} parameters, architecture needs {}",
                                  ckpt.params.size(), m.params.size()));
  }
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& src = ckpt.params[i];
    auto& dst = m.params[i];
    if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
      throw FormatError(fmt::format("checkpoint parameter {} {} does not match architecture {} {}",
                                    src.name, shape_string(src.value.shape()), dst.name,
                                    shape_string(dst.value.shape())));
    }
    dst.value = src.value;
    dst.trainable = src.trainable;
  }
  return m;
}

template <typename T>
McaeForward<T> mcae_forward(const McaeModel<T>& m, const Tensor<T>& batch, bool with_heads) {
  if (batch.rank() != 4) throw ShapeError("mcae: batch must be [N,H,W,B], got " + shape_string(batch.shape()));
  if (batch.dim(3) != m.bands) {
    throw ShapeError(fmt::format("mcae: batch has {} bands, model expects {}", batch.dim(3), m.bands));
  }
  const std::size_t mult = m.config.spatial_multiple();
  if (batch.dim(1) % mult || batch.dim(2) % mult) {
    throw ShapeError(fmt::format("mcae: spatial dims {}x{} must be multiples of {}", batch.dim(1),
                                 batch.dim(2), mult));
  }
  const std::size_t depth = m.encoder.size();
  McaeForward<T> f;
  f.with_heads = with_heads;
  f.targets.push_back(batch);
  for (std::size_t i = 0; i < depth; ++i) {
    f.enc_pre.push_back(conv_linear(m, m.encoder[i], f.targets[i]));
    f.enc_act.push_back(activate(m, m.encoder[i], f.enc_pre[i]));
    if (i + 1 < depth) {
      f.pools.push_back(k::pool2d(f.enc_act[i], kPool));
      f.targets.push_back(f.pools[i].output);
    }
  }
  f.bottleneck = f.enc_act.back();
  const Tensor<T>* prev = &f.bottleneck;
  for (std::size_t i = 0; i + 1 < depth; ++i) {
    f.ref_in.push_back(k::concat_channels(k::upsample_nearest2d(*prev, 2), f.enc_act[depth - 2 - i]));
    f.ref_pre.push_back(conv_linear(m, m.refinement[i], f.ref_in[i]));
    f.ref_act.push_back(activate(m, m.refinement[i], f.ref_pre[i]));
    prev = &f.ref_act[i];
  }
  f.features = f.ref_act.back();
  if (with_heads) {
    f.recons.push_back(conv_linear(m, m.head, f.features));
    for (std::size_t j = 1; j < depth; ++j) {
      const Tensor<T>& stage = j == depth - 1 ? f.bottleneck : f.ref_act[depth - 2 - j];
      f.recons.push_back(conv_linear(m, m.aux[j - 1], stage));
    }
  }
  return f;
}

namespace {

template <typename A>
A weighted_sum(std::span<const A> layer_mse, std::span<const double> weights) {
  if (layer_mse.size() != weights.size()) {
    throw std::invalid_argument(fmt::format("mcae_loss: {} layer losses for {} weights",
                                            layer_mse.size(), weights.size()));
  }
  A total = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) total += static_cast<A>(weights[j]) * layer_mse[j];
  return total;
}

}  // namespace

double mcae_loss(std::span<const double> layer_mse, std::span<const double> weights) {
  return weighted_sum(layer_mse, weights);
}

template <typename T>
McaeObjective<T> mcae_objective(const McaeForward<T>& f, std::span<const double> weights) {
  if (!f.with_heads) throw std::invalid_argument("mcae_objective: forward pass ran without heads");
  if (weights.size() != f.recons.size()) {
    throw std::invalid_argument(fmt::format("mcae_objective: {} weights for {} reconstruction pairs",
                                            weights.size(), f.recons.size()));
  }
  McaeObjective<T> o;
  o.grad_recons.resize(weights.size());
  o.grad_targets.resize(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (weights[j] == 0.0) {
      o.layer_mse.push_back(k::mse_value(f.recons[j], f.targets[j]));
      continue;
    }
    auto l = k::loss_mse(f.recons[j], f.targets[j]);
    o.layer_mse.push_back(l.value);
    k::scale_inplace(l.grad, static_cast<T>(weights[j]));
    if (j > 0) o.grad_targets[j] = k::scaled(l.grad, T{-1});
    o.grad_recons[j] = std::move(l.grad);
  }
  o.value = weighted_sum(std::span<const Accum<T>>(o.layer_mse), weights);
  return o;
}

template <typename T>
void mcae_backward(McaeModel<T>& m, const McaeForward<T>& f, const McaeObjective<T>& o) {
  const std::size_t depth = m.encoder.size();
  std::vector<Tensor<T>> g_ref(depth - 1), g_enc(depth), g_pooled(depth - 1);

  if (!o.grad_recons[0].empty()) {
    g_ref[depth - 2] = conv_backward(m, m.head, f.features, o.grad_recons[0], true);
  }
  for (std::size_t j = 1; j < depth; ++j) {
    if (o.grad_recons[j].empty()) continue;
    const bool deepest = j == depth - 1;
    const Tensor<T>& stage = deepest ? f.bottleneck : f.ref_act[depth - 2 - j];
    auto g = conv_backward(m, m.aux[j - 1], stage, o.grad_recons[j], true);
    accumulate(deepest ? g_enc[depth - 1] : g_ref[depth - 2 - j], g);
    accumulate(g_pooled[j - 1], o.grad_targets[j]);
  }

  for (std::size_t ii = depth - 1; ii-- > 0;) {
    if (g_ref[ii].empty()) continue;
    auto gz = activate_backward(m, m.refinement[ii], f.ref_pre[ii], g_ref[ii]);
    auto gin = conv_backward(m, m.refinement[ii], f.ref_in[ii], gz, true);
    const std::size_t up_channels = ii == 0 ? f.bottleneck.dim(3) : f.ref_act[ii - 1].dim(3);
    auto [g_up, g_skip] = k::split_channels(gin, up_channels);
    accumulate(ii == 0 ? g_enc[depth - 1] : g_ref[ii - 1], k::upsample_nearest2d_backward(g_up, 2));
    accumulate(g_enc[depth - 2 - ii], g_skip);
  }

  for (std::size_t i = depth; i-- > 0;) {
    Tensor<T> g = std::move(g_enc[i]);
    if (i + 1 < depth && !g_pooled[i].empty()) accumulate(g, k::pool2d_backward(f.pools[i], g_pooled[i], kPool));
    if (g.empty()) continue;
    auto gz = activate_backward(m, m.encoder[i], f.enc_pre[i], g);
    auto gin = conv_backward(m, m.encoder[i], f.targets[i], gz, i > 0);
    if (i > 0) accumulate(g_pooled[i - 1], gin);
  }
}

template <typename T>
McaeObjective<T> mcae_gradients(McaeModel<T>& m, const Tensor<T>& batch) {
  zero_grads(std::span<Parameter<T>>(m.params));
  const auto f = mcae_forward(m, batch, true);
  auto o = mcae_objective(f, m.config.loss_weights);
  mcae_backward(m, f, o);
  return o;
}

Tensor<float> extract_mcae_features(const McaeModel<float>& m, const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("extract: image must be [H,W,F], got " + shape_string(image.shape()));
  if (image.dim(2) != m.bands) {
    throw ShapeError(fmt::format("extract: image has {} channels, model expects {}", image.dim(2), m.bands));
  }
  const std::size_t h = image.dim(0), w = image.dim(1), mult = m.config.spatial_multiple();
  const std::size_t hp = (h + mult - 1) / mult * mult, wp = (w + mult - 1) / mult * mult;
  const auto padded = k::reflect_pad_to(image.reshaped({1, h, w, image.dim(2)}), hp, wp);
  const auto f = mcae_forward(m, padded, false);
  return k::crop_to(f.features, h, w).reshaped({h, w, m.feature_channels()});
}

namespace {

Tensor<float> gather(const Tensor<float>& patches, std::span<const std::size_t> idx) {
  const std::size_t per = patches.size() / patches.dim(0);
  Tensor<float> out({idx.size(), patches.dim(1), patches.dim(2), patches.dim(3)});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(patches.data() + idx[i] * per, patches.data() + (idx[i] + 1) * per, out.data() + i * per);
  }
  return out;
}

}  // namespace

McaeLoss evaluate_mcae(const McaeModel<float>& model, const Tensor<float>& patches) {
  const std::size_t n = patches.dim(0);
  const std::size_t depth = model.encoder.size();
  McaeLoss out;
  out.layer_mse.assign(depth, 0.0);
  const std::size_t batch = std::min<std::size_t>(std::max<std::size_t>(model.config.batch_size, 1), 64);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t b = 0; b < n; b += batch) {
    const std::size_t count = std::min(batch, n - b);
    const auto f = mcae_forward(model, gather(patches, std::span(idx).subspan(b, count)), true);
    for (std::size_t j = 0; j < depth; ++j) {
      out.layer_mse[j] += k::mse_value(f.recons[j], f.targets[j]) * static_cast<double>(count);
    }
  }
  for (auto& v : out.layer_mse) v /= static_cast<double>(n);
  out.value = mcae_loss(out.layer_mse, model.config.loss_weights);
  return out;
}

McaeHistory train_mcae(McaeModel<float>& model, const Tensor<float>& train,
                       const Tensor<float>& validation, const McaeTrainOptions& options) {
  options.schedule.validate();
  if (train.rank() != 4 || train.dim(0) == 0) throw std::invalid_argument("train_mcae: empty training set");
  const bool has_val = validation.rank() == 4 && validation.dim(0) > 0;
  const std::size_t n = train.dim(0);
  const std::size_t batch = std::min(model.config.batch_size, n);
  optim::Nadam<float> opt(optim::NadamConfig{.learning_rate = model.config.learning_rate});
  optim::PlateauSchedule schedule = options.schedule;
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  McaeHistory h;
  auto last_good = model.params;

  for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t seen = 0;
    bool step_limit = false;
    for (std::size_t b = 0; b < n; b += batch) {
      const std::size_t count = std::min(batch, n - b);
      const auto x = gather(train, std::span(order).subspan(b, count));
      const auto o = mcae_gradients(model, x);
      if (!std::isfinite(o.value)) {
        model.params = last_good;
        h.stop_reason = "non_finite_loss";
        throw TrainingAborted(fmt::format("train_mcae: non-finite loss at step {}", h.steps), h);
      }
      try {
        opt.step(model.params);
      } catch (const NonFiniteError& e) {
        model.params = last_good;
        h.stop_reason = "non_finite_gradient";
        throw TrainingAborted(fmt::format("train_mcae: {} at step {}", e.what(), h.steps), h);
      }
      h.step_loss.push_back(o.value);
      sum += o.value * static_cast<double>(count);
      seen += count;
      ++h.steps;
      if (options.max_steps > 0 && h.steps >= options.max_steps) {
        step_limit = true;
        break;
      }
    }
    const double train_loss = sum / static_cast<double>(seen);
    const auto val = has_val ? evaluate_mcae(model, validation) : McaeLoss{train_loss, {}};
    if (!std::isfinite(val.value)) {
      model.params = last_good;
      h.stop_reason = "non_finite_validation_loss";
      throw TrainingAborted("train_mcae: non-finite validation loss", h);
    }
    last_good = model.params;
    h.train_loss.push_back(train_loss);
    h.validation_loss.push_back(val.value);
    h.validation_layer_mse.push_back(val.layer_mse);
    h.learning_rate.push_back(opt.learning_rate());
    log::info("mcae_epoch", {{"epoch", std::to_string(epoch + 1)},
                             {"train_loss", log::value(train_loss)},
                             {"val_loss", log::value(val.value)},
                             {"lr", log::value(opt.learning_rate())}});
    if (options.on_epoch) options.on_epoch(epoch + 1, train_loss, val.value);
    if (step_limit) {
      h.stop_reason = "max_steps";
      return h;
    }
    const auto action = optim::plateau_update(schedule, val.value);
    if (action == optim::PlateauAction::stop) {
      h.stop_reason = "plateau";
      return h;
    }
    if (action == optim::PlateauAction::drop_lr) opt.set_learning_rate(opt.learning_rate() / schedule.drop_factor);
  }
  h.stop_reason = "max_epochs";
  return h;
}

GradCheckReport mcae_gradient_check(std::uint64_t seed, Activation activation,
                                    const GradCheckOptions& options) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> width(2, 4), bands(1, 3), batch(1, 2);
  std::uniform_real_distribution<double> unit(-1.0, 1.0), positive(0.5, 1.5), lambda(0.05, 1.0);
  McaeConfig cfg;
  cfg.encoder_widths = {width(rng), width(rng), width(rng), width(rng)};
  cfg.refinement_widths = {width(rng), width(rng), width(rng)};
  cfg.loss_weights = {1.0, lambda(rng), lambda(rng), lambda(rng)};
  cfg.activation = activation;
  auto model = build_mcae<double>(cfg, bands(rng), seed);
  // Move biases and PELU parameters off their initial ones so every code path is exercised.
  for (auto& p : model.params) {
    if (p.kind == ParamKind::bias) for (auto& v : p.value.values()) v = 0.2 * unit(rng);
    if (p.kind == ParamKind::pelu) for (auto& v : p.value.values()) v = positive(rng);
  }
  Tensor<double> x({batch(rng), 8, 8, model.bands});
  for (auto& v : x.values()) v = unit(rng);
  mcae_gradients(model, x);
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : model.params) ptrs.push_back(&p);
  // As in the perceptron check, the loss is re-evaluated in extended
  // precision and returned relative to the unperturbed value, because some
  // gradient entries are near 1e-8.
  const auto xe = x.cast<long double>();
  auto extended_loss = [&] {
    return mcae_objective(mcae_forward(cast_model<long double>(model), xe, true), model.config.loss_weights).value;
  };
  const long double base_loss = extended_loss();
  auto loss = [&] { return static_cast<double>(extended_loss() - base_loss); };
  return grad_check(loss, ptrs, options);
}

#define SUSA_INSTANTIATE(T)                                                                      \
  template McaeModel<T> build_mcae<T>(const McaeConfig&, std::size_t, std::uint64_t);             \
  template McaeForward<T> mcae_forward<T>(const McaeModel<T>&, const Tensor<T>&, bool);           \
  template McaeObjective<T> mcae_objective<T>(const McaeForward<T>&, std::span<const double>);    \
  template void mcae_backward<T>(McaeModel<T>&, const McaeForward<T>&, const McaeObjective<T>&); \
  template McaeObjective<T> mcae_gradients<T>(McaeModel<T>&, const Tensor<T>&);

SUSA_INSTANTIATE(float)
SUSA_INSTANTIATE(double)
#undef SUSA_INSTANTIATE

template McaeForward<long double> mcae_forward<long double>(const McaeModel<long double>&,
                                                            const Tensor<long double>&, bool);
template McaeObjective<long double> mcae_objective<long double>(const McaeForward<long double>&,
                                                                std::span<const double>);

}  // namespace susa
