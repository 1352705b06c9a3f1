#include "susa/ssmlp/ssmlp.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "susa/eval/eval.hpp"
#include "susa/numerics/kernels.hpp"
#include "susa/numerics/log.hpp"

namespace susa {

namespace k = kernels;

void SsmlpConfig::validate() const {
  if (hidden_widths.empty()) throw std::invalid_argument("ssmlp: need at least one hidden layer");
  for (auto w : hidden_widths) {
    if (w == 0) throw std::invalid_argument("ssmlp: hidden widths must be positive");
  }
  if (recon_weights.size() != hidden_widths.size() + 2) {
    throw std::invalid_argument(fmt::format("ssmlp: {} hidden layers need {} reconstruction weights "
                                            "(data layer, hidden layers, class layer), got {}",
                                            hidden_widths.size(), hidden_widths.size() + 2,
                                            recon_weights.size()));
  }
  for (double l : recon_weights) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("ssmlp: reconstruction weights must be finite and >= 0");
  }
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("ssmlp: learning rate must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("ssmlp: batch size must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("ssmlp: weight decay must be >= 0");
  if (!(unlabeled_ratio >= 0.0)) throw std::invalid_argument("ssmlp: unlabeled ratio must be >= 0");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw std::invalid_argument("ssmlp: validation fraction must lie in [0, 1)");
  }
  if (!(decoder_noise >= 0.0)) throw std::invalid_argument("ssmlp: decoder noise must be >= 0");
}

nlohmann::json to_json(const SsmlpConfig& c) {
  return {{"hidden_widths", c.hidden_widths},
          {"recon_weights", c.recon_weights},
          {"activation", std::string(to_string(c.activation))},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay},
          {"unlabeled_ratio", c.unlabeled_ratio},
          {"validation_fraction", c.validation_fraction},
          {"decoder_noise", c.decoder_noise}};
}

SsmlpConfig ssmlp_config_from_json(const nlohmann::json& j) {
  SsmlpConfig c;
  c.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
  c.recon_weights = j.at("recon_weights").get<std::vector<double>>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.unlabeled_ratio = j.at("unlabeled_ratio").get<double>();
  c.validation_fraction = j.at("validation_fraction").get<double>();
  c.decoder_noise = j.at("decoder_noise").get<double>();
  c.validate();
  return c;
}

template <typename T>
std::size_t SsmlpModel<T>::level_width(std::size_t j) const {
  if (j == 0) return features;
  if (j <= config.depth()) return config.hidden_widths[j - 1];
  return classes;
}

namespace {

template <typename T>
DenseBlock add_dense(std::vector<Parameter<T>>& params, const std::string& name, std::size_t fin,
                     std::size_t fout, bool activated, Activation act, std::uint64_t seed) {
  DenseBlock b;
  b.weights = params.size();
  params.emplace_back(name + ".w", ParamKind::weight,
                      optim::xavier_init<T>({fin, fout}, optim::derive_seed(seed, params.size())));
  b.bias = params.size();
  params.emplace_back(name + ".b", ParamKind::bias, Tensor<T>({fout}, T{1}));
  if (activated && act == Activation::pelu) {
    b.pelu_a = params.size();
    params.emplace_back(name + ".pelu_a", ParamKind::pelu, Tensor<T>({1}, T{1}));
    b.pelu_b = params.size();
    params.emplace_back(name + ".pelu_b", ParamKind::pelu, Tensor<T>({1}, T{1}));
  }
  return b;
}

template <typename T>
k::PeluParams<T> pelu_of(const std::vector<Parameter<T>>& params, const DenseBlock& b) {
  return {params[*b.pelu_a].value[0], params[*b.pelu_b].value[0]};
}

template <typename T>
Tensor<T> activate(const std::vector<Parameter<T>>& params, const DenseBlock& b, const Tensor<T>& pre) {
  return b.pelu_a ? k::pelu(pre, pelu_of(params, b)) : k::relu(pre);
}

// Returns the gradient at the pre-activation and stores PELU gradients.
template <typename T>
Tensor<T> activate_backward(std::vector<Parameter<T>>& params, const DenseBlock& b, const Tensor<T>& pre,
                            const Tensor<T>& grad) {
  if (!b.pelu_a) return k::relu_backward(pre, grad);
  auto g = k::pelu_backward(pre, pelu_of(params, b), grad);
  params[*b.pelu_a].grad = Tensor<T>({1}, g.a);
  params[*b.pelu_b].grad = Tensor<T>({1}, g.b);
  return std::move(g.input);
}

template <typename T>
Tensor<T> apply_dense(const std::vector<Parameter<T>>& params, const DenseBlock& b, const Tensor<T>& x) {
  return k::dense(x, params[b.weights].value, params[b.bias].value);
}

template <typename T>
Tensor<T> dense_step_backward(std::vector<Parameter<T>>& params, const DenseBlock& b, const Tensor<T>& x,
                              const Tensor<T>& grad, bool need_input) {
  auto g = k::dense_backward(x, params[b.weights].value, grad, need_input);
  params[b.weights].grad = std::move(g.weights);
  params[b.bias].grad = std::move(g.bias);
  return std::move(g.input);
}

template <typename T>
void zero_grads(std::vector<Parameter<T>>& params, const DenseBlock& b) {
  for (auto i : {std::optional<std::size_t>(b.weights), std::optional<std::size_t>(b.bias), b.pelu_a, b.pelu_b}) {
    if (i) params[*i].grad = Tensor<T>(params[*i].value.shape(), T{0});
  }
}

Tensor<float> gather_rows(const Tensor<float>& x, std::span<const std::size_t> idx) {
  const std::size_t f = x.dim(1);
  Tensor<float> out({idx.size(), f});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(x.data() + idx[i] * f, x.data() + (idx[i] + 1) * f, out.data() + i * f);
  }
  return out;
}

}  // namespace

template <typename T>
SsmlpModel<T> build_ssmlp(const SsmlpConfig& config, std::size_t input_features, std::size_t classes,
                          std::uint64_t seed) {
  config.validate();
  if (input_features == 0) throw std::invalid_argument("ssmlp: input features must be positive");
  if (classes < 2) throw std::invalid_argument(fmt::format("ssmlp: need at least 2 classes, got {}", classes));
  SsmlpModel<T> m;
  m.config = config;
  m.features = input_features;
  m.classes = classes;
  const Activation act = config.activation;
  const std::size_t depth = config.depth();
  std::size_t fin = input_features;
  for (std::size_t i = 0; i < depth; ++i) {
    m.encoder.push_back(add_dense(m.params, fmt::format("enc{}", i + 1), fin, config.hidden_widths[i], true, act, seed));
    fin = config.hidden_widths[i];
  }
  m.head = add_dense(m.params, "head", fin, classes, false, act, seed);
  m.decoder.resize(depth + 2);
  for (std::size_t j = depth + 2; j-- > 0;) {
    const std::size_t in = j == depth + 1 ? classes : m.level_width(j + 1);
    m.decoder[j] = add_dense(m.params, fmt::format("rec{}", j), in, m.level_width(j), j > 0, act, seed);
  }
  return m;
}

template <typename T>
SsmlpForward<T> ssmlp_forward(const SsmlpModel<T>& model, const Tensor<T>& x, const Tensor<T>* decoder_noise) {
  if (x.rank() != 2 || x.dim(1) != model.features) {
    throw ShapeError(fmt::format("ssmlp: input {} does not match the model's {} features",
                                 shape_string(x.shape()), model.features));
  }
  const std::size_t depth = model.config.depth();
  SsmlpForward<T> f;
  f.input = x;
  f.act.push_back(x);
  for (std::size_t i = 0; i < depth; ++i) {
    f.pre.push_back(apply_dense(model.params, model.encoder[i], f.act.back()));
    f.act.push_back(activate(model.params, model.encoder[i], f.pre.back()));
  }
  f.logits = apply_dense(model.params, model.head, f.act.back());
  f.probabilities = k::softmax(f.logits);
  f.decoder_input = f.probabilities;
  if (decoder_noise) {
    if (decoder_noise->shape() != f.probabilities.shape()) {
      throw ShapeError("ssmlp: decoder noise " + shape_string(decoder_noise->shape()) +
                       " does not match probabilities " + shape_string(f.probabilities.shape()));
    }
    k::add_inplace(f.decoder_input, *decoder_noise);
  }
  f.rec_pre.resize(depth + 2);
  f.recons.resize(depth + 2);
  const Tensor<T>* prev = &f.decoder_input;
  for (std::size_t j = depth + 2; j-- > 0;) {
    f.rec_pre[j] = apply_dense(model.params, model.decoder[j], *prev);
    f.recons[j] = j > 0 ? activate(model.params, model.decoder[j], f.rec_pre[j]) : f.rec_pre[j];
    prev = &f.recons[j];
  }
  return f;
}

namespace {

template <typename A>
A weighted_sum(std::span<const A> layer_mse, std::span<const double> weights) {
  if (layer_mse.size() != weights.size()) {
    throw std::invalid_argument(fmt::format("ssmlp: {} reconstruction weights for {} layers", weights.size(),
                                            layer_mse.size()));
  }
  A total = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (weights[j] != 0.0) total += static_cast<A>(weights[j]) * layer_mse[j];
  }
  return total;
}

}  // namespace

double ssmlp_recon_loss(std::span<const double> layer_mse, std::span<const double> weights) {
  return weighted_sum(layer_mse, weights);
}

template <typename T>
SsmlpObjective<T> ssmlp_objective(const SsmlpForward<T>& f, std::span<const std::size_t> labels,
                                  std::span<const double> weights, const Tensor<T>* class_target) {
  const std::size_t n = f.input.dim(0);
  const std::size_t levels = f.recons.size();
  const std::size_t classes = f.logits.dim(1);
  if (labels.size() != n) {
    throw std::invalid_argument(fmt::format("ssmlp: {} labels for {} samples", labels.size(), n));
  }
  if (weights.size() != levels) {
    throw std::invalid_argument(fmt::format("ssmlp: {} reconstruction weights for {} levels", weights.size(), levels));
  }
  std::vector<std::size_t> rows, ids;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == kUnlabeled) continue;
    if (labels[i] >= classes) {
      throw std::invalid_argument(fmt::format("ssmlp: label {} outside {} classes", labels[i], classes));
    }
    rows.push_back(i);
    ids.push_back(labels[i]);
  }
  const bool any_weight = std::any_of(weights.begin(), weights.end(), [](double w) { return w != 0.0; });
  if (rows.empty() && !any_weight) {
    throw std::invalid_argument("ssmlp: unlabeled batch with every reconstruction weight zero has no objective");
  }

  SsmlpObjective<T> o;
  o.labeled = rows.size();
  o.grad_logits = Tensor<T>(f.logits.shape(), T{0});
  if (!rows.empty()) {
    Tensor<T> sub({rows.size(), classes});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy(f.logits.data() + rows[r] * classes, f.logits.data() + (rows[r] + 1) * classes, sub.data() + r * classes);
    }
    auto ce = k::loss_softmax_crossentropy(sub, std::span<const std::size_t>(ids));
    o.class_loss = ce.value;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy(ce.grad.data() + r * classes, ce.grad.data() + (r + 1) * classes, o.grad_logits.data() + rows[r] * classes);
    }
  }
  o.grad_recons.resize(levels);
  for (std::size_t j = 0; j < levels; ++j) {
    const Tensor<T>& target = j == 0                ? f.input
                              : j + 1 < levels      ? f.act[j]
                              : class_target        ? *class_target
                                                    : f.probabilities;
    if (weights[j] == 0.0) {
      o.layer_mse.push_back(k::mse_value(f.recons[j], target));
      continue;
    }
    auto l = k::loss_mse(f.recons[j], target);
    o.layer_mse.push_back(l.value);
    k::scale_inplace(l.grad, static_cast<T>(weights[j]));
    o.grad_recons[j] = std::move(l.grad);
  }
  o.recon_loss = weighted_sum(std::span<const Accum<T>>(o.layer_mse), weights);
  o.value = o.class_loss + o.recon_loss;
  return o;
}

template <typename T>
void ssmlp_backward(SsmlpModel<T>& model, const SsmlpForward<T>& f, const SsmlpObjective<T>& o) {
  const std::size_t depth = model.config.depth();
  const std::size_t levels = depth + 2;
  auto& params = model.params;
  Tensor<T> grad_logits = o.grad_logits;

  const bool any_recon = std::any_of(o.grad_recons.begin(), o.grad_recons.end(),
                                     [](const Tensor<T>& g) { return g.size() > 0; });
  if (any_recon) {
    // Decoder, from the data layer back up to its input.
    Tensor<T> carry;
    for (std::size_t j = 0; j < levels; ++j) {
      Tensor<T> g = std::move(carry);
      if (o.grad_recons[j].size() > 0) {
        if (g.size() == 0) g = o.grad_recons[j];
        else k::add_inplace(g, o.grad_recons[j]);
      }
      if (g.size() == 0) g = Tensor<T>(f.recons[j].shape(), T{0});
      if (j > 0) g = activate_backward(params, model.decoder[j], f.rec_pre[j], g);
      const Tensor<T>& in = j + 1 == levels ? f.decoder_input : f.recons[j + 1];
      carry = dense_step_backward(params, model.decoder[j], in, g, true);
    }
    k::add_inplace(grad_logits, k::softmax_backward(f.probabilities, carry));
  } else {
    for (const auto& b : model.decoder) zero_grads(params, b);
  }

  Tensor<T> g = dense_step_backward(params, model.head, f.act[depth], grad_logits, true);
  for (std::size_t i = depth; i-- > 0;) {
    // Hidden layer i+1 is also a reconstruction target.
    const auto& gt = o.grad_recons[i + 1];
    if (gt.size() > 0) k::add_inplace(g, k::scaled(gt, T{-1}));
    g = activate_backward(params, model.encoder[i], f.pre[i], g);
    g = dense_step_backward(params, model.encoder[i], f.act[i], g, i > 0);
  }
}

template <typename T>
SsmlpObjective<T> ssmlp_gradients(SsmlpModel<T>& model, const Tensor<T>& x, std::span<const std::size_t> labels,
                                  const Tensor<T>* decoder_noise) {
  const auto f = ssmlp_forward(model, x, decoder_noise);
  auto o = ssmlp_objective(f, labels, model.config.recon_weights);
  ssmlp_backward(model, f, o);
  return o;
}

namespace {

const SsmlpModel<long double>& to_extended(const SsmlpModel<double>& m, SsmlpModel<long double>& ext) {
  ext.params.clear();
  for (const auto& p : m.params) ext.params.emplace_back(p.name, p.kind, p.value.cast<long double>());
  return ext;
}

}  // namespace

GradCheckReport ssmlp_gradient_check(std::uint64_t seed, bool unlabeled_only, const GradCheckOptions& options) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> features(3, 6), classes(2, 4), batch(3, 5);
  std::uniform_real_distribution<double> unit(-1.0, 1.0), positive(0.5, 1.5), lambda(0.05, 1.0);
  SsmlpConfig cfg;
  cfg.hidden_widths = {16, 9, 5, 4};
  for (auto& l : cfg.recon_weights) l = lambda(rng);
  auto model = build_ssmlp<double>(cfg, features(rng), classes(rng), seed);
  for (auto& p : model.params) {
    if (p.kind == ParamKind::bias) for (auto& v : p.value.values()) v = 0.2 * unit(rng);
    if (p.kind == ParamKind::pelu) for (auto& v : p.value.values()) v = positive(rng);
  }
  const std::size_t n = batch(rng);
  Tensor<double> x({n, model.features});
  for (auto& v : x.values()) v = unit(rng);
  std::vector<std::size_t> labels(n, kUnlabeled);
  if (!unlabeled_only) {
    std::uniform_int_distribution<std::size_t> cls(0, model.classes - 1);
    for (std::size_t i = 0; i < n; ++i) {
      if (i == 0 || unit(rng) > -0.3) labels[i] = cls(rng);
    }
  }
  ssmlp_gradients(model, x, labels);
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : model.params) ptrs.push_back(&p);
  // The loss is re-evaluated in extended precision: several entries have
  // gradients near 1e-8, where double rounding in the forward pass would
  // swamp the difference quotient.
  SsmlpModel<long double> ext;
  ext.config = model.config;
  ext.features = model.features;
  ext.classes = model.classes;
  ext.encoder = model.encoder;
  ext.head = model.head;
  ext.decoder = model.decoder;
  const auto xe = x.cast<long double>();
  const auto base = ssmlp_forward(to_extended(model, ext), xe);
  const Tensor<long double> frozen = base.probabilities;
  const long double base_loss = ssmlp_objective(base, labels, model.config.recon_weights, &frozen).value;
  // Returned relative to the unperturbed loss so the difference survives the
  // conversion to double.
  auto loss = [&] {
    const auto f = ssmlp_forward(to_extended(model, ext), xe);
    return static_cast<double>(ssmlp_objective(f, labels, model.config.recon_weights, &frozen).value - base_loss);
  };
  return grad_check(loss, ptrs, options);
}

StratifiedSplit stratified_split(std::span<const std::size_t> labels, std::size_t classes, double fraction,
                                 std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw std::invalid_argument(fmt::format("stratified_split: label {} outside {} classes", labels[i], classes));
    }
    by_class[labels[i]].push_back(i);
  }
  std::mt19937_64 rng(seed);
  StratifiedSplit s;
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t v = idx.size() < 2 ? 0 : static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9));
    v = std::min(v, idx.size() - (idx.empty() ? 0 : 1));
    s.validation.insert(s.validation.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(v));
    s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(v), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  return s;
}

Tensor<float> ssmlp_predict_proba(const SsmlpModel<float>& model, const Tensor<float>& features) {
  if (features.rank() != 2 || features.dim(1) != model.features) {
    throw ShapeError(fmt::format("ssmlp: features {} do not match the model's {} inputs",
                                 shape_string(features.shape()), model.features));
  }
  const std::size_t n = features.dim(0), c = model.classes;
  Tensor<float> out({n, c});
  constexpr std::size_t batch = 4096;
  for (std::size_t first = 0; first < n; first += batch) {
    const std::size_t count = std::min(batch, n - first);
    Tensor<float> x({count, model.features});
    std::copy(features.data() + first * model.features, features.data() + (first + count) * model.features, x.data());
    for (std::size_t i = 0; i < model.config.depth(); ++i) {
      x = activate(model.params, model.encoder[i], apply_dense(model.params, model.encoder[i], x));
    }
    const auto p = k::softmax(apply_dense(model.params, model.head, x));
    std::copy(p.data(), p.data() + count * c, out.data() + first * c);
  }
  return out;
}

std::vector<std::size_t> argmax_rows(const Tensor<float>& scores) {
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  std::vector<std::size_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = scores.data() + i * c;
    for (std::size_t j = 1; j < c; ++j) {
      if (row[j] > row[out[i]]) out[i] = j;
    }
  }
  return out;
}

namespace {

Metrics fold_metrics(const SsmlpModel<float>& model, const Tensor<float>& x, std::span<const std::size_t> labels,
                     std::span<const std::size_t> idx) {
  const auto pred = argmax_rows(ssmlp_predict_proba(model, gather_rows(x, idx)));
  ConfusionMatrix cm(model.classes);
  for (std::size_t i = 0; i < idx.size(); ++i) ++cm.at(labels[idx[i]], pred[i]);
  return metrics(cm);
}

}  // namespace

SsmlpHistory train_ssmlp(SsmlpModel<float>& model, const Tensor<float>& labeled, std::span<const std::size_t> labels,
                         const Tensor<float>& unlabeled, const SsmlpTrainOptions& options) {
  options.schedule.validate();
  const auto& cfg = model.config;
  if (labeled.rank() != 2 || labeled.dim(1) != model.features) {
    throw ShapeError(fmt::format("train_ssmlp: labeled features {} do not match the model's {} inputs",
                                 shape_string(labeled.shape()), model.features));
  }
  if (labels.size() != labeled.dim(0)) {
    throw std::invalid_argument(fmt::format("train_ssmlp: {} labels for {} samples", labels.size(), labeled.dim(0)));
  }
  const std::size_t pool = unlabeled.rank() == 2 ? unlabeled.dim(0) : 0;
  if (pool > 0 && unlabeled.dim(1) != model.features) {
    throw ShapeError(fmt::format("train_ssmlp: unlabeled features {} do not match the model's {} inputs",
                                 shape_string(unlabeled.shape()), model.features));
  }

  SsmlpHistory h;
  const auto split = stratified_split(labels, model.classes, cfg.validation_fraction, optim::derive_seed(options.seed, 1));
  h.train_index = split.train;
  h.validation_index = split.validation;
  if (split.train.empty()) throw std::invalid_argument("train_ssmlp: the training fold is empty");
  std::vector<std::size_t> per_class(model.classes, 0);
  for (auto i : split.train) ++per_class[labels[i]];
  for (std::size_t c = 0; c < model.classes; ++c) {
    if (per_class[c] == 0) {
      h.absent_classes.push_back(c);
      log::warn("ssmlp_class_absent", {{"class", std::to_string(c + 1)}});
    }
  }

  optim::Nadam<float> opt(optim::NadamConfig{.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
  optim::PlateauSchedule schedule = options.schedule;
  std::mt19937_64 shuffle_rng(optim::derive_seed(options.seed, 2));
  std::mt19937_64 pool_rng(optim::derive_seed(options.seed, 3));
  std::mt19937_64 noise_rng(optim::derive_seed(options.seed, 4));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> order = split.train;
  std::vector<std::size_t> pool_order(pool);
  std::iota(pool_order.begin(), pool_order.end(), std::size_t{0});
  std::shuffle(pool_order.begin(), pool_order.end(), pool_rng);
  std::size_t pool_pos = 0;
  const std::size_t f = model.features;
  const std::span<const std::size_t> val_idx = split.validation.empty() ? std::span<const std::size_t>(split.train)
                                                                         : std::span<const std::size_t>(split.validation);
  auto last_good = model.params;

  for (std::size_t epoch = 0; epoch < options.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0.0, class_sum = 0.0, recon_sum = 0.0;
    std::size_t batches = 0;
    bool step_limit = false;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - b);
      const std::size_t extra = pool > 0 ? static_cast<std::size_t>(std::llround(cfg.unlabeled_ratio * static_cast<double>(count))) : 0;
      Tensor<float> x({count + extra, f});
      std::vector<std::size_t> y(count + extra, kUnlabeled);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t src = order[b + i];
        std::copy(labeled.data() + src * f, labeled.data() + (src + 1) * f, x.data() + i * f);
        y[i] = labels[src];
      }
      for (std::size_t i = 0; i < extra; ++i) {
        if (pool_pos == pool) {
          std::shuffle(pool_order.begin(), pool_order.end(), pool_rng);
          pool_pos = 0;
        }
        const std::size_t src = pool_order[pool_pos++];
        std::copy(unlabeled.data() + src * f, unlabeled.data() + (src + 1) * f, x.data() + (count + i) * f);
      }
      Tensor<float> noise;
      if (cfg.decoder_noise > 0.0) {
        noise = Tensor<float>({count + extra, model.classes});
        for (auto& v : noise.values()) v = static_cast<float>(cfg.decoder_noise * normal(noise_rng));
      }
      const auto o = ssmlp_gradients(model, x, y, cfg.decoder_noise > 0.0 ? &noise : nullptr);
      if (!std::isfinite(o.value)) {
        model.params = last_good;
        h.stop_reason = "non_finite_loss";
        throw SsmlpTrainingAborted(fmt::format("train_ssmlp: non-finite loss at step {}", h.steps), h);
      }
      try {
        opt.step(model.params);
      } catch (const NonFiniteError& e) {
        model.params = last_good;
        h.stop_reason = "non_finite_gradient";
        throw SsmlpTrainingAborted(fmt::format("train_ssmlp: {} at step {}", e.what(), h.steps), h);
      }
      h.step_loss.push_back(o.value);
      h.step_class_loss.push_back(o.class_loss);
      sum += o.value;
      class_sum += o.class_loss;
      recon_sum += o.recon_loss;
      ++batches;
      ++h.steps;
      if (options.max_steps > 0 && h.steps >= options.max_steps) {
        step_limit = true;
        break;
      }
    }
    const auto m = fold_metrics(model, labeled, labels, val_idx);
    last_good = model.params;
    const double nb = static_cast<double>(batches);
    h.train_loss.push_back(sum / nb);
    h.class_loss.push_back(class_sum / nb);
    h.recon_loss.push_back(recon_sum / nb);
    h.validation_oa.push_back(m.oa);
    h.validation_aa.push_back(m.aa);
    h.learning_rate.push_back(opt.learning_rate());
    log::info("ssmlp_epoch", {{"epoch", std::to_string(epoch + 1)},
                              {"train_loss", log::value(h.train_loss.back())},
                              {"val_oa", log::value(m.oa)},
                              {"val_aa", log::value(m.aa)},
                              {"lr", log::value(opt.learning_rate())}});
    if (options.on_epoch) options.on_epoch(epoch + 1, h.train_loss.back(), m.oa);
    if (step_limit) {
      h.stop_reason = "max_steps";
      return h;
    }
    const auto action = optim::plateau_update(schedule, m.oa);
    if (action == optim::PlateauAction::stop) {
      h.stop_reason = "plateau";
      return h;
    }
    if (action == optim::PlateauAction::drop_lr) opt.set_learning_rate(opt.learning_rate() / schedule.drop_factor);
  }
  h.stop_reason = "max_epochs";
  return h;
}

Prediction predict_map(const SsmlpModel<float>& model, const Tensor<float>& features, const FeatureStats& stats,
                       std::vector<std::string> class_names) {
  if (features.rank() != 3) {
    throw ShapeError("predict_map: features must be [H,W,F], got " + shape_string(features.shape()));
  }
  if (features.dim(2) != model.features) {
    throw ShapeError(fmt::format("predict_map: {} features per pixel, model expects {}", features.dim(2),
                                 model.features));
  }
  if (class_names.empty()) {
    for (std::size_t c = 0; c < model.classes; ++c) class_names.push_back(fmt::format("class{}", c + 1));
  }
  if (class_names.size() != model.classes) {
    throw std::invalid_argument(fmt::format("predict_map: {} class names for {} classes", class_names.size(),
                                            model.classes));
  }
  const std::size_t h = features.dim(0), w = features.dim(1);
  Tensor<float> x = features.reshaped({h * w, model.features});
  apply_stats(x, stats);
  Prediction p;
  const auto proba = ssmlp_predict_proba(model, x);
  const auto best = argmax_rows(proba);
  p.labels = LabelMap(h, w, std::move(class_names));
  for (std::size_t i = 0; i < best.size(); ++i) p.labels.ids[i] = static_cast<std::uint16_t>(best[i] + 1);
  p.probabilities = proba.reshaped({h, w, model.classes});
  return p;
}

Checkpoint to_checkpoint(const SsmlpModel<float>& model, const FeatureStats& stats,
                         const std::vector<std::string>& class_names) {
  Checkpoint c;
  c.model_kind = "ssmlp";
  c.config = {{"ssmlp", to_json(model.config)},
              {"features", model.features},
              {"classes", model.classes},
              {"stats", to_json(stats)},
              {"class_names", class_names}};
  c.params = model.params;
  return c;
}

SsmlpBundle ssmlp_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "ssmlp") {
    throw FormatError(fmt::format("checkpoint holds a '{}' model, expected ssmlp", ckpt.model_kind));
  }
  SsmlpBundle b;
  try {
    b.model = build_ssmlp<float>(ssmlp_config_from_json(ckpt.config.at("ssmlp")),
                                 ckpt.config.at("features").get<std::size_t>(),
                                 ckpt.config.at("classes").get<std::size_t>(), 0);
    b.stats = feature_stats_from_json(ckpt.config.at("stats"));
    b.class_names = ckpt.config.at("class_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ssmlp checkpoint: ") + e.what());
  }
  if (b.model.params.size() != ckpt.params.size()) {
    throw FormatError(fmt::format("checkpoint has {} parameters, architecture needs {}", ckpt.params.size(),
                                  b.model.params.size()));
  }
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto& src = ckpt.params[i];
    auto& dst = b.model.params[i];
    if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
      throw FormatError(fmt::format("checkpoint parameter {} {} does not match architecture {} {}", src.name,
                                    shape_string(src.value.shape()), dst.name, shape_string(dst.value.shape())));
    }
    dst.value = src.value;
    dst.trainable = src.trainable;
  }
  return b;
}

#define SUSA_INSTANTIATE(T)                                                                                     \
  template struct SsmlpModel<T>;                                                                                \
  template SsmlpModel<T> build_ssmlp<T>(const SsmlpConfig&, std::size_t, std::size_t, std::uint64_t);           \
  template SsmlpForward<T> ssmlp_forward<T>(const SsmlpModel<T>&, const Tensor<T>&, const Tensor<T>*);          \
  template SsmlpObjective<T> ssmlp_objective<T>(const SsmlpForward<T>&, std::span<const std::size_t>,           \
                                                std::span<const double>, const Tensor<T>*);                     \
  template void ssmlp_backward<T>(SsmlpModel<T>&, const SsmlpForward<T>&, const SsmlpObjective<T>&);            \
  template SsmlpObjective<T> ssmlp_gradients<T>(SsmlpModel<T>&, const Tensor<T>&, std::span<const std::size_t>, \
                                                const Tensor<T>*);

SUSA_INSTANTIATE(float)
SUSA_INSTANTIATE(double)
#undef SUSA_INSTANTIATE

template struct SsmlpModel<long double>;
template SsmlpForward<long double> ssmlp_forward<long double>(const SsmlpModel<long double>&,
                                                              const Tensor<long double>&, const Tensor<long double>*);
template SsmlpObjective<long double> ssmlp_objective<long double>(const SsmlpForward<long double>&,
                                                                  std::span<const std::size_t>, std::span<const double>,
                                                                  const Tensor<long double>*);

}  // namespace susa
