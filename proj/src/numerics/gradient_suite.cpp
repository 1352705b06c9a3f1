#include "susa/numerics/gradient_suite.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <random>

#include "susa/numerics/kernels.hpp"

namespace susa {

namespace {

using kernels::Padding;
using Rng = std::mt19937_64;
using D = double;

Tensor<D> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<D> t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double dot(const Tensor<D>& a, const Tensor<D>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// One check: parameters are the kernel inputs; `forward` recomputes the
// projected loss, `backward` fills every parameter's grad.
struct Trial {
  std::shared_ptr<std::vector<Parameter<D>>> params = std::make_shared<std::vector<Parameter<D>>>();
  std::function<double()> forward;
  std::function<void()> backward;
};

GradCheckReport run(Trial& t) {
  for (auto& p : *t.params) p.zero_grad();
  t.backward();
  std::vector<Parameter<D>*> ptrs;
  for (auto& p : *t.params) ptrs.push_back(&p);
  return grad_check(t.forward, ptrs);
}

using TrialFactory = std::function<Trial(Rng&)>;

Trial conv_trial(Rng& rng, Padding pad) {
  const std::size_t k = pad != Padding::valid ? (pick(rng, 0, 1) ? 3 : 1) : 3;
  const std::size_t h = pick(rng, 3, 6), w = pick(rng, 3, 6);
  const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), n = pick(rng, 1, 2);
  Trial t;
  t.params->emplace_back("input", ParamKind::weight, random_tensor(rng, {n, h, w, cin}));
  t.params->emplace_back("weights", ParamKind::weight, random_tensor(rng, {k, k, cin, cout}));
  const std::size_t ho = pad != Padding::valid ? h : h - k + 1;
  const std::size_t wo = pad != Padding::valid ? w : w - k + 1;
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {n, ho, wo, cout}));
  auto ps = t.params;
  t.forward = [ps, r, pad] { return dot(kernels::conv2d((*ps)[0].value, (*ps)[1].value, pad), *r); };
  t.backward = [ps, r, pad] {
    auto g = kernels::conv2d_backward((*ps)[0].value, (*ps)[1].value, *r, pad);
    (*ps)[0].grad = g.input;
    (*ps)[1].grad = g.weights;
  };
  return t;
}

Trial bias_trial(Rng& rng) {
  const std::size_t n = pick(rng, 1, 4), c = pick(rng, 1, 5);
  Trial t;
  t.params->emplace_back("input", ParamKind::weight, random_tensor(rng, {n, 2, 2, c}));
  t.params->emplace_back("bias", ParamKind::bias, random_tensor(rng, {c}));
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {n, 2, 2, c}));
  auto ps = t.params;
  t.forward = [ps, r] { return dot(kernels::add_bias((*ps)[0].value, (*ps)[1].value), *r); };
  t.backward = [ps, r] {
    (*ps)[0].grad = *r;
    (*ps)[1].grad = kernels::bias_backward(*r);
  };
  return t;
}

Trial pool_trial(Rng& rng, kernels::PoolKind kind) {
  kernels::PoolSpec spec;
  spec.kind = kind;
  if (kind == kernels::PoolKind::max) {
    spec.window = 2;
    spec.stride = 2;
    spec.pad = Padding::valid;
  } else {
    spec.window = pick(rng, 0, 1) ? 5 : 3;
    spec.stride = 1;
    spec.pad = Padding::same;
  }
  const std::size_t h = 2 * pick(rng, 2, 4), w = 2 * pick(rng, 2, 4), c = pick(rng, 1, 3);
  Trial t;
  t.params->emplace_back("input", ParamKind::weight, random_tensor(rng, {1, h, w, c}));
  const auto probe = kernels::pool2d((*t.params)[0].value, spec);
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, probe.output.shape()));
  auto ps = t.params;
  t.forward = [ps, r, spec] { return dot(kernels::pool2d((*ps)[0].value, spec).output, *r); };
  t.backward = [ps, r, spec] {
    auto fwd = kernels::pool2d((*ps)[0].value, spec);
    (*ps)[0].grad = kernels::pool2d_backward(fwd, *r, spec);
  };
  return t;
}

Trial upsample_trial(Rng& rng) {
  const std::size_t f = pick(rng, 1, 3), h = pick(rng, 1, 4), w = pick(rng, 1, 4), c = pick(rng, 1, 3);
  Trial t;
  t.params->emplace_back("input", ParamKind::weight, random_tensor(rng, {1, h, w, c}));
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {1, h * f, w * f, c}));
  auto ps = t.params;
  t.forward = [ps, r, f] { return dot(kernels::upsample_nearest2d((*ps)[0].value, f), *r); };
  t.backward = [ps, r, f] { (*ps)[0].grad = kernels::upsample_nearest2d_backward(*r, f); };
  return t;
}

Trial pelu_trial(Rng& rng) {
  const std::size_t n = pick(rng, 2, 12);
  Trial t;
  t.params->emplace_back("input", ParamKind::weight, random_tensor(rng, {n}, -2.0, 2.0));
  t.params->emplace_back("a", ParamKind::pelu, random_tensor(rng, {1}, 0.3, 2.0));
  t.params->emplace_back("b", ParamKind::pelu, random_tensor(rng, {1}, 0.3, 2.0));
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {n}));
  auto ps = t.params;
  auto params = [ps] { return kernels::PeluParams<D>{(*ps)[1].value[0], (*ps)[2].value[0]}; };
  t.forward = [ps, r, params] { return dot(kernels::pelu((*ps)[0].value, params()), *r); };
  t.backward = [ps, r, params] {
    auto g = kernels::pelu_backward((*ps)[0].value, params(), *r);
    (*ps)[0].grad = g.input;
    (*ps)[1].grad[0] = g.a;
    (*ps)[2].grad[0] = g.b;
  };
  return t;
}

Trial relu_trial(Rng& rng) {
  const std::size_t n = pick(rng, 2, 16);
  Trial t;
  t.params->emplace_back("input", ParamKind::weight, random_tensor(rng, {n}));
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {n}));
  auto ps = t.params;
  t.forward = [ps, r] { return dot(kernels::relu((*ps)[0].value), *r); };
  t.backward = [ps, r] { (*ps)[0].grad = kernels::relu_backward((*ps)[0].value, *r); };
  return t;
}

Trial dense_trial(Rng& rng) {
  const std::size_t n = pick(rng, 1, 4), fin = pick(rng, 1, 6), fout = pick(rng, 1, 6);
  Trial t;
  t.params->emplace_back("input", ParamKind::weight, random_tensor(rng, {n, fin}));
  t.params->emplace_back("weights", ParamKind::weight, random_tensor(rng, {fin, fout}));
  t.params->emplace_back("bias", ParamKind::bias, random_tensor(rng, {fout}));
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {n, fout}));
  auto ps = t.params;
  t.forward = [ps, r] {
    return dot(kernels::dense((*ps)[0].value, (*ps)[1].value, (*ps)[2].value), *r);
  };
  t.backward = [ps, r] {
    auto g = kernels::dense_backward((*ps)[0].value, (*ps)[1].value, *r);
    (*ps)[0].grad = g.input;
    (*ps)[1].grad = g.weights;
    (*ps)[2].grad = g.bias;
  };
  return t;
}

Trial concat_trial(Rng& rng) {
  const std::size_t ca = pick(rng, 1, 3), cb = pick(rng, 1, 3);
  Trial t;
  t.params->emplace_back("first", ParamKind::weight, random_tensor(rng, {1, 2, 3, ca}));
  t.params->emplace_back("second", ParamKind::weight, random_tensor(rng, {1, 2, 3, cb}));
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {1, 2, 3, ca + cb}));
  auto ps = t.params;
  t.forward = [ps, r] { return dot(kernels::concat_channels((*ps)[0].value, (*ps)[1].value), *r); };
  t.backward = [ps, r, ca] {
    auto [ga, gb] = kernels::split_channels(*r, ca);
    (*ps)[0].grad = ga;
    (*ps)[1].grad = gb;
  };
  return t;
}

Trial softmax_trial(Rng& rng) {
  const std::size_t n = pick(rng, 1, 3), c = pick(rng, 2, 5);
  Trial t;
  t.params->emplace_back("logits", ParamKind::weight, random_tensor(rng, {n, c}, -3.0, 3.0));
  auto r = std::make_shared<Tensor<D>>(random_tensor(rng, {n, c}));
  auto ps = t.params;
  t.forward = [ps, r] { return dot(kernels::softmax((*ps)[0].value), *r); };
  t.backward = [ps, r] {
    (*ps)[0].grad = kernels::softmax_backward(kernels::softmax((*ps)[0].value), *r);
  };
  return t;
}

Trial crossentropy_trial(Rng& rng) {
  const std::size_t n = pick(rng, 1, 5), c = pick(rng, 2, 5);
  Trial t;
  t.params->emplace_back("logits", ParamKind::weight, random_tensor(rng, {n, c}, -3.0, 3.0));
  auto labels = std::make_shared<std::vector<std::size_t>>(n);
  for (auto& l : *labels) l = pick(rng, 0, c - 1);
  auto ps = t.params;
  t.forward = [ps, labels] { return kernels::loss_softmax_crossentropy<D>((*ps)[0].value, *labels).value; };
  t.backward = [ps, labels] {
    (*ps)[0].grad = kernels::loss_softmax_crossentropy<D>((*ps)[0].value, *labels).grad;
  };
  return t;
}

Trial mse_trial(Rng& rng) {
  const std::size_t n = pick(rng, 1, 12);
  Trial t;
  t.params->emplace_back("prediction", ParamKind::weight, random_tensor(rng, {n}));
  t.params->emplace_back("target", ParamKind::weight, random_tensor(rng, {n}));
  auto ps = t.params;
  t.forward = [ps] { return kernels::mse_value((*ps)[0].value, (*ps)[1].value); };
  t.backward = [ps] {
    auto g = kernels::loss_mse((*ps)[0].value, (*ps)[1].value);
    (*ps)[0].grad = g.grad;
    (*ps)[1].grad = kernels::scaled(g.grad, -1.0);
  };
  return t;
}

}  // namespace

std::vector<KernelCheckSummary> kernel_gradient_suite(std::size_t trials, std::uint64_t seed) {
  const std::vector<std::pair<std::string, TrialFactory>> factories = {
      {"conv2d_same", [](Rng& r) { return conv_trial(r, Padding::same); }},
      {"conv2d_valid", [](Rng& r) { return conv_trial(r, Padding::valid); }},
      {"conv2d_edge", [](Rng& r) { return conv_trial(r, Padding::edge); }},
      {"add_bias", bias_trial},
      {"pool2d_max", [](Rng& r) { return pool_trial(r, kernels::PoolKind::max); }},
      {"pool2d_mean", [](Rng& r) { return pool_trial(r, kernels::PoolKind::mean); }},
      {"upsample_nearest2d", upsample_trial},
      {"pelu", pelu_trial},
      {"relu", relu_trial},
      {"dense", dense_trial},
      {"concat_channels", concat_trial},
      {"softmax", softmax_trial},
      {"loss_softmax_crossentropy", crossentropy_trial},
      {"loss_mse", mse_trial},
  };
  std::vector<KernelCheckSummary> out;
  Rng rng(seed);
  for (const auto& [name, factory] : factories) {
    KernelCheckSummary s;
    s.kernel = name;
    for (std::size_t i = 0; i < trials; ++i) {
      Trial t = factory(rng);
      const auto report = run(t);
      ++s.trials;
      if (report.max_relative_error >= s.max_relative_error) {
        s.max_relative_error = report.max_relative_error;
        s.worst_parameter = report.worst_parameter;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace susa
