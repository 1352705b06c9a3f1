#include "susa/optim/optim.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace susa::optim {

std::pair<std::size_t, std::size_t> fans(const Shape& shape) {
  std::size_t fan_in = 0, fan_out = 0;
  if (shape.size() == 4) {
    const std::size_t area = shape[0] * shape[1];
    fan_in = area * shape[2];
    fan_out = area * shape[3];
  } else if (shape.size() == 2) {
    fan_in = shape[0];
    fan_out = shape[1];
  } else {
    throw std::invalid_argument("xavier_init: unsupported shape " + shape_string(shape));
  }
  if (fan_in == 0 || fan_out == 0) {
    throw std::invalid_argument("xavier_init: zero fan in shape " + shape_string(shape));
  }
  return {fan_in, fan_out};
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> xavier_init(const Shape& shape, std::uint64_t seed) {
  const auto [fan_in, fan_out] = fans(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor<T> out(shape);
  for (auto& v : out.values()) v = static_cast<T>(normal(rng));
  return out;
}

template <typename T>
void Nadam<T>::step(std::span<Parameter<T>> params) {
  for (const auto& p : params) {
    if (p.trainable && !p.grad.all_finite()) {
      throw NonFiniteError("nadam_step: non-finite gradient for parameter " + p.name);
    }
  }
  if (first_.size() != params.size()) {
    first_.assign(params.size(), {});
    second_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      first_[i].assign(params[i].value.size(), 0.0);
      second_[i].assign(params[i].value.size(), 0.0);
    }
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double t = static_cast<double>(steps_);
  const double corr1_next = 1.0 - std::pow(b1, t + 1.0);
  const double corr1 = 1.0 - std::pow(b1, t);
  const double corr2 = 1.0 - std::pow(b2, t);
  const double lr = config_.learning_rate;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (!p.trainable) continue;
    if (first_[pi].size() != p.value.size()) {
      throw ShapeError("nadam_step: accumulator shape changed for " + p.name);
    }
    const bool decay = p.kind == ParamKind::weight && config_.weight_decay != 0.0;
    auto& m = first_[pi];
    auto& v = second_[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double g = static_cast<double>(p.grad[i]);
      if (decay) g += config_.weight_decay * static_cast<double>(p.value[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = b1 * m[i] / corr1_next + (1.0 - b1) * g / corr1;
      const double v_hat = v[i] / corr2;
      const double updated = static_cast<double>(p.value[i]) - lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
      p.value[i] = static_cast<T>(updated);
    }
    if (p.kind == ParamKind::pelu) {
      const T floor = static_cast<T>(config_.pelu_floor);
      for (auto& x : p.value.values()) x = std::max(x, floor);
    }
  }
}

std::string_view to_string(PlateauAction action) {
  switch (action) {
    case PlateauAction::proceed: return "continue";
    case PlateauAction::drop_lr: return "drop_lr";
    case PlateauAction::stop: return "stop";
  }
  return "continue";
}

PlateauSchedule PlateauSchedule::autoencoder() {
  PlateauSchedule s;
  s.direction = Direction::minimize;
  s.drop_patience = 5;
  s.stop_patience = 10;
  return s;
}

PlateauSchedule PlateauSchedule::classifier() {
  PlateauSchedule s;
  s.direction = Direction::maximize;
  s.drop_patience = 25;
  s.stop_patience = 50;
  return s;
}

void PlateauSchedule::validate() const {
  if (drop_patience < 1 || stop_patience < drop_patience) {
    throw std::invalid_argument("plateau schedule needs 1 <= drop patience <= stop patience");
  }
  if (!(drop_factor > 1.0)) throw std::invalid_argument("plateau drop factor must exceed 1");
}

PlateauAction plateau_update(PlateauSchedule& s, double metric) {
  const bool improved =
      !s.best.has_value() ||
      (s.direction == Direction::minimize ? metric < *s.best - s.min_delta
                                          : metric > *s.best + s.min_delta);
  if (improved) {
    s.best = metric;
    s.streak = 0;
    return PlateauAction::proceed;
  }
  ++s.streak;
  if (s.streak >= s.stop_patience) return PlateauAction::stop;
  if (s.streak % s.drop_patience == 0) return PlateauAction::drop_lr;
  return PlateauAction::proceed;
}

template Tensor<float> xavier_init(const Shape&, std::uint64_t);
template Tensor<double> xavier_init(const Shape&, std::uint64_t);
template class Nadam<float>;
template class Nadam<double>;

}  // namespace susa::optim
