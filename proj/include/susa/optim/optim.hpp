#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "susa/numerics/tensor.hpp"

namespace susa::optim {

/// Zero-mean normal samples with variance 2 / (fan_in + fan_out).
///
/// Rank-4 shapes are conv kernels [k, k, Fin, Fout] (fans k²·Fin, k²·Fout);
/// rank-2 shapes are dense matrices [Fin, Fout]. Deterministic in `seed`.
template <typename T>
Tensor<T> xavier_init(const Shape& shape, std::uint64_t seed);

/// Returns {fan_in, fan_out}; throws on unsupported rank or a zero fan.
std::pair<std::size_t, std::size_t> fans(const Shape& shape);

/// Mixes a base seed with a stream index so that every parameter of a model
/// draws from its own reproducible stream.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

struct NadamConfig {
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// L2 coefficient added to the gradient of weight parameters only.
  double weight_decay = 0.0;
  /// Lower bound applied to PELU parameters after every step.
  double pelu_floor = 1e-2;
};

/// Nesterov-accelerated Adam.
///
///   m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
///   m̂ = β1·m/(1−β1^{t+1}) + (1−β1)·g/(1−β1^t),  v̂ = v/(1−β2^t)
///   θ ← θ − lr·m̂/(√v̂ + ε)
template <typename T>
class Nadam {
 public:
  explicit Nadam(NadamConfig config = {}) : config_(config) {}

  /// Applies one update to every trainable parameter. Throws NonFiniteError
  /// (before touching any parameter) if a gradient is not finite.
  void step(std::span<Parameter<T>> params);

  double learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::uint64_t step_count() const { return steps_; }
  const NadamConfig& config() const { return config_; }

 private:
  NadamConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

enum class Direction { minimize, maximize };

enum class PlateauAction { proceed, drop_lr, stop };

std::string_view to_string(PlateauAction action);

/// Learning-rate drop and early-stopping driven by a per-epoch metric.
///
/// An epoch improves when the metric beats the best so far by at least
/// `min_delta`. The no-improvement streak resets on improvement; `drop_lr` is
/// returned each time the streak reaches a multiple of `drop_patience`, and
/// `stop` once it reaches `stop_patience` (stop wins when both apply).
struct PlateauSchedule {
  Direction direction = Direction::minimize;
  int drop_patience = 5;
  int stop_patience = 10;
  double drop_factor = 10.0;
  double min_delta = 1e-6;
  std::optional<double> best;
  int streak = 0;

  /// Validation-loss schedule used for the convolutional autoencoders.
  static PlateauSchedule autoencoder();
  /// Validation-accuracy schedule used for the perceptron classifier.
  static PlateauSchedule classifier();

  void validate() const;
};

PlateauAction plateau_update(PlateauSchedule& schedule, double epoch_metric);

}  // namespace susa::optim
