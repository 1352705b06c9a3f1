#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "susa/dataio/dataio.hpp"
#include "susa/mcae/mcae.hpp"
#include "susa/numerics/grad_check.hpp"
#include "susa/optim/optim.hpp"
#include "susa/spectral/spectral.hpp"

namespace susa {

struct SsmlpConfig {
  std::vector<std::size_t> hidden_widths{1600, 950, 250, 225};
  /// Reconstruction weights, shallowest first: data layer, each hidden layer,
  /// class layer.
  std::vector<double> recon_weights{1.0, 1.0, 0.1, 0.1, 0.1, 0.1};
  Activation activation = Activation::pelu;
  double learning_rate = 2e-3;
  std::size_t batch_size = 8;
  double weight_decay = 1e-3;
  /// Unlabeled samples drawn per labeled sample in every mini-batch.
  double unlabeled_ratio = 1.0;
  double validation_fraction = 0.1;
  /// Standard deviation of Gaussian noise added to the decoder input during
  /// training; zero disables it.
  double decoder_noise = 0.0;

  std::size_t depth() const { return hidden_widths.size(); }
  void validate() const;
};

nlohmann::json to_json(const SsmlpConfig& c);
SsmlpConfig ssmlp_config_from_json(const nlohmann::json& j);

struct DenseBlock {
  std::size_t weights = 0;
  std::size_t bias = 0;
  std::optional<std::size_t> pelu_a;
  std::optional<std::size_t> pelu_b;
};

/// Encoder F → hidden widths (dense + activation) → class head (dense, softmax).
/// The decoder starts from the softmax output and reconstructs every level
/// from the class layer down to the data layer: C → C, C → h_last, ...,
/// h_1 → F, the last step linear. Reconstruction level j has the width of
/// encoder level j (0 = input, depth + 1 = class layer).
template <typename T>
struct SsmlpModel {
  SsmlpConfig config;
  std::size_t features = 0;
  std::size_t classes = 0;
  std::vector<Parameter<T>> params;
  std::vector<DenseBlock> encoder;
  DenseBlock head;
  std::vector<DenseBlock> decoder;  // decoder[j] produces reconstruction level j

  std::size_t level_width(std::size_t j) const;
};

/// Xavier weights; biases and PELU parameters start at one.
template <typename T>
SsmlpModel<T> build_ssmlp(const SsmlpConfig& config, std::size_t input_features, std::size_t classes,
                          std::uint64_t seed);

template <typename T>
struct SsmlpForward {
  Tensor<T> input;
  std::vector<Tensor<T>> pre;   // encoder pre-activations, one per hidden layer
  std::vector<Tensor<T>> act;   // act[0] = input, act[j] = hidden layer j
  Tensor<T> logits;
  Tensor<T> probabilities;
  Tensor<T> decoder_input;      // probabilities, plus noise when enabled
  std::vector<Tensor<T>> rec_pre;  // indexed by level
  std::vector<Tensor<T>> recons;   // indexed by level, shallowest first
};

/// `decoder_noise`, when given, is added to the softmax output before the
/// decoder (same shape as the probabilities).
template <typename T>
SsmlpForward<T> ssmlp_forward(const SsmlpModel<T>& model, const Tensor<T>& x,
                              const Tensor<T>* decoder_noise = nullptr);

/// Marks a sample without a class in a label vector.
inline constexpr std::size_t kUnlabeled = std::numeric_limits<std::size_t>::max();

template <typename T>
struct SsmlpObjective {
  Accum<T> value = 0.0;
  Accum<T> class_loss = 0.0;
  Accum<T> recon_loss = 0.0;
  std::vector<Accum<T>> layer_mse;  // shallowest first, data layer to class layer
  std::size_t labeled = 0;
  Tensor<T> grad_logits;                // cross-entropy part only
  std::vector<Tensor<T>> grad_recons;   // empty where the weight is zero
};

/// Σ_j λ_j · mse_j.
double ssmlp_recon_loss(std::span<const double> layer_mse, std::span<const double> weights);

/// Cross-entropy over the labeled samples (0-based class ids, kUnlabeled for
/// none) plus the weighted reconstruction terms over every sample. The
/// data-layer target is the input and the class-layer target is the softmax
/// output held constant; hidden-layer targets are the encoder activations.
/// `class_target`, when given, replaces the softmax output as that constant,
/// which lets a finite-difference check keep it fixed.
template <typename T>
SsmlpObjective<T> ssmlp_objective(const SsmlpForward<T>& f, std::span<const std::size_t> labels,
                                  std::span<const double> weights, const Tensor<T>* class_target = nullptr);

/// Stores the objective gradient in the model's parameters.
template <typename T>
void ssmlp_backward(SsmlpModel<T>& model, const SsmlpForward<T>& f, const SsmlpObjective<T>& o);

template <typename T>
SsmlpObjective<T> ssmlp_gradients(SsmlpModel<T>& model, const Tensor<T>& x,
                                  std::span<const std::size_t> labels,
                                  const Tensor<T>* decoder_noise = nullptr);

/// Finite-difference check of the joint objective at 64 bits on a reduced
/// model (hidden widths 16, 9, 5, 4). `unlabeled_only` drops every label.
GradCheckReport ssmlp_gradient_check(std::uint64_t seed, bool unlabeled_only,
                                     const GradCheckOptions& options = {});

struct StratifiedSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Per class, ⌈fraction · n_c⌉ samples go to validation, except that a class
/// with a single sample keeps it for training. Indices are sorted.
StratifiedSplit stratified_split(std::span<const std::size_t> labels, std::size_t classes,
                                 double fraction, std::uint64_t seed);

struct SsmlpTrainOptions {
  std::uint64_t seed = 0;
  std::size_t max_epochs = 2000;
  /// When non-zero, training ends after this many mini-batch steps.
  std::size_t max_steps = 0;
  optim::PlateauSchedule schedule = optim::PlateauSchedule::classifier();
  /// Called after every epoch with (epoch, train loss, validation OA).
  std::function<void(std::size_t, double, double)> on_epoch;
};

struct SsmlpHistory {
  std::vector<double> train_loss;   // per epoch
  std::vector<double> class_loss;   // per epoch, labeled samples
  std::vector<double> recon_loss;   // per epoch, all samples
  std::vector<double> validation_oa;
  std::vector<double> validation_aa;
  std::vector<double> learning_rate;
  std::vector<double> step_loss;
  std::vector<double> step_class_loss;
  std::size_t steps = 0;
  std::string stop_reason;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> validation_index;
  /// Classes with no sample in the training fold.
  std::vector<std::size_t> absent_classes;
};

/// Thrown on a non-finite loss or gradient; the model keeps the parameters of
/// the last completed epoch.
class SsmlpTrainingAborted : public std::runtime_error {
 public:
  SsmlpTrainingAborted(const std::string& what, SsmlpHistory h)
      : std::runtime_error(what), history(std::move(h)) {}
  SsmlpHistory history;
};

/// Features are [N, F] and should be standardized; labels are 0-based. The
/// labeled set is split 90/10 (stratified) and validation OA drives the
/// plateau schedule. Every epoch visits the training fold once in shuffled
/// mini-batches of batch_size labeled samples, each joined by
/// round(ratio · count) samples from the unlabeled pool.
///
/// Random streams: derive_seed(seed, 1) splits, derive_seed(seed, 2) shuffles
/// the labeled fold, derive_seed(seed, 3) orders the unlabeled pool,
/// derive_seed(seed, 4) draws decoder noise.
SsmlpHistory train_ssmlp(SsmlpModel<float>& model, const Tensor<float>& labeled,
                         std::span<const std::size_t> labels, const Tensor<float>& unlabeled,
                         const SsmlpTrainOptions& options);

/// Softmax probabilities for [N, F] features, batched.
Tensor<float> ssmlp_predict_proba(const SsmlpModel<float>& model, const Tensor<float>& features);

/// Index of the largest entry per row; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor<float>& scores);

struct Prediction {
  LabelMap labels;
  Tensor<float> probabilities;  // [H, W, C]
};

/// Standardizes [H, W, F] features with `stats` and classifies every pixel.
/// Label ids are class index + 1.
Prediction predict_map(const SsmlpModel<float>& model, const Tensor<float>& features,
                       const FeatureStats& stats, std::vector<std::string> class_names = {});

/// The checkpoint also carries the input statistics and class names.
Checkpoint to_checkpoint(const SsmlpModel<float>& model, const FeatureStats& stats,
                         const std::vector<std::string>& class_names);

struct SsmlpBundle {
  SsmlpModel<float> model;
  FeatureStats stats;
  std::vector<std::string> class_names;
};
SsmlpBundle ssmlp_from_checkpoint(const Checkpoint& ckpt);

}  // namespace susa
