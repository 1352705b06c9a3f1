#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "susa/dataio/dataio.hpp"
#include "susa/numerics/grad_check.hpp"
#include "susa/numerics/kernels.hpp"
#include "susa/optim/optim.hpp"

namespace susa {

enum class Activation { pelu, relu };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct McaeConfig {
  std::vector<std::size_t> encoder_widths{256, 512, 512, 1024};
  std::vector<std::size_t> refinement_widths{512, 512, 256};
  /// Loss weights, data layer first.
  std::vector<double> loss_weights{1.0, 1e-1, 1e-2, 1e-2};
  Activation activation = Activation::pelu;
  double learning_rate = 2e-3;
  std::size_t batch_size = 512;
  double width_scale = 1.0;

  std::size_t depth() const { return encoder_widths.size(); }
  /// Width after scaling: max(1, round(w · width_scale)).
  std::size_t scaled(std::size_t width) const;
  std::size_t feature_channels() const { return scaled(refinement_widths.back()); }
  /// Spatial dims must be multiples of this.
  std::size_t spatial_multiple() const { return std::size_t{1} << (depth() - 1); }
  void validate() const;
};

nlohmann::json to_json(const McaeConfig& c);
McaeConfig mcae_config_from_json(const nlohmann::json& j);

/// Indices into the parameter list for one 3×3 convolution block.
struct ConvBlock {
  std::size_t weights = 0;
  std::size_t bias = 0;
  /// PELU a and b; absent for linear heads and in ReLU mode.
  std::optional<std::size_t> pelu_a;
  std::optional<std::size_t> pelu_b;
};

/// Encoder blocks conv→activation, 2×2 max pool after all but the last.
/// Refinement block i upsamples the previous decoder stage ×2, concatenates
/// the matching encoder activation, then conv→activation. A linear head maps
/// the last refinement stage back to the input bands; linear auxiliary heads
/// map the decoder stage at the resolution of encoder block j's input back to
/// that input (j ≥ 2). All convolutions replicate edge pixels.
template <typename T>
struct McaeModel {
  McaeConfig config;
  std::size_t bands = 0;
  std::vector<Parameter<T>> params;
  std::vector<ConvBlock> encoder;
  std::vector<ConvBlock> refinement;
  ConvBlock head;
  std::vector<ConvBlock> aux;  // aux[j-2] reconstructs the input of encoder block j

  std::size_t input_channels() const { return bands; }
  std::size_t feature_channels() const { return config.feature_channels(); }
};

/// Xavier weights; biases and PELU parameters start at one. Each parameter
/// draws from derive_seed(seed, position in the parameter list).
template <typename T>
McaeModel<T> build_mcae(const McaeConfig& config, std::size_t input_bands, std::uint64_t seed);

/// Checkpoint conversion (float storage).
Checkpoint to_checkpoint(const McaeModel<float>& model);
McaeModel<float> mcae_from_checkpoint(const Checkpoint& ckpt);

template <typename T, typename U>
McaeModel<T> cast_model(const McaeModel<U>& model) {
  McaeModel<T> out;
  out.config = model.config;
  out.bands = model.bands;
  out.params = cast_parameters<T>(std::span<const Parameter<U>>(model.params));
  out.encoder = model.encoder;
  out.refinement = model.refinement;
  out.head = model.head;
  out.aux = model.aux;
  return out;
}

template <typename T>
struct McaeForward {
  /// targets[j] is the input of encoder block j+1; recons[j] its reconstruction.
  std::vector<Tensor<T>> targets;
  std::vector<Tensor<T>> recons;
  Tensor<T> bottleneck;
  Tensor<T> features;

  // Intermediate values kept for the backward pass.
  std::vector<Tensor<T>> enc_pre;   // pre-activation
  std::vector<Tensor<T>> enc_act;   // activation (lateral source)
  std::vector<kernels::PoolResult<T>> pools;
  std::vector<Tensor<T>> ref_in;    // concatenated input
  std::vector<Tensor<T>> ref_pre;
  std::vector<Tensor<T>> ref_act;
  bool with_heads = true;
};

/// Full forward pass. `with_heads = false` skips the reconstruction heads
/// (feature extraction only). Rejects band mismatches and spatial dims that
/// are not multiples of config.spatial_multiple().
template <typename T>
McaeForward<T> mcae_forward(const McaeModel<T>& model, const Tensor<T>& batch,
                            bool with_heads = true);

template <typename T>
struct McaeObjective {
  Accum<T> value = 0.0;
  std::vector<Accum<T>> layer_mse;
  std::vector<Tensor<T>> grad_recons;
  std::vector<Tensor<T>> grad_targets;
};

/// Σ_j λ_j · MSE(target_j, recon_j).
double mcae_loss(std::span<const double> layer_mse, std::span<const double> weights);

template <typename T>
McaeObjective<T> mcae_objective(const McaeForward<T>& fwd, std::span<const double> weights);

/// Accumulates d(objective)/d(parameter) into every parameter's grad.
/// Gradients reach encoder activations both through the decoder and through
/// their role as reconstruction targets.
template <typename T>
void mcae_backward(McaeModel<T>& model, const McaeForward<T>& fwd, const McaeObjective<T>& obj);

/// Zeroes gradients, runs forward/objective/backward, returns the objective.
template <typename T>
McaeObjective<T> mcae_gradients(McaeModel<T>& model, const Tensor<T>& batch);

/// Features of a [H,W,F] image (reflect-padded to the spatial multiple and
/// cropped back). Output [H,W,feature_channels].
Tensor<float> extract_mcae_features(const McaeModel<float>& model, const Tensor<float>& image);

struct McaeTrainOptions {
  std::uint64_t seed = 0;
  std::size_t max_epochs = 1000;
  /// When non-zero, training ends after this many mini-batch steps.
  std::size_t max_steps = 0;
  optim::PlateauSchedule schedule = optim::PlateauSchedule::autoencoder();
  /// Called after every epoch with (epoch, train loss, validation loss).
  std::function<void(std::size_t, double, double)> on_epoch;
};

struct McaeHistory {
  std::vector<double> train_loss;       // per epoch, mean over batches
  std::vector<double> validation_loss;  // per epoch
  std::vector<double> learning_rate;    // per epoch, rate used
  std::vector<std::vector<double>> validation_layer_mse;
  std::vector<double> step_loss;        // every mini-batch
  std::size_t steps = 0;
  std::string stop_reason;
};

/// Thrown when training meets a non-finite loss; the model holds the
/// parameters of the last completed epoch.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, McaeHistory h)
      : std::runtime_error(what), history(std::move(h)) {}
  McaeHistory history;
};

/// Mini-batch Nadam on the multi-loss objective over shuffled epochs, with the
/// plateau schedule on validation loss (drop ×0.1, early stop). Patches are
/// [N,H,W,B] and should be standardized.
McaeHistory train_mcae(McaeModel<float>& model, const Tensor<float>& train,
                       const Tensor<float>& validation, const McaeTrainOptions& options);

struct McaeLoss {
  double value = 0.0;
  std::vector<double> layer_mse;
};

/// Objective and per-layer MSE over a patch set, evaluated in batches.
McaeLoss evaluate_mcae(const McaeModel<float>& model, const Tensor<float>& patches);

/// Finite-difference check of the composite objective in double precision
/// on a reduced random model.
GradCheckReport mcae_gradient_check(std::uint64_t seed, Activation activation,
                                    const GradCheckOptions& options = {});

}  // namespace susa
