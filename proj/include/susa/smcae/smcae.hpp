#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "susa/mcae/mcae.hpp"
#include "susa/spectral/spectral.hpp"

namespace susa {

struct SmcaeConfig {
  McaeConfig mcae;
  std::size_t stages = 5;
  /// Stride-1 mean pool applied to the concatenated features.
  std::size_t pool_window = 5;
  void validate() const;
};

struct SmcaeStack {
  SmcaeConfig config;
  SensorSpec sensor;
  std::vector<McaeModel<float>> stages;
  /// Statistics of the training patches: per band, then per stage output.
  FeatureStats band_stats;
  std::vector<FeatureStats> stage_stats;

  std::size_t feature_channels() const;
};

struct SmcaeTrainResult {
  SmcaeStack stack;
  std::vector<McaeHistory> histories;
};

/// Thrown when a stage fails; `partial` holds the stages finished before it.
class StackTrainingAborted : public std::runtime_error {
 public:
  StackTrainingAborted(const std::string& what, SmcaeTrainResult p)
      : std::runtime_error(what), partial(std::move(p)) {}
  SmcaeTrainResult partial;
};

/// Trains the stages in order. Patches are raw [N,H,W,B] values; they are
/// standardized per band, and each later stage trains on the standardized
/// feature responses of the previous stage over the same patches. Stage k
/// uses seed derive_seed(options.seed, k) for initialization and shuffling.
SmcaeTrainResult train_smcae_stack(const Tensor<float>& train, const Tensor<float>& validation,
                                   const SensorSpec& sensor, const SmcaeConfig& config,
                                   const McaeTrainOptions& options);

/// Runs a patch set through one stage in batches; returns [N,H,W,F].
Tensor<float> mcae_patch_features(const McaeModel<float>& model, const Tensor<float>& patches);

struct ExtractOptions {
  /// Resample cubes from other sensors onto the stack's bands.
  bool resample = true;
};

/// resample → standardize bands → per stage: extract, standardize → concatenate
/// → standardize → stride-1 mean pool. Statistics come from the image itself.
/// Output [H, W, stages · feature channels].
Tensor<float> smcae_extract(const SmcaeStack& stack, const HsiCube& cube,
                            const ExtractOptions& options = {});

struct FusedFeatures {
  Tensor<float> features;
  std::vector<std::string> sources;
  std::vector<std::size_t> channels;
};

/// Concatenates [H,W,F_i] responses along the feature axis in the given order.
FusedFeatures fuse_sensor_features(const std::vector<Tensor<float>>& responses,
                                   const std::vector<std::string>& sources = {});

Checkpoint to_checkpoint(const SmcaeStack& stack);
SmcaeStack smcae_from_checkpoint(const Checkpoint& ckpt);

}  // namespace susa
