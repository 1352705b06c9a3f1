#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "susa/numerics/tensor.hpp"

namespace susa {

struct SensorSpec {
  std::string name;
  std::vector<double> centers_nm;
  std::vector<double> fwhm_nm;

  std::size_t bands() const { return centers_nm.size(); }
  /// Throws std::invalid_argument on unequal lengths, non-increasing centers,
  /// or non-positive FWHMs.
  void validate() const;

  friend bool operator==(const SensorSpec&, const SensorSpec&) = default;
};

/// Evenly spaced bands with a common FWHM.
SensorSpec uniform_sensor(std::string name, double first_nm, double last_nm, std::size_t bands,
                          double fwhm_nm);

struct HsiCube {
  Tensor<float> values;  // [H, W, B]
  SensorSpec spec;
  double gsd_m = 1.0;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t bands() const { return values.dim(2); }
  void validate() const;
};

/// Row-major [target bands, source bands] weights; each row is non-negative
/// and sums to one.
///
/// A target band is a Gaussian with σ = FWHM/2.3548; source bands whose centers
/// lie within ±2 FWHM of the target center contribute g(λ_s), normalized. A
/// target band with the same center and FWHM as a source band copies it.
/// `source_mask`, when non-empty, marks usable source bands. Throws
/// std::invalid_argument naming the first target band without support.
std::vector<double> resampling_matrix(const SensorSpec& source, const SensorSpec& target,
                                      const std::vector<bool>& source_mask = {});

HsiCube resample_bands(const HsiCube& cube, const SensorSpec& target);

/// Removes the listed bands from values and spec. Indices must be in range and unique.
HsiCube exclude_bands(const HsiCube& cube, const std::vector<std::size_t>& band_indices);

/// Per-feature statistics over the last axis of a tensor.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population, before flooring
};

inline constexpr double kStddevFloor = 1e-8;

/// Requires at least two samples per feature.
FeatureStats compute_stats(const Tensor<float>& data);

/// (x − μ)/max(σ, 1e-8) along the last axis, in place.
void apply_stats(Tensor<float>& data, const FeatureStats& stats);

/// Computes statistics, applies them, and returns them. Constant features map
/// to zero and are reported with a warning.
FeatureStats standardize(Tensor<float>& data);

}  // namespace susa
