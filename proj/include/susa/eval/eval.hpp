#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "susa/dataio/dataio.hpp"

namespace susa {

/// C×C counts, rows = truth, columns = prediction, class c stored at index c−1.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t total() const;
};

/// Counts pixels whose truth class is non-zero. Labeled pixels predicted as 0
/// are rejected, as are maps of different size.
ConfusionMatrix confusion(const LabelMap& truth, const LabelMap& pred);

/// Same, restricted to the listed pixels.
ConfusionMatrix confusion(const LabelMap& truth, const LabelMap& pred,
                          const std::vector<Pixel>& pixels);

struct Metrics {
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  /// Set when chance agreement is 1 and κ is undefined (reported as 0).
  bool kappa_degenerate = false;
  /// Recall per class; NaN for classes without truth samples.
  std::vector<double> recall;
};

/// Throws std::invalid_argument on an empty matrix.
Metrics metrics(const ConfusionMatrix& cm);

struct DissimilarityOptions {
  /// When non-zero and smaller than the pixel count, a fixed-seed random
  /// subset of this many pixels is used.
  std::size_t max_pixels = 0;
  std::uint64_t seed = 0;
};

/// Average ranks (ties share the mean of their positions), 1-based.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman correlation between every column of X and every column of Y,
/// row-major [Fx, Fy]. Pairs involving a constant column are 0.
std::vector<double> spearman_matrix(const Tensor<float>& x, const Tensor<float>& y,
                                    const DissimilarityOptions& options = {});

/// 1 − mean over X's features of the best Spearman correlation with any of
/// Y's features. Inputs are [pixels, features] (or [H, W, F]).
double dissimilarity(const Tensor<float>& x, const Tensor<float>& y,
                     const DissimilarityOptions& options = {});

}  // namespace susa
