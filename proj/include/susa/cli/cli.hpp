#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "susa/dataio/dataio.hpp"
#include "susa/ssmlp/ssmlp.hpp"

namespace susa::cli {

namespace fs = std::filesystem;

/// Runs one subcommand. `args` excludes the program name. Results go to
/// `out`; usage text and the one-line error record go to `err`.
///
/// Exit status: 0 on success, 2 for usage errors, 1 for everything else.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const fs::path& path);

struct LowShotOptions {
  std::size_t per_class = 10;
  std::map<std::size_t, std::size_t> overrides;
  std::uint64_t seed = 0;
  SsmlpConfig config;
  SsmlpTrainOptions train;
  /// Unlabeled pixels drawn for the reconstruction term; 0 uses every pixel
  /// outside the validation fold.
  std::size_t pool_size = 0;
};

struct LowShotRun {
  SsmlpModel<float> model;
  FeatureStats stats;
  LowShotSplit split;
  SsmlpHistory history;
  /// Flat pixel indices (row · width + col) of the unlabeled pool.
  std::vector<std::size_t> pool;
};

/// Standardizes [H, W, F] features over the whole image, draws the low-shot
/// split, and trains an SS-MLP on it. The model is initialized from
/// derive_seed(seed, 0); the split uses `seed` itself and training uses
/// options.train with its seed replaced by `seed`. Pixels in the classifier's
/// validation fold never enter the unlabeled pool.
LowShotRun train_lowshot(const Tensor<float>& features, const LabelMap& labels,
                         const LowShotOptions& options);

}  // namespace susa::cli
