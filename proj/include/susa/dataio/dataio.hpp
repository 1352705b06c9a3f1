#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "susa/numerics/tensor.hpp"
#include "susa/spectral/spectral.hpp"

namespace susa {

namespace fs = std::filesystem;

/// Per-pixel class ids: 0 is unlabeled, 1..classes() are classes.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> ids;
  std::vector<std::string> class_names;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::vector<std::string> names);

  std::size_t classes() const { return class_names.size(); }
  std::uint16_t& at(std::size_t r, std::size_t c) { return ids[r * width + c]; }
  std::uint16_t at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
  void validate() const;
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `key = value` sidecar files. Keys are written in insertion order.
using Sidecar = std::vector<std::pair<std::string, std::string>>;
Sidecar read_sidecar(const fs::path& path);
std::string sidecar_value(const Sidecar& sc, const std::string& key, const fs::path& path);

/// The header of a raster lives beside it as `<path>.hdr`.
fs::path sidecar_path(const fs::path& data_path);

/// Writes `bytes` to `path` through a temporary file and rename, holding an
/// exclusive lock on the containing directory.
void write_file_atomic(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

void save_cube(const fs::path& path, const HsiCube& cube);
HsiCube load_cube(const fs::path& path);

/// Reads a raw raster described by a sidecar that may use dtype f32le, u16le
/// or i16le, interleave bip, bil or bsq, and an optional header_offset.
HsiCube import_raw(const fs::path& path);

void save_labels(const fs::path& path, const LabelMap& labels);
LabelMap load_labels(const fs::path& path);

/// Arbitrary float tensors (feature maps, patch sets) with a shape sidecar.
void save_tensor(const fs::path& path, const Tensor<float>& t, const std::string& kind);
Tensor<float> load_tensor(const fs::path& path, std::string* kind = nullptr);

struct Checkpoint {
  std::string model_kind;
  nlohmann::json config = nlohmann::json::object();
  std::vector<Parameter<float>> params;
};

/// One file: a first line `susa-checkpoint 1 <manifest bytes>`, a JSON manifest
/// (model kind, config, parameter names/kinds/shapes/offsets), then every
/// parameter as little-endian float32 in manifest order.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

nlohmann::json to_json(const FeatureStats& s);
FeatureStats feature_stats_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SensorSpec& s);
SensorSpec sensor_from_json(const nlohmann::json& j);

struct PatchCoord {
  std::size_t cube = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const PatchCoord&, const PatchCoord&) = default;
};

struct PatchSample {
  std::size_t size = 32;
  std::vector<PatchCoord> train;
  std::vector<PatchCoord> validation;
};

/// Draws `n` top-left corners uniformly over all valid positions of all cubes
/// (so cubes are weighted by area), then splits 90/10. Cubes smaller than the
/// patch are skipped with a warning.
PatchSample sample_patches(const std::vector<HsiCube>& cubes, std::size_t n, std::size_t size,
                           std::uint64_t seed, double validation_fraction = 0.1);

/// Copies the patches into a [N, size, size, B] tensor.
Tensor<float> gather_patches(const std::vector<HsiCube>& cubes,
                             const std::vector<PatchCoord>& coords, std::size_t size);

struct SyntheticSceneSpec {
  std::size_t classes = 4;
  std::size_t bands = 32;
  std::size_t height = 64;
  std::size_t width = 64;
  double first_nm = 400.0;
  double last_nm = 2400.0;
  /// Seeds per class for the blob field and their radius in pixels.
  std::size_t blobs_per_class = 3;
  double blob_radius = 10.0;
  /// Relative magnitude of smooth per-pixel illumination and nuisance-curve
  /// mixing within a class.
  double variation = 0.05;
  /// Standard deviation of white noise added to every value.
  double noise = 0.01;
  /// Minimum spectral angle between endmembers, in degrees.
  double min_angle_deg = 3.0;
  std::size_t min_class_pixels = 16;
  std::uint64_t seed = 0;
};

struct SyntheticScene {
  HsiCube cube;
  LabelMap labels;
  std::vector<std::vector<double>> endmembers;
};

SyntheticScene synth_scene(const SyntheticSceneSpec& spec);

using Pixel = std::pair<std::size_t, std::size_t>;

struct LowShotSplit {
  std::uint64_t seed = 0;
  /// Index c holds the training pixels of class c + 1, sorted.
  std::vector<std::vector<Pixel>> pixels;
  std::vector<std::size_t> requested;
  std::vector<std::size_t> shortfall;

  std::size_t total() const;
};

/// Samples min(L_c, available) pixels per class without replacement, where
/// L_c comes from `overrides` (keyed by class id) or `per_class`.
LowShotSplit lowshot_split(const LabelMap& labels, std::size_t per_class, std::uint64_t seed,
                           const std::map<std::size_t, std::size_t>& overrides = {});

/// Labeled pixels to evaluate on; training pixels are left out unless `inclusive`.
std::vector<Pixel> evaluation_pixels(const LabelMap& labels, const LowShotSplit& split,
                                     bool inclusive);

nlohmann::json to_json(const LowShotSplit& split);
LowShotSplit split_from_json(const nlohmann::json& j);

}  // namespace susa
