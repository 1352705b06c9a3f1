#include "susa/dataio/dataio.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "susa/numerics/log.hpp"

namespace susa {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

void append_f32le(std::string& out, std::span<const float> values) {
  const std::size_t at = out.size();
  out.resize(at + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &values[i], 4);
    u = byteswap_if_big(u);
    std::memcpy(&out[at + i * 4], &u, 4);
  }
}

void read_f32le(const char* src, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, src + i * 4, 4);
    u = byteswap_if_big(u);
    std::memcpy(&out[i], &u, 4);
  }
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& s, const std::string& key, const fs::path& path) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || s[0] == '-') {
    throw FormatError(fmt::format("{}: {} = '{}' is not a non-negative integer", path.string(), key, s));
  }
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& s, const std::string& key, const fs::path& path) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw FormatError(fmt::format("{}: {} has non-numeric value '{}'", path.string(), key, s));
  }
  return v;
}

std::vector<double> parse_list(const std::string& s, const std::string& key, const fs::path& path) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(parse_double(tok, key, path));
  return out;
}

std::string join(const std::vector<double>& v) { return fmt::format("{}", fmt::join(v, " ")); }

std::string render(const Sidecar& sc) {
  std::string out;
  for (const auto& [k, v] : sc) out += k + " = " + v + "\n";
  return out;
}

void check_payload(const fs::path& path, std::size_t expected, std::size_t actual) {
  if (expected != actual) {
    throw FormatError(fmt::format("{}: payload size mismatch: expected {} bytes, found {} bytes",
                                  path.string(), expected, actual));
  }
}

class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    fd_ = ::open(dir.empty() ? "." : dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd_ >= 0) ::flock(fd_, LOCK_EX);
  }
  ~DirectoryLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace

LabelMap::LabelMap(std::size_t h, std::size_t w, std::vector<std::string> names)
    : height(h), width(w), ids(h * w, 0), class_names(std::move(names)) {}

void LabelMap::validate() const {
  if (ids.size() != height * width) {
    throw ShapeError(fmt::format("label map {}x{} holds {} ids", height, width, ids.size()));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] > classes()) {
      throw std::invalid_argument(fmt::format("label map: pixel {} has class {} but only {} classes",
                                              i, ids[i], classes()));
    }
  }
}

fs::path sidecar_path(const fs::path& data_path) {
  fs::path p = data_path;
  p += ".hdr";
  return p;
}

Sidecar read_sidecar(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("{}: cannot open header", path.string()));
  Sidecar sc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw FormatError(fmt::format("{}:{}: expected 'key = value'", path.string(), lineno));
    }
    sc.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return sc;
}

std::string sidecar_value(const Sidecar& sc, const std::string& key, const fs::path& path) {
  for (const auto& [k, v] : sc) {
    if (k == key) return v;
  }
  throw FormatError(fmt::format("{}: header lacks '{}'", path.string(), key));
}

namespace {

std::string optional_value(const Sidecar& sc, const std::string& key, std::string fallback) {
  for (const auto& [k, v] : sc) {
    if (k == key) return v;
  }
  return fallback;
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path dir = path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  DirectoryLock lock(dir);
  fs::path tmp = path;
  tmp += fmt::format(".tmp{}", ::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(fmt::format("{}: cannot open for writing", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw FormatError(fmt::format("{}: write failed", tmp.string()));
    }
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("{}: cannot open", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_cube(const fs::path& path, const HsiCube& cube) {
  cube.validate();
  std::string payload;
  append_f32le(payload, cube.values.values());
  const Sidecar sc = {{"height", std::to_string(cube.height())},
                      {"width", std::to_string(cube.width())},
                      {"bands", std::to_string(cube.bands())},
                      {"band_centers_nm", join(cube.spec.centers_nm)},
                      {"fwhm_nm", join(cube.spec.fwhm_nm)},
                      {"sensor", cube.spec.name},
                      {"gsd_m", fmt::format("{}", cube.gsd_m)},
                      {"dtype", "f32le"},
                      {"interleave", "bip"}};
  write_file_atomic(path, payload);
  write_file_atomic(sidecar_path(path), render(sc));
}

namespace {

struct RasterHeader {
  std::size_t height, width, bands;
  SensorSpec spec;
  double gsd;
  std::string dtype, interleave;
  std::size_t offset;
};

RasterHeader read_raster_header(const fs::path& path) {
  const auto hp = sidecar_path(path);
  const auto sc = read_sidecar(hp);
  RasterHeader h;
  h.height = parse_size(sidecar_value(sc, "height", hp), "height", hp);
  h.width = parse_size(sidecar_value(sc, "width", hp), "width", hp);
  h.bands = parse_size(sidecar_value(sc, "bands", hp), "bands", hp);
  h.spec.name = optional_value(sc, "sensor", "unknown");
  h.spec.centers_nm = parse_list(sidecar_value(sc, "band_centers_nm", hp), "band_centers_nm", hp);
  h.spec.fwhm_nm = parse_list(sidecar_value(sc, "fwhm_nm", hp), "fwhm_nm", hp);
  h.gsd = parse_double(optional_value(sc, "gsd_m", "1"), "gsd_m", hp);
  h.dtype = optional_value(sc, "dtype", "f32le");
  h.interleave = optional_value(sc, "interleave", "bip");
  h.offset = parse_size(optional_value(sc, "header_offset", "0"), "header_offset", hp);
  if (h.spec.bands() != h.bands) {
    throw FormatError(fmt::format("{}: bands = {} but {} band centers", hp.string(), h.bands,
                                  h.spec.bands()));
  }
  return h;
}

}  // namespace

HsiCube load_cube(const fs::path& path) {
  const auto h = read_raster_header(path);
  if (h.dtype != "f32le" || h.interleave != "bip" || h.offset != 0) {
    throw FormatError(fmt::format("{}: native cubes are f32le/bip without offset; use import_raw",
                                  path.string()));
  }
  const auto bytes = read_file(path);
  const std::size_t count = h.height * h.width * h.bands;
  check_payload(path, count * 4, bytes.size());
  HsiCube cube{Tensor<float>({h.height, h.width, h.bands}), h.spec, h.gsd};
  read_f32le(bytes.data(), cube.values.values());
  cube.validate();
  return cube;
}

HsiCube import_raw(const fs::path& path) {
  const auto h = read_raster_header(path);
  std::size_t width_bytes;
  if (h.dtype == "f32le") width_bytes = 4;
  else if (h.dtype == "u16le" || h.dtype == "i16le") width_bytes = 2;
  else throw FormatError(fmt::format("{}: unsupported dtype '{}'", path.string(), h.dtype));
  if (h.interleave != "bip" && h.interleave != "bil" && h.interleave != "bsq") {
    throw FormatError(fmt::format("{}: unsupported interleave '{}'", path.string(), h.interleave));
  }
  const auto bytes = read_file(path);
  const std::size_t count = h.height * h.width * h.bands;
  check_payload(path, h.offset + count * width_bytes, bytes.size());
  HsiCube cube{Tensor<float>({h.height, h.width, h.bands}), h.spec, h.gsd};
  const char* src = bytes.data() + h.offset;
  for (std::size_t r = 0; r < h.height; ++r) {
    for (std::size_t c = 0; c < h.width; ++c) {
      for (std::size_t b = 0; b < h.bands; ++b) {
        std::size_t idx;
        if (h.interleave == "bip") idx = (r * h.width + c) * h.bands + b;
        else if (h.interleave == "bil") idx = (r * h.bands + b) * h.width + c;
        else idx = (b * h.height + r) * h.width + c;
        float v;
        if (width_bytes == 4) {
          read_f32le(src + idx * 4, std::span<float>(&v, 1));
        } else {
          std::uint16_t u;
          std::memcpy(&u, src + idx * 2, 2);
          u = byteswap_if_big(u);
          v = h.dtype == "u16le" ? static_cast<float>(u)
                                 : static_cast<float>(std::bit_cast<std::int16_t>(u));
        }
        cube.values[(r * h.width + c) * h.bands + b] = v;
      }
    }
  }
  cube.validate();
  return cube;
}

void save_labels(const fs::path& path, const LabelMap& labels) {
  labels.validate();
  std::string payload(labels.ids.size() * 2, '\0');
  for (std::size_t i = 0; i < labels.ids.size(); ++i) {
    const std::uint16_t u = byteswap_if_big(labels.ids[i]);
    std::memcpy(&payload[i * 2], &u, 2);
  }
  std::string names;
  for (const auto& n : labels.class_names) {
    if (n.find(',') != std::string::npos || n.find('\n') != std::string::npos) {
      throw std::invalid_argument("class name '" + n + "' contains ',' or a newline");
    }
    names += (names.empty() ? "" : ",") + n;
  }
  const Sidecar sc = {{"height", std::to_string(labels.height)},
                      {"width", std::to_string(labels.width)},
                      {"classes", std::to_string(labels.classes())},
                      {"class_names", names},
                      {"dtype", "u16le"}};
  write_file_atomic(path, payload);
  write_file_atomic(sidecar_path(path), render(sc));
}

LabelMap load_labels(const fs::path& path) {
  const auto hp = sidecar_path(path);
  const auto sc = read_sidecar(hp);
  const auto h = parse_size(sidecar_value(sc, "height", hp), "height", hp);
  const auto w = parse_size(sidecar_value(sc, "width", hp), "width", hp);
  const auto c = parse_size(sidecar_value(sc, "classes", hp), "classes", hp);
  std::vector<std::string> names;
  std::istringstream in(optional_value(sc, "class_names", ""));
  for (std::string n; std::getline(in, n, ',');) names.push_back(trim(n));
  if (names.size() != c) {
    throw FormatError(fmt::format("{}: classes = {} but {} class names", hp.string(), c, names.size()));
  }
  LabelMap labels(h, w, std::move(names));
  const auto bytes = read_file(path);
  check_payload(path, h * w * 2, bytes.size());
  for (std::size_t i = 0; i < labels.ids.size(); ++i) {
    std::uint16_t u;
    std::memcpy(&u, bytes.data() + i * 2, 2);
    labels.ids[i] = byteswap_if_big(u);
  }
  labels.validate();
  return labels;
}

void save_tensor(const fs::path& path, const Tensor<float>& t, const std::string& kind) {
  std::string payload;
  append_f32le(payload, t.values());
  std::string shape;
  for (std::size_t d : t.shape()) shape += (shape.empty() ? "" : " ") + std::to_string(d);
  write_file_atomic(path, payload);
  write_file_atomic(sidecar_path(path),
                    render({{"kind", kind}, {"shape", shape}, {"dtype", "f32le"}}));
}

Tensor<float> load_tensor(const fs::path& path, std::string* kind) {
  const auto hp = sidecar_path(path);
  const auto sc = read_sidecar(hp);
  Shape shape;
  for (double d : parse_list(sidecar_value(sc, "shape", hp), "shape", hp)) {
    if (d < 0 || d != std::floor(d)) throw FormatError(hp.string() + ": bad shape entry");
    shape.push_back(static_cast<std::size_t>(d));
  }
  if (kind) *kind = optional_value(sc, "kind", "");
  const auto bytes = read_file(path);
  check_payload(path, shape_size(shape) * 4, bytes.size());
  Tensor<float> t(shape);
  read_f32le(bytes.data(), t.values());
  return t;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["model_kind"] = ckpt.model_kind;
  manifest["config"] = ckpt.config;
  auto& list = manifest["parameters"] = nlohmann::json::array();
  std::string payload;
  std::size_t offset = 0;
  for (const auto& p : ckpt.params) {
    list.push_back({{"name", p.name},
                    {"kind", std::string(to_string(p.kind))},
                    {"shape", p.value.shape()},
                    {"trainable", p.trainable},
                    {"offset_bytes", offset}});
    append_f32le(payload, p.value.values());
    offset += p.value.size() * 4;
  }
  manifest["payload_bytes"] = payload.size();
  const std::string text = manifest.dump(2) + "\n";
  return fmt::format("susa-checkpoint 1 {}\n", text.size()) + text + payload;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  std::istringstream first(bytes.substr(0, nl == std::string::npos ? 0 : nl));
  std::string magic;
  int version = 0;
  std::size_t manifest_bytes = 0;
  first >> magic >> version >> manifest_bytes;
  if (nl == std::string::npos || magic != "susa-checkpoint" || version != 1) {
    throw FormatError("checkpoint: missing 'susa-checkpoint 1' header line");
  }
  if (bytes.size() < nl + 1 + manifest_bytes) throw FormatError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(nl + 1, manifest_bytes));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }
  const std::size_t payload_at = nl + 1 + manifest_bytes;
  const std::size_t payload_size = bytes.size() - payload_at;
  Checkpoint ckpt;
  try {
    ckpt.model_kind = manifest.at("model_kind").get<std::string>();
    ckpt.config = manifest.at("config");
    std::size_t expected = 0;
    for (const auto& e : manifest.at("parameters")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset_bytes").get<std::size_t>();
      const std::string name = e.at("name").get<std::string>();
      if (offset != expected) {
        throw FormatError(fmt::format("checkpoint: parameter {} at offset {} but {} expected", name,
                                      offset, expected));
      }
      const std::size_t n = shape_size(shape);
      if (offset + n * 4 > payload_size) {
        throw FormatError(fmt::format("checkpoint: parameter {} {} runs past the {}-byte payload",
                                      name, shape_string(shape), payload_size));
      }
      Parameter<float> p(name, param_kind_from_string(e.at("kind").get<std::string>()),
                         Tensor<float>(shape));
      p.trainable = e.value("trainable", true);
      read_f32le(bytes.data() + payload_at + offset, p.value.values());
      ckpt.params.push_back(std::move(p));
      expected += n * 4;
    }
    if (expected != payload_size || manifest.at("payload_bytes").get<std::size_t>() != payload_size) {
      throw FormatError(fmt::format("checkpoint: manifest describes {} payload bytes, file has {}",
                                    expected, payload_size));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const fs::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

PatchSample sample_patches(const std::vector<HsiCube>& cubes, std::size_t n, std::size_t size,
                           std::uint64_t seed, double validation_fraction) {
  if (size == 0) throw std::invalid_argument("sample_patches: patch size must be positive");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
    throw std::invalid_argument("sample_patches: validation fraction must be in [0, 1)");
  }
  std::vector<std::size_t> positions(cubes.size(), 0);
  std::optional<std::size_t> bands;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    const auto& c = cubes[i];
    if (c.height() < size || c.width() < size) {
      log::warn("patch_cube_skipped", {{"cube", std::to_string(i)},
                                       {"height", std::to_string(c.height())},
                                       {"width", std::to_string(c.width())},
                                       {"patch", std::to_string(size)}});
      continue;
    }
    if (bands && *bands != c.bands()) {
      throw ShapeError(fmt::format("sample_patches: cube {} has {} bands, earlier cubes {}", i,
                                   c.bands(), *bands));
    }
    bands = c.bands();
    positions[i] = (c.height() - size + 1) * (c.width() - size + 1);
  }
  std::vector<std::size_t> cumulative(positions.size());
  std::partial_sum(positions.begin(), positions.end(), cumulative.begin());
  const std::size_t total = cumulative.empty() ? 0 : cumulative.back();
  if (total == 0 && n > 0) throw std::invalid_argument("sample_patches: no cube fits a patch");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total == 0 ? 0 : total - 1);
  std::vector<PatchCoord> all;
  all.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t flat = pick(rng);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), flat);
    const std::size_t cube = static_cast<std::size_t>(it - cumulative.begin());
    const std::size_t local = flat - (cube == 0 ? 0 : cumulative[cube - 1]);
    const std::size_t cols = cubes[cube].width() - size + 1;
    all.push_back({cube, local / cols, local % cols});
  }
  const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
  PatchSample out;
  out.size = size;
  out.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_val));
  out.validation.assign(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
  return out;
}

Tensor<float> gather_patches(const std::vector<HsiCube>& cubes,
                             const std::vector<PatchCoord>& coords, std::size_t size) {
  if (coords.empty()) throw std::invalid_argument("gather_patches: no coordinates");
  const std::size_t b = cubes.at(coords.front().cube).bands();
  Tensor<float> out({coords.size(), size, size, b});
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto& pc = coords[i];
    const auto& cube = cubes.at(pc.cube);
    if (cube.bands() != b || pc.row + size > cube.height() || pc.col + size > cube.width()) {
      throw ShapeError(fmt::format("gather_patches: patch {} at ({},{}) of cube {} does not fit", i,
                                   pc.row, pc.col, pc.cube));
    }
    for (std::size_t r = 0; r < size; ++r) {
      const float* src = &cube.values[((pc.row + r) * cube.width() + pc.col) * b];
      std::copy(src, src + size * b, &out.at(i, r, 0, 0));
    }
  }
  return out;
}

namespace {

double spectral_angle(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::acos(std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

std::vector<double> smooth_curve(std::mt19937_64& rng, std::size_t bands) {
  std::uniform_real_distribution<double> base(0.2, 0.6), amp(-0.25, 0.25), width(0.08, 0.3),
      center(0.0, 1.0);
  std::vector<double> curve(bands, base(rng));
  for (int k = 0; k < 3; ++k) {
    const double a = amp(rng), w = width(rng), c = center(rng);
    for (std::size_t b = 0; b < bands; ++b) {
      const double t = bands == 1 ? 0.0 : static_cast<double>(b) / static_cast<double>(bands - 1);
      curve[b] += a * std::exp(-0.5 * (t - c) * (t - c) / (w * w));
    }
  }
  for (auto& v : curve) v = std::clamp(v, 0.02, 1.0);
  return curve;
}

// Low-frequency random field with values roughly in [-1, 1].
std::vector<double> smooth_field(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi), freq(0.5, 3.0);
  std::vector<double> field(h * w, 0.0);
  constexpr int terms = 4;
  for (int k = 0; k < terms; ++k) {
    const double fy = freq(rng) / static_cast<double>(h), fx = freq(rng) / static_cast<double>(w);
    const double p = phase(rng);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        field[r * w + c] += std::sin(2 * std::numbers::pi * (fy * r + fx * c) + p) / std::sqrt(terms);
      }
    }
  }
  return field;
}

}  // namespace

SyntheticScene synth_scene(const SyntheticSceneSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("synth_scene: need at least 2 classes");
  if (spec.bands < 4) throw std::invalid_argument("synth_scene: need at least 4 bands");
  if (spec.height == 0 || spec.width == 0) throw std::invalid_argument("synth_scene: empty image");
  if (spec.classes > 65535) throw std::invalid_argument("synth_scene: too many classes");
  std::mt19937_64 rng(spec.seed);
  const std::size_t h = spec.height, w = spec.width, nb = spec.bands, nc = spec.classes;

  SyntheticScene scene;
  for (std::size_t c = 0; c < nc; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) {
        throw std::invalid_argument("synth_scene: cannot place endmembers with the requested angle");
      }
      auto curve = smooth_curve(rng, nb);
      bool separated = true;
      for (const auto& prev : scene.endmembers) {
        separated = separated && spectral_angle(prev, curve) >= spec.min_angle_deg;
      }
      if (separated) {
        scene.endmembers.push_back(std::move(curve));
        break;
      }
    }
  }
  std::vector<std::vector<double>> nuisance;
  for (int k = 0; k < 3; ++k) {
    auto curve = smooth_curve(rng, nb);
    const double mean = std::accumulate(curve.begin(), curve.end(), 0.0) / static_cast<double>(nb);
    for (auto& v : curve) v -= mean;
    nuisance.push_back(std::move(curve));
  }

  std::vector<std::string> names;
  for (std::size_t c = 1; c <= nc; ++c) names.push_back(fmt::format("class_{}", c));
  LabelMap labels(h, w, names);
  double radius = spec.blob_radius;
  std::size_t blobs = std::max<std::size_t>(1, spec.blobs_per_class);
  for (int attempt = 0;; ++attempt) {
    std::uniform_real_distribution<double> ry(0.0, static_cast<double>(h)), rx(0.0, static_cast<double>(w));
    std::vector<std::vector<std::pair<double, double>>> centers(nc);
    for (auto& cs : centers) {
      for (std::size_t b = 0; b < blobs; ++b) cs.emplace_back(ry(rng), rx(rng));
    }
    std::vector<std::size_t> counts(nc, 0);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        std::size_t best = 0;
        double best_score = -1.0;
        for (std::size_t c = 0; c < nc; ++c) {
          double s = 0.0;
          for (const auto& [cy, cx] : centers[c]) {
            const double dy = r - cy, dx = col - cx;
            s += std::exp(-(dy * dy + dx * dx) / (2 * radius * radius));
          }
          if (s > best_score) {
            best_score = s;
            best = c;
          }
        }
        labels.at(r, col) = static_cast<std::uint16_t>(best + 1);
        ++counts[best];
      }
    }
    const std::size_t need = std::min(spec.min_class_pixels, h * w / nc);
    if (std::all_of(counts.begin(), counts.end(), [&](std::size_t n) { return n >= need; })) break;
    if (attempt == 8) {
      throw std::invalid_argument(
          fmt::format("synth_scene: could not place all {} classes in a {}x{} image", nc, h, w));
    }
    log::info("synth_scene_retry", {{"attempt", std::to_string(attempt + 1)}});
    radius *= 1.25;
    ++blobs;
  }

  const auto illumination = smooth_field(rng, h, w);
  std::vector<std::vector<double>> mixing;
  for (std::size_t k = 0; k < nuisance.size(); ++k) mixing.push_back(smooth_field(rng, h, w));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double spacing = (spec.last_nm - spec.first_nm) / static_cast<double>(nb - 1);
  scene.cube = HsiCube{Tensor<float>({h, w, nb}),
                       uniform_sensor("synthetic", spec.first_nm, spec.last_nm, nb, 1.2 * spacing),
                       1.0};
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto& e = scene.endmembers[labels.ids[p] - 1];
    const double scale = 1.0 + spec.variation * illumination[p];
    std::vector<double> z(nuisance.size());
    for (std::size_t k = 0; k < z.size(); ++k) {
      z[k] = spec.variation * (mixing[k][p] + (spec.variation > 0 ? gauss(rng) : 0.0));
    }
    for (std::size_t b = 0; b < nb; ++b) {
      double v = scale * e[b];
      for (std::size_t k = 0; k < z.size(); ++k) v += z[k] * nuisance[k][b];
      if (spec.noise > 0) v += spec.noise * gauss(rng);
      scene.cube.values[p * nb + b] = static_cast<float>(v);
    }
  }
  scene.labels = std::move(labels);
  return scene;
}

std::size_t LowShotSplit::total() const {
  std::size_t n = 0;
  for (const auto& v : pixels) n += v.size();
  return n;
}

LowShotSplit lowshot_split(const LabelMap& labels, std::size_t per_class, std::uint64_t seed,
                           const std::map<std::size_t, std::size_t>& overrides) {
  labels.validate();
  const std::size_t nc = labels.classes();
  for (const auto& [c, l] : overrides) {
    if (c < 1 || c > nc) throw std::invalid_argument(fmt::format("lowshot_split: no class {}", c));
    if (l < 1) throw std::invalid_argument("lowshot_split: L must be at least 1");
  }
  if (per_class < 1) throw std::invalid_argument("lowshot_split: L must be at least 1");
  std::vector<std::vector<Pixel>> available(nc);
  for (std::size_t r = 0; r < labels.height; ++r) {
    for (std::size_t c = 0; c < labels.width; ++c) {
      if (const auto id = labels.at(r, c); id > 0) available[id - 1].emplace_back(r, c);
    }
  }
  LowShotSplit split;
  split.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < nc; ++c) {
    const auto it = overrides.find(c + 1);
    const std::size_t want = it == overrides.end() ? per_class : it->second;
    auto& pool = available[c];
    std::vector<Pixel> chosen;
    if (pool.size() <= want) {
      chosen = pool;
    } else {
      std::shuffle(pool.begin(), pool.end(), rng);
      chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
    }
    std::sort(chosen.begin(), chosen.end());
    split.requested.push_back(want);
    split.shortfall.push_back(want - chosen.size());
    if (chosen.size() < want) {
      log::warn(chosen.empty() ? "lowshot_empty_class" : "lowshot_shortfall",
                {{"class", std::to_string(c + 1)},
                 {"requested", std::to_string(want)},
                 {"available", std::to_string(chosen.size())}});
    }
    split.pixels.push_back(std::move(chosen));
  }
  return split;
}

std::vector<Pixel> evaluation_pixels(const LabelMap& labels, const LowShotSplit& split,
                                     bool inclusive) {
  std::vector<bool> train(labels.height * labels.width, false);
  if (!inclusive) {
    for (const auto& cls : split.pixels) {
      for (const auto& [r, c] : cls) train.at(r * labels.width + c) = true;
    }
  }
  std::vector<Pixel> out;
  for (std::size_t r = 0; r < labels.height; ++r) {
    for (std::size_t c = 0; c < labels.width; ++c) {
      if (labels.at(r, c) > 0 && !train[r * labels.width + c]) out.emplace_back(r, c);
    }
  }
  return out;
}

nlohmann::json to_json(const LowShotSplit& split) {
  return {{"seed", split.seed},
          {"pixels", split.pixels},
          {"requested", split.requested},
          {"shortfall", split.shortfall}};
}

LowShotSplit split_from_json(const nlohmann::json& j) {
  LowShotSplit s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.pixels = j.at("pixels").get<std::vector<std::vector<Pixel>>>();
  s.requested = j.at("requested").get<std::vector<std::size_t>>();
  s.shortfall = j.at("shortfall").get<std::vector<std::size_t>>();
  return s;
}

nlohmann::json to_json(const FeatureStats& s) { return {{"mean", s.mean}, {"stddev", s.stddev}}; }

FeatureStats feature_stats_from_json(const nlohmann::json& j) {
  return {j.at("mean").get<std::vector<double>>(), j.at("stddev").get<std::vector<double>>()};
}

nlohmann::json to_json(const SensorSpec& s) {
  return {{"name", s.name}, {"centers_nm", s.centers_nm}, {"fwhm_nm", s.fwhm_nm}};
}

SensorSpec sensor_from_json(const nlohmann::json& j) {
  SensorSpec s{j.at("name").get<std::string>(), j.at("centers_nm").get<std::vector<double>>(),
               j.at("fwhm_nm").get<std::vector<double>>()};
  s.validate();
  return s;
}

}  // namespace susa
