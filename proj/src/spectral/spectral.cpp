#include "susa/spectral/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "susa/numerics/log.hpp"

namespace susa {

namespace {

constexpr double kFwhmToSigma = 2.3548;

bool same_band(double c1, double f1, double c2, double f2) {
  return std::abs(c1 - c2) <= 1e-9 * std::max(1.0, std::abs(c1)) &&
         std::abs(f1 - f2) <= 1e-9 * std::max(1.0, std::abs(f1));
}

}  // namespace

void SensorSpec::validate() const {
  if (centers_nm.size() != fwhm_nm.size()) {
    throw std::invalid_argument(fmt::format("sensor {}: {} band centers but {} FWHMs", name,
                                            centers_nm.size(), fwhm_nm.size()));
  }
  if (centers_nm.empty()) throw std::invalid_argument(fmt::format("sensor {}: no bands", name));
  for (std::size_t i = 0; i < centers_nm.size(); ++i) {
    if (!std::isfinite(centers_nm[i]) || !(fwhm_nm[i] > 0.0) || !std::isfinite(fwhm_nm[i])) {
      throw std::invalid_argument(fmt::format("sensor {}: band {} has invalid center/FWHM", name, i));
    }
    if (i > 0 && !(centers_nm[i] > centers_nm[i - 1])) {
      throw std::invalid_argument(
          fmt::format("sensor {}: band centers not strictly increasing at band {}", name, i));
    }
  }
}

SensorSpec uniform_sensor(std::string name, double first_nm, double last_nm, std::size_t bands,
                          double fwhm_nm) {
  SensorSpec s{std::move(name), {}, {}};
  for (std::size_t i = 0; i < bands; ++i) {
    const double t = bands == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(bands - 1);
    s.centers_nm.push_back(first_nm + t * (last_nm - first_nm));
    s.fwhm_nm.push_back(fwhm_nm);
  }
  s.validate();
  return s;
}

void HsiCube::validate() const {
  if (values.rank() != 3) {
    throw ShapeError("cube values must be [H,W,B], got " + shape_string(values.shape()));
  }
  spec.validate();
  if (spec.bands() != values.dim(2)) {
    throw ShapeError(fmt::format("cube has {} bands but sensor {} describes {}", values.dim(2),
                                 spec.name, spec.bands()));
  }
}

std::vector<double> resampling_matrix(const SensorSpec& source, const SensorSpec& target,
                                      const std::vector<bool>& source_mask) {
  source.validate();
  target.validate();
  const std::size_t ns = source.bands(), nt = target.bands();
  if (!source_mask.empty() && source_mask.size() != ns) {
    throw std::invalid_argument("resampling_matrix: mask length differs from source band count");
  }
  auto usable = [&](std::size_t s) { return source_mask.empty() || source_mask[s]; };
  std::vector<double> w(nt * ns, 0.0);
  for (std::size_t t = 0; t < nt; ++t) {
    const double c = target.centers_nm[t], f = target.fwhm_nm[t];
    double* row = &w[t * ns];
    bool copied = false;
    for (std::size_t s = 0; s < ns && !copied; ++s) {
      if (usable(s) && same_band(c, f, source.centers_nm[s], source.fwhm_nm[s])) {
        row[s] = 1.0;
        copied = true;
      }
    }
    if (copied) continue;
    const double sigma = f / kFwhmToSigma;
    double total = 0.0;
    for (std::size_t s = 0; s < ns; ++s) {
      const double d = source.centers_nm[s] - c;
      if (!usable(s) || std::abs(d) > 2.0 * f) continue;
      row[s] = std::exp(-0.5 * (d / sigma) * (d / sigma));
      total += row[s];
    }
    if (!(total > 0.0)) {
      throw std::invalid_argument(fmt::format(
          "resample_bands: target band {} ({} nm, FWHM {} nm) overlaps no source band of {}", t, c,
          f, source.name));
    }
    for (std::size_t s = 0; s < ns; ++s) row[s] /= total;
  }
  return w;
}

HsiCube resample_bands(const HsiCube& cube, const SensorSpec& target) {
  cube.validate();
  const auto w = resampling_matrix(cube.spec, target);
  const std::size_t ns = cube.bands(), nt = target.bands();
  const std::size_t pixels = cube.height() * cube.width();
  HsiCube out{Tensor<float>({cube.height(), cube.width(), nt}), target, cube.gsd_m};
  const float* in = cube.values.data();
  float* o = out.values.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    const float* px = in + p * ns;
    for (std::size_t t = 0; t < nt; ++t) {
      const double* row = &w[t * ns];
      double acc = 0.0;
      for (std::size_t s = 0; s < ns; ++s) acc += row[s] * px[s];
      o[p * nt + t] = static_cast<float>(acc);
    }
  }
  return out;
}

HsiCube exclude_bands(const HsiCube& cube, const std::vector<std::size_t>& band_indices) {
  cube.validate();
  const std::size_t nb = cube.bands();
  std::vector<bool> drop(nb, false);
  for (std::size_t i : band_indices) {
    if (i >= nb) {
      throw std::out_of_range(fmt::format("exclude_bands: band {} out of range [0,{})", i, nb));
    }
    if (drop[i]) throw std::invalid_argument(fmt::format("exclude_bands: band {} listed twice", i));
    drop[i] = true;
  }
  std::vector<std::size_t> keep;
  for (std::size_t b = 0; b < nb; ++b) {
    if (!drop[b]) keep.push_back(b);
  }
  if (keep.empty()) throw std::invalid_argument("exclude_bands: every band excluded");
  HsiCube out{Tensor<float>({cube.height(), cube.width(), keep.size()}),
              SensorSpec{cube.spec.name, {}, {}}, cube.gsd_m};
  for (std::size_t b : keep) {
    out.spec.centers_nm.push_back(cube.spec.centers_nm[b]);
    out.spec.fwhm_nm.push_back(cube.spec.fwhm_nm[b]);
  }
  const std::size_t pixels = cube.height() * cube.width();
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t k = 0; k < keep.size(); ++k) {
      out.values[p * keep.size() + k] = cube.values[p * nb + keep[k]];
    }
  }
  return out;
}

FeatureStats compute_stats(const Tensor<float>& data) {
  if (data.rank() < 2) throw ShapeError("compute_stats: need samples x features, got " +
                                        shape_string(data.shape()));
  const std::size_t f = data.shape().back();
  const std::size_t n = f == 0 ? 0 : data.size() / f;
  if (n < 2) throw std::invalid_argument("compute_stats: need at least two samples per feature");
  FeatureStats st{std::vector<double>(f, 0.0), std::vector<double>(f, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) st.mean[j] += data[i * f + j];
  }
  for (auto& m : st.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      const double d = data[i * f + j] - st.mean[j];
      st.stddev[j] += d * d;
    }
  }
  for (auto& s : st.stddev) s = std::sqrt(s / static_cast<double>(n));
  // Summation rounding would leave a constant feature a hair off its own mean.
  for (std::size_t j = 0; j < f; ++j) {
    bool constant = true;
    for (std::size_t i = 1; i < n && constant; ++i) constant = data[i * f + j] == data[j];
    if (constant) {
      st.mean[j] = data[j];
      st.stddev[j] = 0.0;
    }
  }
  return st;
}

void apply_stats(Tensor<float>& data, const FeatureStats& stats) {
  const std::size_t f = data.shape().empty() ? 0 : data.shape().back();
  if (stats.mean.size() != f || stats.stddev.size() != f) {
    throw ShapeError(fmt::format("apply_stats: data has {} features, statistics have {}", f,
                                 stats.mean.size()));
  }
  std::vector<double> inv(f);
  for (std::size_t j = 0; j < f; ++j) inv[j] = 1.0 / std::max(stats.stddev[j], kStddevFloor);
  const std::size_t n = f == 0 ? 0 : data.size() / f;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) {
      float& v = data[i * f + j];
      v = static_cast<float>((v - stats.mean[j]) * inv[j]);
    }
  }
}

FeatureStats standardize(Tensor<float>& data) {
  auto st = compute_stats(data);
  std::size_t constant = 0;
  for (double s : st.stddev) constant += s < kStddevFloor;
  if (constant > 0) {
    log::warn("standardize_constant_features", {{"count", std::to_string(constant)}});
  }
  apply_stats(data, st);
  return st;
}

}  // namespace susa
