#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "susa/numerics/tensor.hpp"

namespace susa {

struct GradCheckOptions {
  double step = 1e-5;
  /// Entries checked per parameter; 0 checks every entry. When limited, the
  /// entries are drawn with a fixed-seed generator.
  std::size_t max_entries_per_parameter = 0;
  std::uint64_t seed = 0;
  double tolerance = 1e-5;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;

  bool passed(double tolerance = 1e-5) const { return max_relative_error < tolerance; }
};

/// Compares the gradients already stored in `params` against central
/// differences of `loss`. Relative error per entry is
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8); the maximum is
/// reported. `loss` must be a pure function of the parameter values.
/// Throws NonFiniteError naming the parameter if an evaluation is not finite.
GradCheckReport grad_check(const std::function<double()>& loss,
                           std::span<Parameter<double>* const> params,
                           const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric);

}  // namespace susa
