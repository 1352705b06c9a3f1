#include "susa/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace susa {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<double()>& loss,
                           std::span<Parameter<double>* const> params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (Parameter<double>* p : params) {
    if (!p->trainable) continue;
    require_same_shape(p->value.shape(), p->grad.shape(), "grad_check " + p->name);
    std::vector<std::size_t> entries(p->value.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_parameter > 0 && entries.size() > options.max_entries_per_parameter) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_parameter);
      std::sort(entries.begin(), entries.end());
    }
    for (std::size_t i : entries) {
      const double original = p->value[i];
      p->value[i] = original + options.step;
      const double plus = loss();
      p->value[i] = original - options.step;
      const double minus = loss();
      p->value[i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NonFiniteError("grad_check: non-finite loss while perturbing " + p->name + "[" +
                             std::to_string(i) + "]");
      }
      const double analytic = p->grad[i];
      if (!std::isfinite(analytic)) {
        throw NonFiniteError("grad_check: non-finite analytic gradient for " + p->name + "[" +
                             std::to_string(i) + "]");
      }
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = relative_error(analytic, numeric);
      ++report.entries_checked;
      if (err > report.max_relative_error || report.worst_parameter.empty()) {
        report.max_relative_error = std::max(err, report.max_relative_error);
        if (err >= report.max_relative_error) {
          report.worst_parameter = p->name;
          report.worst_index = i;
          report.worst_analytic = analytic;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace susa
