#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "susa/numerics/grad_check.hpp"

namespace susa {

/// Outcome of repeated randomized finite-difference checks for one kernel.
struct KernelCheckSummary {
  std::string kernel;
  std::size_t trials = 0;
  double max_relative_error = 0.0;
  std::string worst_parameter;
};

/// Runs `trials` randomized 64-bit gradient checks of every differentiable
/// kernel. Each trial draws small random shapes and values and checks the
/// scalar loss sum(r * kernel(inputs)) for a random projection r.
std::vector<KernelCheckSummary> kernel_gradient_suite(std::size_t trials, std::uint64_t seed);

}  // namespace susa
