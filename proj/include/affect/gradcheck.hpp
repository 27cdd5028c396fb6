#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "affect/tensor.hpp"

namespace affect::num {

struct GradcheckOptions {
  double step = 1e-5;  // central-difference half-width, must lie in [1e-6, 1e-3]
  double tol = 1e-4;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor * max(1, |f|)).
  // The floor keeps exact-zero gradients from dividing roundoff by zero.
  double floor = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of this many per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t sample_seed = 0;
};

struct ParamGradcheck {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<ParamGradcheck> params;
  double tol = 0.0;

  bool passed() const;
  double max_rel_error() const;
};

/// Compares the recorded backward pass of a scalar-valued `f` against central
/// finite differences (f(p+h) - f(p-h)) / 2h for every listed leaf parameter.
/// `f` must rebuild its graph from the current parameter values on each call.
/// Throws NumericError when f is non-finite at the evaluation point.
GradcheckReport gradcheck(const std::function<Tensor()>& f, std::span<NamedTensor> params,
                          const GradcheckOptions& options = {});

}  // namespace affect::num
