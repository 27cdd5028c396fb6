#pragma once

// Finite-difference gradient suite over every primitive op, every loss and the
// end-to-end model loss for each task. Shapes and values are drawn per seed.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace affect::verify {

struct SuiteOptions {
  std::vector<std::string> ops;  // empty runs every case
  std::size_t seeds = 100;
  double tol = 1e-4;
  double step = 1e-5;
  std::uint64_t base_seed = 0;
};

struct SuiteResult {
  std::string op;
  std::size_t seeds_run = 0;
  std::size_t seeds_failed = 0;
  double max_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

/// Case names in run order.
const std::vector<std::string>& suite_ops();

/// Throws ConfigError on an unknown op name or invalid options.
std::vector<SuiteResult> run_gradcheck_suite(const SuiteOptions& options);

}  // namespace affect::verify
