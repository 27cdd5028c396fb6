#include "affect/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "affect/error.hpp"

namespace affect::num {

bool GradcheckReport::passed() const {
  return std::all_of(params.begin(), params.end(), [](const ParamGradcheck& p) { return p.passed; });
}

double GradcheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_rel_error);
  return worst;
}

namespace {

double evaluate(const std::function<Tensor()>& f, const char* where) {
  double v = 0.0;
  try {
    v = f().item();
  } catch (const NumericError& e) {
    throw NumericError(fmt::format("gradcheck: objective failed at {}: {}", where, e.what()));
  }
  if (!std::isfinite(v)) throw NumericError(fmt::format("gradcheck: objective is {} at {}", v, where));
  return v;
}

std::vector<std::size_t> pick_coords(std::size_t n, const GradcheckOptions& options, std::size_t param_index) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (options.max_coords_per_param == 0 || options.max_coords_per_param >= n) return idx;
  std::mt19937_64 rng(options.sample_seed * 0x9E3779B97F4A7C15ULL + param_index);
  // Partial Fisher-Yates with raw engine draws (portable across standard libraries).
  for (std::size_t i = 0; i < options.max_coords_per_param; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(options.max_coords_per_param);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradcheckReport gradcheck(const std::function<Tensor()>& f, std::span<NamedTensor> params,
                          const GradcheckOptions& options) {
  if (options.step < 1e-6 || options.step > 1e-3) {
    throw std::invalid_argument(fmt::format("gradcheck: step {} outside [1e-6, 1e-3]", options.step));
  }
  for (auto& p : params) {
    if (!p.tensor.is_leaf() || !p.tensor.requires_grad()) {
      throw std::invalid_argument("gradcheck: parameter '" + p.name + "' is not a leaf requiring grad");
    }
    p.tensor.zero_grad();
  }

  Tensor out = f();
  const double f0 = out.item();
  if (!std::isfinite(f0)) throw NumericError(fmt::format("gradcheck: objective is {} at the base point", f0));
  out.backward();
  const double denom_floor = options.floor * std::max(1.0, std::abs(f0));

  GradcheckReport report;
  report.tol = options.tol;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    if (analytic.empty()) analytic.assign(p.tensor.numel(), 0.0);  // unreachable from f
    ParamGradcheck check;
    check.name = p.name;
    auto values = p.tensor.mutable_data();
    for (std::size_t i : pick_coords(values.size(), options, pi)) {
      const double original = values[i];
      values[i] = original + options.step;
      const double plus = evaluate(f, "+h");
      values[i] = original - options.step;
      const double minus = evaluate(f, "-h");
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), denom_floor});
      ++check.coords_checked;
      if (rel >= check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
        check.analytic_at_worst = a;
        check.numeric_at_worst = numeric;
      }
    }
    check.passed = check.max_rel_error <= options.tol;
    report.params.push_back(std::move(check));
  }
  for (auto& p : params) p.tensor.zero_grad();
  return report;
}

}  // namespace affect::num
