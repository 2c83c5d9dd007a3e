#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "vdt/tape.hpp"

namespace vdt {

// Builds a scalar loss from parameter variables bound on the given tape.
template <typename T>
using LossBuilder = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;  // index into the params list
  std::size_t worst_entry = 0;  // flat index inside that parameter
  double analytic = 0.0;        // gradients at the worst entry
  double numeric = 0.0;
  std::size_t entries_checked = 0;
  double loss = 0.0;  // at the unperturbed parameters
};

// Smallest gradient magnitude central differences resolve to relative
// tolerance `tol`: rounding in f(p +- h) alone leaves an absolute error of
// about eps * |f| / h in the numeric derivative.
template <typename T>
double fd_resolution_scale(double loss, T h, double tol) {
  return std::numeric_limits<T>::epsilon() * std::max(1.0, std::abs(loss)) / (static_cast<double>(h) * tol);
}

// Compares backward() against central differences (f(p+h) - f(p-h)) / 2h for
// every entry of every parameter, or `max_entries` evenly spaced entries per
// parameter when nonzero. Relative error per entry is
// |a - n| / max(|a|, |n|, min_scale).
template <typename T>
GradCheckResult grad_check_detailed(const LossBuilder<T>& f, const std::vector<DenseArray<T>*>& params, T h,
                                    std::size_t max_entries = 0, double min_scale = 1e-8) {
  if (!(h > T(0))) throw ContractError("numkernel", "grad_check step h must be positive");

  std::vector<DenseArray<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    for (auto* p : params) vars.push_back(tape.parameter(*p));
    Var<T> loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&]() -> double {
    Tape<T> tape(false);
    std::vector<Var<T>> vars;
    for (auto* p : params) vars.push_back(tape.parameter(*p));
    return static_cast<double>(f(tape, vars).value()[0]);
  };

  GradCheckResult result;
  result.loss = evaluate();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    DenseArray<T>& p = *params[pi];
    const std::size_t n = (max_entries == 0 || p.size() <= max_entries) ? p.size() : max_entries;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = n == p.size() ? k : k * p.size() / n;
      const T saved = p[i];
      p[i] = saved + h;
      const double plus = evaluate();
      p[i] = saved - h;
      const double minus = evaluate();
      p[i] = saved;
      const double numeric = (plus - minus) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), min_scale});
      const double rel = std::abs(a - numeric) / denom;
      ++result.entries_checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = pi;
        result.worst_entry = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

template <typename T>
double grad_check(const LossBuilder<T>& f, const std::vector<DenseArray<T>*>& params, T h) {
  return grad_check_detailed(f, params, h).max_rel_err;
}

}  // namespace vdt
