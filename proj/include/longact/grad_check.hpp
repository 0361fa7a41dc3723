#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "longact/autodiff.hpp"

namespace longact {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Coordinates sampled per tensor; tensors this small or smaller are checked
  // exhaustively.
  std::size_t coords_per_tensor = 200;
  std::uint64_t seed = 0;
};

// Builds a scalar loss on the tape from the bound parameters (one Var per
// entry of the parameter list, same order).
using LossBuilder =
    std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// Compares tape gradients of `loss` against central differences.
///
/// Returns the max over sampled coordinates of
/// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
/// Parameters are perturbed in place and restored before returning.
inline GradCheckResult finite_diff_check(const LossBuilder& loss,
                                         std::vector<Tensor<double>>& params,
                                         const GradCheckOptions& opts = {}) {
  std::vector<Tensor<double>> analytic;
  {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    auto out = loss(tape, vars);
    tape.backward(out);
    for (auto v : vars) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&]() {
    ad::Tape<double> tape(false);
    std::vector<ad::Var<double>> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    const double v = loss(tape, vars).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
    return v;
  };

  GradCheckResult result;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::size_t n = params[t].size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opts.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.coords_per_tensor);
    }
    for (std::size_t idx : coords) {
      double& x = params[t][idx];
      const double saved = x;
      x = saved + opts.step;
      const double up = evaluate();
      x = saved - opts.step;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[t][idx];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      ++result.coords_checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = t;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace longact
