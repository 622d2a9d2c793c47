// Copyright 2026 The cpcseg Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "cpcseg/errors.hpp"
#include "cpcseg/random.hpp"
#include "cpcseg/tensor.hpp"

namespace cpcseg {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
  // Five-point central stencil (O(h^4) truncation). Deep compositions have
  // coordinates with gradients near 1e-8 that the two-point rule cannot
  // resolve: its step must stay small for truncation, which amplifies the
  // rounding noise of the loss.
  bool five_point = false;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of the scalar produced by `f` against
/// central differences, coordinate by coordinate:
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// `f` must rebuild its graph from `params` on every call and be
/// deterministic; two differing evaluations raise an error.
inline GradCheckResult finite_difference_check(
    const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
    const GradCheckOptions& options = {}) {
  if (!(options.epsilon > 0.0)) throw Error("finite_difference_check: epsilon must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  const Tensor<double> loss = f();
  const double base = loss.item();
  backward(loss);
  {
    NoGradGuard guard;
    if (f().item() != base)
      throw Error("finite_difference_check: function is not deterministic");
  }

  GradCheckResult result;
  NoGradGuard guard;
  Rng rng = make_rng(options.seed, {0x6772});
  for (std::size_t ti = 0; ti < params.size(); ++ti) {
    Tensor<double>& p = params[ti];
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coordinates > 0 && coords.size() > options.max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coordinates);
    }
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i : coords) {
      const double saved = p[i];
      const double h = options.epsilon;
      auto at = [&](double x) {
        p[i] = x;
        return f().item();
      };
      double numeric = (at(saved + h) - at(saved - h)) / (2.0 * h);
      if (options.five_point)
        numeric = (4.0 * numeric - (at(saved + 2 * h) - at(saved - 2 * h)) / (4.0 * h)) / 3.0;
      p[i] = saved;
      const double a = analytic[i];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.checked;
      if (err > result.max_relative_error || result.checked == 1) {
        result.max_relative_error = err;
        result.worst_tensor = ti;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace cpcseg
