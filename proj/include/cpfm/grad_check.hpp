// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cpfm/tensor.hpp"

namespace cpfm {

/// Compares reverse-mode gradients of the scalar `f()` with respect to every
/// entry of `params` against central differences. Parameters are perturbed in
/// place and restored. Returns max |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double step = 1e-5) {
  for (Tensor& p : params) p.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = f().item();
      values[i] = saved - step;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[t][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Single-input form: `f` maps x to a scalar.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double step = 1e-5) {
  x.set_requires_grad(true);
  return grad_check([&] { return f(x); }, std::vector<Tensor>{x}, step);
}

}  // namespace cpfm
