// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "cpfm/errors.hpp"
#include "cpfm/tensor.hpp"

namespace cpfm {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step_count = 0;
};

enum class AdamStatus { kApplied, kSkippedNonFinite };

/// One bias-corrected Adam update of `param` in place. A non-finite gradient
/// leaves both the parameter and the state untouched.
inline AdamStatus adam_step(std::span<double> param, std::span<const double> grad, AdamState& state,
                            const AdamHyper& hp) {
  if (param.size() != grad.size()) {
    throw DimensionError("adam_step: " + std::to_string(param.size()) + " params vs " +
                         std::to_string(grad.size()) + " grads");
  }
  for (double g : grad)
    if (!std::isfinite(g)) return AdamStatus::kSkippedNonFinite;
  if (state.first_moment.empty()) {
    state.first_moment.assign(param.size(), 0.0);
    state.second_moment.assign(param.size(), 0.0);
  } else if (state.first_moment.size() != param.size()) {
    throw DimensionError("adam_step: state does not match parameter size");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(hp.beta1, t);
  const double c2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = hp.beta1 * m + (1.0 - hp.beta1) * grad[i];
    v = hp.beta2 * v + (1.0 - hp.beta2) * grad[i] * grad[i];
    param[i] -= hp.lr * (m / c1) / (std::sqrt(v / c2) + hp.eps);
  }
  return AdamStatus::kApplied;
}

/// Adam over a fixed set of parameter tensors, one state per tensor.
class Adam {
 public:
  explicit Adam(AdamHyper hp = {}) : hp_(hp) {}

  const AdamHyper& hyper() const { return hp_; }

  /// Applies the accumulated gradients of `params` and clears them. Tensors
  /// without a gradient are left alone. Returns false if any tensor's update
  /// was skipped because its gradient was not finite.
  bool step(std::span<Tensor> params) {
    bool all_ok = true;
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      AdamState& st = states_[p.node().get()];
      if (adam_step(p.mutable_values(), p.grad(), st, hp_) != AdamStatus::kApplied) all_ok = false;
      p.zero_grad();
    }
    return all_ok;
  }

  const AdamState* state_for(const Tensor& p) const {
    auto it = states_.find(p.node().get());
    return it == states_.end() ? nullptr : &it->second;
  }

 private:
  AdamHyper hp_;
  std::unordered_map<const detail::Node*, AdamState> states_;
};

}  // namespace cpfm
