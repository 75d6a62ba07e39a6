// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cpfm/errors.hpp"

namespace cpfm {

/// Unweighted mean of per-class F1, scaled to [0, 100]. A class with
/// precision + recall = 0 (including one absent from both inputs) scores 0.
inline double macro_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                       std::size_t classes) {
  if (predictions.size() != labels.size()) {
    throw ContractError("macro_f1: " + std::to_string(predictions.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw ContractError("macro_f1: empty input");
  if (classes == 0) throw ContractError("macro_f1: no classes");
  std::vector<double> tp(classes, 0.0), fp(classes, 0.0), fn(classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] >= classes || labels[i] >= classes) throw ContractError("macro_f1: class index out of range");
    if (predictions[i] == labels[i]) {
      tp[labels[i]] += 1;
    } else {
      fp[predictions[i]] += 1;
      fn[labels[i]] += 1;
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    // F1 = 2TP / (2TP + FP + FN), which is 0 exactly when precision + recall = 0.
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    total += denom > 0 ? 2 * tp[c] / denom : 0.0;
  }
  return 100.0 * total / static_cast<double>(classes);
}

}  // namespace cpfm
