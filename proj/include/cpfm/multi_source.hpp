// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-teacher fusion: inverse-entropy transferability, max-normalization,
// epoch-wise momentum, and the weighted teacher combination.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cpfm/errors.hpp"
#include "cpfm/pseudo_labels.hpp"

namespace cpfm {

inline constexpr double kEntropyLogEps = 1e-12;
inline constexpr double kEntropyFloor = 1e-6;

/// Shannon entropy (nats) of one distribution, with log(p + 1e-12).
inline double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) h -= x * std::log(x + kEntropyLogEps);
  return h;
}

inline double mean_entropy(const std::vector<Distribution>& batch) {
  if (batch.empty()) throw ContractError("entropy_weight: empty batch");
  double h = 0.0;
  for (const Distribution& p : batch) h += shannon_entropy(p);
  return h / static_cast<double>(batch.size());
}

/// Inverse of the batch-mean entropy; the entropy is floored at 1e-6 so a
/// one-hot teacher gets a large but finite weight.
inline double entropy_weight(const std::vector<Distribution>& batch) {
  return 1.0 / std::max(mean_entropy(batch), kEntropyFloor);
}

/// eta_i / max_j eta_j.
inline std::vector<double> normalize_weights(std::span<const double> eta) {
  if (eta.empty()) throw ContractError("normalize_weights: no teachers");
  const double top = *std::max_element(eta.begin(), eta.end());
  if (!(top > 0.0)) throw ContractError("normalize_weights: weights must be positive");
  std::vector<double> lambda(eta.size());
  for (std::size_t i = 0; i < eta.size(); ++i) lambda[i] = eta[i] / top;
  return lambda;
}

/// alpha * previous + (1 - alpha) * fresh, with alpha = confident / total.
inline std::vector<double> momentum_update_weights(std::span<const double> previous,
                                                   std::span<const double> fresh,
                                                   std::size_t confident, std::size_t total) {
  if (total == 0) throw ContractError("momentum_update_weights: no target samples");
  if (confident > total) throw ContractError("momentum_update_weights: N_p > N_T");
  if (previous.size() != fresh.size()) throw DimensionError("momentum_update_weights: size mismatch");
  const double alpha = static_cast<double>(confident) / static_cast<double>(total);
  std::vector<double> out(previous.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * previous[i] + (1.0 - alpha) * fresh[i];
  return out;
}

/// sum_i lambda_i * preds_i, renormalized to sum to one.
inline Distribution combine_teachers(const std::vector<Distribution>& preds, std::span<const double> lambda) {
  if (preds.empty() || preds.size() != lambda.size()) {
    throw DimensionError("combine_teachers: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(lambda.size()) + " weights");
  }
  const std::size_t k = preds.front().size();
  Distribution out(k, 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != k) throw DimensionError("combine_teachers: class count differs");
    for (std::size_t c = 0; c < k; ++c) out[c] += lambda[i] * preds[i][c];
  }
  double z = 0.0;
  for (double v : out) z += v;
  if (!(z > 0.0)) throw ContractError("combine_teachers: all weights are zero");
  for (double& v : out) v /= z;
  return out;
}

/// Per-epoch transferability state.
struct TransferWeights {
  std::vector<double> eta;
  std::vector<double> lambda;
  std::size_t epoch = 0;
};

/// One epoch's refresh: eta from each teacher's current labels over the whole
/// target set, normalized; from the second epoch on, blended with the previous
/// weights using the share of confident fused labels as momentum.
inline TransferWeights refresh_transfer_weights(const TransferWeights& prev,
                                                const std::vector<std::vector<Distribution>>& labels,
                                                double confident_threshold) {
  TransferWeights next;
  next.epoch = prev.epoch + 1;
  for (const auto& teacher : labels) next.eta.push_back(entropy_weight(teacher));
  std::vector<double> fresh = normalize_weights(next.eta);
  if (prev.lambda.empty()) {
    next.lambda = std::move(fresh);
    return next;
  }
  const std::size_t n = labels.front().size();
  std::size_t confident = 0;
  std::vector<Distribution> per_sample(labels.size());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < labels.size(); ++i) per_sample[i] = labels[i][s];
    const Distribution fused = combine_teachers(per_sample, prev.lambda);
    if (*std::max_element(fused.begin(), fused.end()) > confident_threshold) ++confident;
  }
  next.lambda = momentum_update_weights(prev.lambda, fresh, confident, n);
  return next;
}

}  // namespace cpfm
