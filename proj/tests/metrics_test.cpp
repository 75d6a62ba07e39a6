// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "cpfm/metrics.hpp"
#include "cpfm/rng.hpp"

using namespace cpfm;
using Labels = std::vector<std::size_t>;

namespace {

// Per-class precision and recall straight from their definitions.
double reference_mf1(const Labels& preds, const Labels& labels, std::size_t k) {
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double tp = 0, predicted = 0, actual = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      tp += preds[i] == c && labels[i] == c;
      predicted += preds[i] == c;
      actual += labels[i] == c;
    }
    const double precision = predicted > 0 ? tp / predicted : 0.0;
    const double recall = actual > 0 ? tp / actual : 0.0;
    if (precision + recall > 0) total += 2 * precision * recall / (precision + recall);
  }
  return 100.0 * total / static_cast<double>(k);
}

}  // namespace

TEST(MacroF1, PerfectPredictions) {
  const Labels y{0, 1, 2, 2, 1};
  EXPECT_DOUBLE_EQ(macro_f1(y, y, 3), 100.0);
}

TEST(MacroF1, HandConfusionMatrix) {
  // class 0: P=1, R=1/2 -> 2/3; class 1: P=2/3, R=1 -> 4/5.
  EXPECT_NEAR(macro_f1(Labels{0, 1, 1, 1}, Labels{0, 0, 1, 1}, 2), 100.0 * (2.0 / 3 + 0.8) / 2, 1e-12);
  EXPECT_NEAR(macro_f1(Labels{0, 1, 1, 1}, Labels{0, 0, 1, 1}, 2), 73.33, 5e-3);
}

TEST(MacroF1, SingleClassPredictions) {
  // class 0: F1 = 2*0.5*1/1.5 = 2/3; class 1 never predicted -> 0.
  EXPECT_NEAR(macro_f1(Labels{0, 0, 0, 0}, Labels{0, 0, 1, 1}, 2), 100.0 / 3, 1e-12);
}

TEST(MacroF1, AbsentClassScoresZero) {
  EXPECT_DOUBLE_EQ(macro_f1(Labels{0, 1}, Labels{0, 1}, 3), 100.0 * 2 / 3);
}

TEST(MacroF1, MatchesReferenceOnRandomInputs) {
  CounterRng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 2 + rng.below(5);
    const std::size_t n = 1 + rng.below(40);
    Labels p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.below(k);
      y[i] = rng.below(k);
    }
    ASSERT_NEAR(macro_f1(p, y, k), reference_mf1(p, y, k), 1e-9) << "trial " << trial;
  }
}

TEST(MacroF1, InvariantUnderSampleOrderAndClassRenaming) {
  CounterRng rng(7);
  Labels p(30), y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    p[i] = rng.below(4);
    y[i] = rng.below(4);
  }
  const double base = macro_f1(p, y, 4);
  std::vector<std::size_t> order(30);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const Labels rename{2, 0, 3, 1};
  Labels p2, y2;
  for (std::size_t i : order) {
    p2.push_back(rename[p[i]]);
    y2.push_back(rename[y[i]]);
  }
  EXPECT_NEAR(macro_f1(p2, y2, 4), base, 1e-12);
}

TEST(MacroF1, RejectsBadInput) {
  EXPECT_THROW(macro_f1(Labels{}, Labels{}, 2), ContractError);
  EXPECT_THROW(macro_f1(Labels{0}, Labels{0, 1}, 2), ContractError);
  EXPECT_THROW(macro_f1(Labels{2}, Labels{0}, 2), ContractError);
  EXPECT_THROW(macro_f1(Labels{0}, Labels{0}, 0), ContractError);
}
