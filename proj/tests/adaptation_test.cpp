// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cpfm/adaptation.hpp"
#include "test_util.hpp"

namespace cpfm {
namespace {

using testing::random_simplex;
using testing::random_tensor;

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.series_len = 16;
  c.channels = 2;
  c.patch_len = 4;
  c.model_dim = 8;
  c.heads = 2;
  c.layers = 1;
  c.prompt_len = 2;
  c.classes = 3;
  c.mask_ratio = 0.5;
  return c;
}

CpfmModel tiny_model(std::size_t teachers = 1, std::uint64_t seed = 1) {
  EncoderConfig c = tiny_config();
  return CpfmModel::init(c, Backbone::init(c, 99), teachers, seed);
}

std::vector<std::vector<Distribution>> random_labels(std::size_t teachers, std::size_t n, std::size_t k,
                                                     std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<std::vector<Distribution>> out(teachers);
  for (auto& t : out)
    for (std::size_t i = 0; i < n; ++i) t.push_back(random_simplex(k, rng));
  return out;
}

Tensor scalar_param(double v) { return Tensor({1, 1}, {v}, true); }

// ---------------------------------------------------------------------------

TEST(PromptAutoencoder, ZeroWeightsGiveZero) {
  PromptAutoencoder ae = PromptAutoencoder::init(4, 2, 3, 7);
  for (Tensor* t : ae.params())
    for (double& v : t->mutable_values()) v = 0.0;
  Tensor out = prompt_autoencode(random_tensor({3, 4}, 1), ae);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(PromptAutoencoder, ScalarHandValue) {
  PromptAutoencoder ae{scalar_param(1), Tensor({1}, {0.0}), scalar_param(1), Tensor({1}, {0.0}),
                       scalar_param(1), Tensor({1}, {0.0})};
  // tanh(0.5) to 19 digits.
  EXPECT_NEAR(prompt_autoencode(Tensor({1, 1}, {0.5}), ae).item(), 0.4621171572600097585, 1e-15);
}

TEST(PromptAutoencoder, LinearRegimeMatchesTaylor) {
  const std::size_t d = 4, dh = 3;
  PromptAutoencoder ae = PromptAutoencoder::init(d, d, dh, 5);
  ae.w1 = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) ae.w1.mutable_values()[i * d + i] = 1.0;
  ae.w2 = random_tensor({d, dh}, 6, 0.01);
  ae.b3 = random_tensor({d}, 7);
  Tensor p = random_tensor({2, d}, 8, 3e-4);
  Tensor out = prompt_autoencode(p, ae);
  Tensor linear = add(matmul(matmul(p, ae.w2), ae.w3), ae.b3);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], linear[i], 1e-6);
}

TEST(LossPromptRecon, HandSum) {
  Tensor p = Tensor::zeros({2, 3});
  Tensor p_hat = Tensor::full({2, 3}, 1.0);
  // One teacher, two branches, each term 6.
  EXPECT_DOUBLE_EQ(loss_prompt_recon({{p, p_hat}, {p, p_hat}}).item(), 6.0);
  EXPECT_DOUBLE_EQ(loss_prompt_recon({{p, p_hat}, {p, p_hat}, {p, p_hat}, {p, p_hat}}).item(), 6.0);
  EXPECT_DOUBLE_EQ(loss_prompt_recon({{p_hat, p_hat}}).item(), 0.0);
  EXPECT_THROW(loss_prompt_recon(std::vector<std::pair<Tensor, Tensor>>{}), ContractError);
}

TEST(LossPromptRecon, DecreasesOverAdaptationSteps) {
  CpfmModel m = tiny_model(2);
  AdaptOptions opt;
  opt.lr = 1e-2;
  opt.weights.prompt_recon = 1.0;
  Adapter adapter(m, random_labels(2, 4, 3, 3), opt);
  Tensor x = random_tensor({4, 16, 2}, 4);
  std::vector<std::size_t> ids{0, 1, 2, 3};
  const double before = loss_prompt_recon(m.prompts(), m.autoencoder).item();
  for (int step = 0; step < 50; ++step) adapter.adapt_batch(x, ids, 11);
  EXPECT_LT(loss_prompt_recon(m.prompts(), m.autoencoder).item(), before);
}

TEST(GenMask, CountsAndDeterminism) {
  for (unsigned char v : gen_mask(10, 0.0, 1)) EXPECT_EQ(v, 0);
  Mask m = gen_mask(10, 0.3, 1);
  EXPECT_EQ(std::accumulate(m.begin(), m.end(), 0), 3);
  EXPECT_EQ(gen_mask(10, 0.3, 42), gen_mask(10, 0.3, 42));
  int differ = 0;
  for (std::uint64_t s = 0; s < 100; ++s) differ += gen_mask(10, 0.3, s) != gen_mask(10, 0.3, s + 1000) ? 1 : 0;
  EXPECT_GT(differ, 80);
  EXPECT_THROW(gen_mask(10, 1.0, 1), ContractError);
}

TEST(LossInputRecon, Examples) {
  Tensor x = random_tensor({1, 4, 2}, 1);
  Mask some{1, 1, 0, 0, 1, 1, 0, 0};
  EXPECT_EQ(loss_input_recon(x, x, some, 0.5).item(), 0.0);

  Mask all(8, 1);
  Tensor shifted = add(x, Tensor::full({1, 4, 2}, 2.0));
  EXPECT_NEAR(loss_input_recon(x, shifted, all, 1.0).item(), 4.0, 1e-12);

  // pi = 0 ignores errors at masked positions.
  std::vector<double> v = shifted.vec();
  v[0] += 5.0;
  v[4] -= 3.0;
  Tensor perturbed({1, 4, 2}, v);
  EXPECT_EQ(loss_input_recon(x, shifted, some, 0.0).item(), loss_input_recon(x, perturbed, some, 0.0).item());

  EXPECT_THROW(loss_input_recon(x, Tensor::zeros({1, 8, 1}), some, 0.5), ContractError);
}

TEST(LossInputRecon, HalfShareIsMeanOfTerms) {
  Tensor x = random_tensor({2, 4, 2}, 2);
  Tensor x_hat = random_tensor({2, 4, 2}, 3);
  Mask m = expand_patch_mask(Mask{1, 0, 0, 1}, 2, 2);
  const double lm = loss_input_recon(x, x_hat, m, 1.0).item();
  const double lum = loss_input_recon(x, x_hat, m, 0.0).item();
  EXPECT_EQ(loss_input_recon(x, x_hat, m, 0.5).item(), 0.5 * lm + 0.5 * lum);
  EXPECT_GT(lm, 0.0);
  EXPECT_GT(lum, 0.0);
}

TEST(LossInputRecon, EmptyTermsAreGuarded) {
  Tensor x = Tensor::zeros({1, 2, 1});
  Tensor x_hat = Tensor::full({1, 2, 1}, 1.0);
  EXPECT_DOUBLE_EQ(loss_input_recon(x, x_hat, Mask{0, 0}, 0.7).item(), 0.3);
  EXPECT_DOUBLE_EQ(loss_input_recon(x, x_hat, Mask{1, 1}, 0.7).item(), 0.7);
}

TEST(ExpandPatchMask, FollowsPatchLayout) {
  EXPECT_EQ(expand_patch_mask(Mask{1, 0}, 2, 2), (Mask{1, 1, 1, 1, 0, 0, 0, 0}));
}

TEST(LossCeSoft, Examples) {
  Tensor o({1, 3}, {0.2, 0.5, 0.3});
  EXPECT_NEAR(loss_ce_soft(o, Tensor({1, 3}, {0, 1, 0})).item(), -std::log(0.5), 1e-11);
  Tensor u = Tensor::full({2, 4}, 0.25);
  EXPECT_NEAR(loss_ce_soft(u, u).item(), std::log(4.0), 1e-11);
}

TEST(LossCeSoft, MinimizedAtTarget) {
  Tensor target({1, 3}, {0.6, 0.3, 0.1});
  Tensor logits({1, 3}, {0.0, 0.0, 0.0}, true);
  for (int step = 0; step < 3000; ++step) {
    Tensor loss = loss_ce_soft(softmax(logits), target);
    loss.backward();
    auto g = logits.grad();
    auto v = logits.mutable_values();
    for (std::size_t i = 0; i < 3; ++i) v[i] -= 0.5 * g[i];
    logits.zero_grad();
  }
  Tensor o = softmax(logits);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(o[i], target[i], 1e-6);
}

TEST(TotalLoss, Arithmetic) {
  LossWeights w{0.5, 0.1, 0.5};
  EXPECT_NEAR(total_loss(Tensor::scalar(1), Tensor::scalar(2), Tensor::scalar(3), w).item(), 2.3, 1e-15);
  LossWeights off{0.0, 0.0, 0.5};
  EXPECT_EQ(total_loss(Tensor::scalar(1.25), Tensor::scalar(2), Tensor::scalar(3), off).item(), 1.25);
}

// ---------------------------------------------------------------------------
// Composite gradients.

TEST(CompositeLoss, GradientIsWeightedSumOfParts) {
  CpfmModel m = tiny_model(1, 4);
  Tensor x = random_tensor({2, 16, 2}, 5);
  Tensor targets({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.3, 0.1});
  Mask mask{0, 1, 1, 0, 1, 0, 0, 1};
  LossWeights w{0.25, 0.5, 0.5};
  Branch& live = m.pairs[0][1];
  std::vector<Tensor> params{live.prompt, live.head.weight, m.recon.weight, m.autoencoder.w2};

  auto grads_of = [&](auto pick) {
    for (Tensor& p : params) p.zero_grad();
    BranchLosses l = branch_losses(m, x, targets, 0, 1, mask, w);
    pick(l).backward();
    std::vector<std::vector<double>> out;
    for (Tensor& p : params) {
      out.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                    : std::vector<double>(p.numel(), 0.0));
      p.zero_grad();
    }
    return out;
  };
  auto total = grads_of([](const BranchLosses& l) { return l.total; });
  auto ce = grads_of([](const BranchLosses& l) { return l.ce; });
  auto pr = grads_of([](const BranchLosses& l) { return l.prompt_recon; });
  auto ir = grads_of([](const BranchLosses& l) { return l.input_recon; });
  for (std::size_t t = 0; t < params.size(); ++t)
    for (std::size_t i = 0; i < total[t].size(); ++i) {
      const double combined = ce[t][i] + w.prompt_recon * pr[t][i] + w.input_recon * ir[t][i];
      EXPECT_NEAR(total[t][i], combined, 1e-12 * std::max(1.0, std::abs(combined)));
    }
}

// ---------------------------------------------------------------------------
// Training step.

TEST(AdaptBranch, ZeroLearningRateIsRepeatable) {
  CpfmModel m = tiny_model();
  AdaptOptions opt;
  opt.lr = 0.0;
  Adapter adapter(m, random_labels(1, 3, 3, 1), opt);
  Tensor x = random_tensor({3, 16, 2}, 2);
  std::vector<std::size_t> ids{2, 0, 1};
  Mask mask = gen_mask(12, 0.5, 3);
  LossStats a = adapter.adapt_branch(x, ids, 0, 0, mask);
  LossStats b = adapter.adapt_branch(x, ids, 0, 0, mask);
  EXPECT_EQ(a.ce, b.ce);
  EXPECT_EQ(a.prompt_recon, b.prompt_recon);
  EXPECT_EQ(a.input_recon, b.input_recon);
  EXPECT_GE(a.ce, 0.0);
  EXPECT_GE(a.prompt_recon, 0.0);
  EXPECT_GE(a.input_recon, 0.0);
}

TEST(AdaptBranch, UnknownSampleRejected) {
  CpfmModel m = tiny_model();
  Adapter adapter(m, random_labels(1, 3, 3, 1), AdaptOptions{});
  Tensor x = random_tensor({1, 16, 2}, 2);
  std::vector<std::size_t> ids{7};
  EXPECT_THROW(adapter.adapt_branch(x, ids, 0, 0, {}), ContractError);
}

TEST(Adapter, RejectsMismatchedTeachers) {
  CpfmModel m = tiny_model(2);
  EXPECT_THROW(Adapter(m, random_labels(1, 3, 3, 1), AdaptOptions{}), ContractError);
  EXPECT_THROW(Adapter(m, random_labels(2, 3, 4, 1), AdaptOptions{}), ContractError);
}

TEST(AdaptBatch, OnlyTrainableParametersMove) {
  CpfmModel m = tiny_model(2);
  const Checkpoint before = m.to_checkpoint();
  Adapter adapter(m, random_labels(2, 4, 3, 1), AdaptOptions{});
  std::vector<std::size_t> ids{0, 1, 2, 3};
  adapter.adapt_batch(random_tensor({4, 16, 2}, 9), ids, 5);

  for (const auto& [name, t] : m.backbone.named()) EXPECT_EQ(t.vec(), before.get(name).vec()) << name;
  for (const auto& [name, t] : m.trainable_named()) EXPECT_NE(t.vec(), before.get(name).vec()) << name;
  EXPECT_TRUE(std::all_of(adapter.buffers().begin(), adapter.buffers().end(),
                          [](const TeacherBuffer& b) { return b.audit(); }));
}

TEST(AdaptBatch, BufferTakesFusedPrediction) {
  CpfmModel m = tiny_model(1);
  auto labels = random_labels(1, 2, 3, 4);
  AdaptOptions opt;
  opt.lr = 0.0;
  Adapter adapter(m, labels, opt);
  Tensor x = random_tensor({2, 16, 2}, 6);
  Dataset ds{16, 2, 3, x.vec(), {}, false};
  const std::vector<double> lambda{1.0};
  const auto pred = predict(m, ds, lambda);
  std::vector<std::size_t> ids{0, 1};
  adapter.adapt_batch(x, ids, 1);
  for (std::size_t s = 0; s < 2; ++s) {
    const Distribution expected = ema_update(smooth_first_epoch(labels[0][s]), pred[s], 0.7);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(adapter.buffers()[0].entry(s)[c], expected[c], 1e-15);
  }
}

TEST(Adapter, EpochsAreDeterministic) {
  auto run = [] {
    CpfmModel m = tiny_model(2, 3);
    AdaptOptions opt;
    opt.epochs = 2;
    opt.batch_size = 3;
    opt.seed = 17;
    Dataset target{16, 2, 3, random_tensor({7, 16, 2}, 3).vec(), {}, false};
    Adapter adapter(m, random_labels(2, 7, 3, 8), opt);
    auto history = adapter.run(target);
    return std::make_pair(encode_checkpoint(m.to_checkpoint(adapter.lambda())), history.back().loss.total);
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Adapter, NaiveAveragingKeepsUniformWeights) {
  CpfmModel m = tiny_model(3);
  AdaptOptions opt;
  opt.naive_avg = true;
  opt.epochs = 2;
  Dataset target{16, 2, 3, random_tensor({4, 16, 2}, 3).vec(), {}, false};
  Adapter adapter(m, random_labels(3, 4, 3, 2), opt);
  for (const EpochStats& e : adapter.run(target)) {
    for (double l : e.weights.lambda) EXPECT_DOUBLE_EQ(l, 1.0 / 3.0);
  }
}

TEST(CpfmModel, CheckpointRoundTrip) {
  CpfmModel m = tiny_model(2, 6);
  std::vector<double> lambda{1.0, 0.4};
  auto bytes = encode_checkpoint(m.to_checkpoint(lambda));
  Checkpoint ck = decode_checkpoint(bytes);
  CpfmModel back = CpfmModel::from_checkpoint(ck);
  EXPECT_EQ(back.teachers(), 2u);
  EXPECT_EQ(checkpoint_lambda(ck, 2), lambda);
  EXPECT_EQ(encode_checkpoint(back.to_checkpoint(lambda)), bytes);
}

TEST(CpfmModel, NoPromptModelHasEmptyPrompts) {
  EncoderConfig c = tiny_config();
  c.prompt_len = 0;
  CpfmModel m = CpfmModel::init(c, Backbone::init(c, 1), 1, 2);
  EXPECT_EQ(m.pairs[0][0].prompt.numel(), 0u);
  Adapter adapter(m, random_labels(1, 2, 3, 1), AdaptOptions{});
  std::vector<std::size_t> ids{0, 1};
  LossStats st = adapter.adapt_batch(random_tensor({2, 16, 2}, 1), ids, 1);
  EXPECT_EQ(st.prompt_recon, 0.0);
  CpfmModel back = CpfmModel::from_checkpoint(decode_checkpoint(encode_checkpoint(m.to_checkpoint())));
  EXPECT_EQ(back.pairs[0][1].prompt.shape(), (Shape{0, 8}));
}

}  // namespace
}  // namespace cpfm
