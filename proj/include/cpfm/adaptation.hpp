// SPDX-License-Identifier: Apache-2.0
#pragma once

// Target-side model and the adaptation losses: soft-label cross entropy,
// prompt reconstruction through a shared autoencoder, masked input
// reconstruction, and the per-batch training step over every teacher's
// dual-branch pair.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cpfm/adam.hpp"
#include "cpfm/checkpoint.hpp"
#include "cpfm/dataset.hpp"
#include "cpfm/encoder.hpp"
#include "cpfm/multi_source.hpp"
#include "cpfm/pseudo_labels.hpp"

namespace cpfm {

inline constexpr double kCeLogEps = 1e-12;

struct LossWeights {
  double prompt_recon = 0.1;  // gamma1
  double input_recon = 1.0;   // gamma2
  double masked_share = 0.5;  // pi

  void validate() const {
    if (prompt_recon < 0.0 || input_recon < 0.0) throw ConfigError("loss weights must be non-negative");
    if (!(masked_share >= 0.0 && masked_share <= 1.0)) throw ConfigError("masked share must be in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Prompt autoencoder: linear down-projection, then a two-layer tanh perceptron
// back to d. Applied row-wise.

struct PromptAutoencoder {
  Tensor w1, b1;  // [d, d_b], [d_b]
  Tensor w2, b2;  // [d_b, d_h], [d_h]
  Tensor w3, b3;  // [d_h, d], [d]

  static PromptAutoencoder init(std::size_t d, std::size_t bottleneck, std::size_t hidden, std::uint64_t seed) {
    if (d == 0 || bottleneck == 0 || hidden == 0) throw ConfigError("prompt autoencoder: empty layer");
    auto sd = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    PromptAutoencoder ae{detail::init_normal({d, bottleneck}, derive_seed(seed, 1), sd(d)),
                         Tensor::zeros({bottleneck}),
                         detail::init_normal({bottleneck, hidden}, derive_seed(seed, 2), sd(bottleneck)),
                         Tensor::zeros({hidden}),
                         detail::init_normal({hidden, d}, derive_seed(seed, 3), sd(hidden)),
                         Tensor::zeros({d})};
    for (Tensor* t : ae.params()) t->set_requires_grad(true);
    return ae;
  }

  /// d_b = d/4, d_h = d/2.
  static PromptAutoencoder init(const EncoderConfig& cfg, std::uint64_t seed) {
    const std::size_t d = cfg.model_dim;
    return init(d, std::max<std::size_t>(1, d / 4), std::max<std::size_t>(1, d / 2), seed);
  }

  std::array<Tensor*, 6> params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

  NamedTensors named(const std::string& prefix) const {
    return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2},
            {prefix + "b2", b2}, {prefix + "w3", w3}, {prefix + "b3", b3}};
  }
};

/// p_hat = W3 tanh(W2 (W1 p + b1) + b2) + b3, row by row.
inline Tensor prompt_autoencode(const Tensor& prompt, const PromptAutoencoder& ae) {
  Tensor down = add(matmul(prompt, ae.w1), ae.b1);
  Tensor hidden = tanh(add(matmul(down, ae.w2), ae.b2));
  return add(matmul(hidden, ae.w3), ae.b3);
}

/// Mean over the list of squared Frobenius distances between each prompt and
/// its reconstruction.
inline Tensor loss_prompt_recon(const std::vector<std::pair<Tensor, Tensor>>& prompts_and_recons) {
  if (prompts_and_recons.empty()) throw ContractError("loss_prompt_recon: no prompts");
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [p, p_hat] : prompts_and_recons) {
    if (p.shape() != p_hat.shape()) throw ContractError("loss_prompt_recon: shape mismatch");
    if (p.numel() == 0) continue;
    total = add(total, sum(square(sub(p_hat, p))));
  }
  return scale(total, 1.0 / static_cast<double>(prompts_and_recons.size()));
}

inline Tensor loss_prompt_recon(const std::vector<Tensor>& prompts, const PromptAutoencoder& ae) {
  std::vector<std::pair<Tensor, Tensor>> pairs;
  pairs.reserve(prompts.size());
  for (const Tensor& p : prompts) pairs.emplace_back(p, p.numel() == 0 ? p : prompt_autoencode(p, ae));
  return loss_prompt_recon(pairs);
}

// ---------------------------------------------------------------------------
// Masking and input reconstruction.

using Mask = std::vector<unsigned char>;

/// Exactly round(ratio * n) ones at positions drawn without replacement.
inline Mask gen_mask(std::size_t n, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ContractError("gen_mask: ratio must be in [0, 1)");
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  CounterRng rng(seed);
  Mask mask(n, 0);
  // Partial Fisher-Yates: the first `count` slots are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
    mask[idx[i]] = 1;
  }
  return mask;
}

/// Per-patch mask (B*N entries) widened to one entry per series value
/// [B, N*P, D_in], matching the patchify layout.
inline Mask expand_patch_mask(std::span<const unsigned char> patch_mask, std::size_t patch_len,
                              std::size_t channels) {
  Mask out;
  out.reserve(patch_mask.size() * patch_len * channels);
  for (unsigned char m : patch_mask) out.insert(out.end(), patch_len * channels, m);
  return out;
}

/// pi * MSE(masked values) + (1 - pi) * MSE(unmasked values). `value_mask`
/// has one entry per element of x. A term with no positions contributes 0.
inline Tensor loss_input_recon(const Tensor& x, const Tensor& x_hat, std::span<const unsigned char> value_mask,
                               double masked_share) {
  if (x.shape() != x_hat.shape()) {
    throw ContractError("loss_input_recon: " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  }
  if (value_mask.size() != x.numel()) throw ContractError("loss_input_recon: mask size mismatch");
  std::vector<double> on(x.numel()), off(x.numel());
  std::size_t masked = 0;
  for (std::size_t i = 0; i < value_mask.size(); ++i) {
    on[i] = value_mask[i] ? 1.0 : 0.0;
    off[i] = 1.0 - on[i];
    masked += value_mask[i] ? 1 : 0;
  }
  const std::size_t unmasked = x.numel() - masked;
  Tensor sq = square(sub(x_hat, x));
  Tensor loss = Tensor::scalar(0.0);
  if (masked > 0 && masked_share > 0.0) {
    Tensor lm = scale(sum(mul(sq, Tensor(x.shape(), std::move(on)))), 1.0 / static_cast<double>(masked));
    loss = add(loss, scale(lm, masked_share));
  }
  if (unmasked > 0 && masked_share < 1.0) {
    Tensor lum = scale(sum(mul(sq, Tensor(x.shape(), std::move(off)))), 1.0 / static_cast<double>(unmasked));
    loss = add(loss, scale(lum, 1.0 - masked_share));
  }
  return loss;
}

/// Batch mean of -sum_c y_c log(o_c + 1e-12). `probs` and `targets` are [B, K].
inline Tensor loss_ce_soft(const Tensor& probs, const Tensor& targets) {
  if (probs.shape() != targets.shape() || probs.rank() != 2) {
    throw ContractError("loss_ce_soft: " + shape_str(probs.shape()) + " vs " + shape_str(targets.shape()));
  }
  const double batch = static_cast<double>(probs.dim(0));
  return scale(sum(mul(targets, log_eps(probs, kCeLogEps))), -1.0 / batch);
}

inline Tensor total_loss(const Tensor& ce, const Tensor& prompt_recon, const Tensor& input_recon,
                         const LossWeights& w) {
  return add(add(ce, scale(prompt_recon, w.prompt_recon)), scale(input_recon, w.input_recon));
}

// ---------------------------------------------------------------------------
// Target model: one dual-branch pair per teacher on a shared frozen backbone,
// plus the shared reconstruction head and prompt autoencoder.

struct Branch {
  Tensor prompt;  // [Lp, d]
  ClassifierHead head;
};

struct CpfmModel {
  EncoderConfig config;
  Backbone backbone;
  std::vector<std::array<Branch, 2>> pairs;
  ReconstructionHead recon;
  PromptAutoencoder autoencoder;

  /// `clone_prompts` starts both branches of a pair from the same prompt rows.
  static CpfmModel init(const EncoderConfig& cfg, Backbone backbone, std::size_t teachers, std::uint64_t seed,
                        bool clone_prompts = false) {
    cfg.validate();
    if (teachers == 0) throw ConfigError("target model needs at least one teacher");
    CpfmModel m{cfg, std::move(backbone), {}, {}, {}};
    m.backbone.set_trainable(false);
    for (std::size_t i = 0; i < teachers; ++i) {
      const std::uint64_t s = derive_seed(seed, 100 + i);
      PromptPair pp = PromptPair::init(cfg, derive_seed(s, 1), clone_prompts);
      std::array<Branch, 2> pair{Branch{pp.p1, ClassifierHead::init(cfg, derive_seed(s, 2))},
                                 Branch{pp.p2, ClassifierHead::init(cfg, derive_seed(s, 3))}};
      for (Branch& b : pair) {
        b.prompt.set_requires_grad(true);
        b.head.weight.set_requires_grad(true);
        b.head.bias.set_requires_grad(true);
      }
      m.pairs.push_back(std::move(pair));
    }
    m.recon = ReconstructionHead::init(cfg, derive_seed(seed, 1));
    m.recon.weight.set_requires_grad(true);
    m.recon.bias.set_requires_grad(true);
    m.autoencoder = PromptAutoencoder::init(cfg, derive_seed(seed, 2));
    return m;
  }

  std::size_t teachers() const { return pairs.size(); }

  /// Softmax output of one branch on a batch [B, T, D_in] -> [B, K].
  Tensor branch_probs(const Tensor& series, std::size_t teacher, std::size_t branch,
                      std::span<const unsigned char> mask = {}) const {
    const Branch& b = pairs.at(teacher).at(branch);
    return softmax(classify_head(encode(series, b.prompt, mask, backbone, config), b.head));
  }

  /// All 2M prompts in teacher-major, branch-minor order.
  std::vector<Tensor> prompts() const {
    std::vector<Tensor> out;
    for (const auto& pair : pairs)
      for (const Branch& b : pair) out.push_back(b.prompt);
    return out;
  }

  NamedTensors trainable_named() const {
    NamedTensors out;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      for (std::size_t f = 0; f < 2; ++f) {
        const std::string p = "target.t" + std::to_string(i) + ".b" + std::to_string(f + 1) + ".";
        out.emplace_back(p + "prompt", pairs[i][f].prompt);
        out.emplace_back(p + "head.weight", pairs[i][f].head.weight);
        out.emplace_back(p + "head.bias", pairs[i][f].head.bias);
      }
    out.emplace_back("target.recon.weight", recon.weight);
    out.emplace_back("target.recon.bias", recon.bias);
    for (auto& nt : autoencoder.named("target.ae.")) out.push_back(std::move(nt));
    return out;
  }

  Checkpoint to_checkpoint(std::span<const double> lambda = {}) const {
    Checkpoint ck{config, {}};
    ck.add_all(backbone.named());
    ck.add_all(trainable_named());
    if (!lambda.empty()) ck.add("target.lambda", Tensor({lambda.size()}, {lambda.begin(), lambda.end()}));
    return ck;
  }

  static CpfmModel from_checkpoint(const Checkpoint& ck) {
    CpfmModel m;
    m.config = ck.config;
    m.backbone = backbone_from(ck);
    m.backbone.set_trainable(false);
    auto trainable = [&](const std::string& name) {
      Tensor t = ck.get(name);
      t.set_requires_grad(true);
      return t;
    };
    for (std::size_t i = 0; ck.has("target.t" + std::to_string(i) + ".b1.prompt"); ++i) {
      std::array<Branch, 2> pair;
      for (std::size_t f = 0; f < 2; ++f) {
        const std::string p = "target.t" + std::to_string(i) + ".b" + std::to_string(f + 1) + ".";
        pair[f] = Branch{trainable(p + "prompt"), {trainable(p + "head.weight"), trainable(p + "head.bias")}};
      }
      m.pairs.push_back(std::move(pair));
    }
    if (m.pairs.empty()) throw ContractError("checkpoint holds no target model");
    m.recon = {trainable("target.recon.weight"), trainable("target.recon.bias")};
    m.autoencoder = {trainable("target.ae.w1"), trainable("target.ae.b1"), trainable("target.ae.w2"),
                     trainable("target.ae.b2"), trainable("target.ae.w3"), trainable("target.ae.b3")};
    return m;
  }
};

/// Stored fusion weights of an adapted checkpoint (uniform when absent).
inline std::vector<double> checkpoint_lambda(const Checkpoint& ck, std::size_t teachers) {
  if (!ck.has("target.lambda")) return std::vector<double>(teachers, 1.0);
  return ck.get("target.lambda").vec();
}

/// Branch-aggregated prediction of every teacher's pair, fused across
/// teachers with `lambda`. Evaluated without gradients, in batches.
inline std::vector<Distribution> predict(const CpfmModel& model, const Dataset& data, std::span<const double> lambda,
                                         std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  std::vector<Distribution> out;
  out.reserve(data.size());
  const std::size_t k = model.config.classes;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::span<const double>> rows;
    for (std::size_t s = start; s < end; ++s) rows.push_back(data.sample(s));
    Tensor x = make_batch(rows, data.series_len, data.channels);
    std::vector<Tensor> probs;
    for (std::size_t i = 0; i < model.teachers(); ++i) {
      probs.push_back(model.branch_probs(x, i, 0));
      probs.push_back(model.branch_probs(x, i, 1));
    }
    std::vector<Distribution> per_teacher(model.teachers());
    for (std::size_t s = 0; s < rows.size(); ++s) {
      for (std::size_t i = 0; i < model.teachers(); ++i) {
        auto o1 = probs[2 * i].values().subspan(s * k, k);
        auto o2 = probs[2 * i + 1].values().subspan(s * k, k);
        per_teacher[i] = aggregate_branches(o1, o2);
      }
      out.push_back(combine_teachers(per_teacher, lambda));
    }
  }
  return out;
}

inline std::vector<std::size_t> hard_labels(const std::vector<Distribution>& probs) {
  std::vector<std::size_t> out;
  out.reserve(probs.size());
  for (const Distribution& p : probs) out.push_back(argmax(p));
  return out;
}

struct BranchLosses {
  Tensor probs;  // [B, K] softmax output of the forward the losses were built on
  Tensor ce, prompt_recon, input_recon, total;
};

/// Loss graph for one branch on a batch: CE of the (masked) forward against
/// `targets` [B, K], input reconstruction from the same tokens, and prompt
/// reconstruction over all target prompts with only the live one attached.
inline BranchLosses branch_losses(const CpfmModel& model, const Tensor& series, const Tensor& targets,
                                  std::size_t teacher, std::size_t branch, std::span<const unsigned char> patch_mask,
                                  const LossWeights& weights) {
  const EncoderConfig& cfg = model.config;
  const Branch& live = model.pairs.at(teacher).at(branch);
  // Classification reads the clean series; the masked forward only feeds reconstruction.
  Tensor tokens = encode(series, live.prompt, {}, model.backbone, cfg);
  Tensor probs = softmax(classify_head(tokens, live.head));
  Tensor ce = loss_ce_soft(probs, targets);

  Tensor ir = Tensor::scalar(0.0);
  if (weights.input_recon > 0.0) {
    Tensor masked = patch_mask.empty() ? tokens : encode(series, live.prompt, patch_mask, model.backbone, cfg);
    Tensor recon = reconstruct_head(masked, model.recon, cfg.channels);
    const Mask value_mask =
        patch_mask.empty() ? Mask(series.numel(), 0) : expand_patch_mask(patch_mask, cfg.patch_len, cfg.channels);
    ir = loss_input_recon(series, recon, value_mask, weights.masked_share);
  }

  Tensor pr = Tensor::scalar(0.0);
  if (weights.prompt_recon > 0.0 && cfg.prompt_len > 0) {
    std::vector<Tensor> prompts;
    for (std::size_t i = 0; i < model.teachers(); ++i)
      for (std::size_t f = 0; f < 2; ++f) {
        const Tensor& p = model.pairs[i][f].prompt;
        prompts.push_back(i == teacher && f == branch ? p : p.detach());
      }
    pr = loss_prompt_recon(prompts, model.autoencoder);
  }
  return {probs, ce, pr, ir, total_loss(ce, pr, ir, weights)};
}

// ---------------------------------------------------------------------------
// Training loop.

struct AdaptOptions {
  LossWeights weights;
  double ema_gamma = 0.7;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double confident_threshold = 0.5;
  bool naive_avg = false;
  bool mask_inputs = true;  // false disables masking together with input reconstruction
  std::uint64_t seed = 0;

  void validate() const {
    weights.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(ema_gamma >= 0.0 && ema_gamma <= 1.0)) throw ConfigError("EMA gamma must be in [0, 1]");
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  }
};

struct LossStats {
  double ce = 0.0;
  double prompt_recon = 0.0;
  double input_recon = 0.0;
  double total = 0.0;
};

struct EpochStats {
  std::size_t epoch = 0;
  LossStats loss;  // mean over every branch step of the epoch
  TransferWeights weights;
  bool buffers_on_simplex = true;
  double seconds = 0.0;
};

class Adapter {
 public:
  /// `initial_labels[i][id]` is teacher i's soft label for target sample id.
  Adapter(CpfmModel& model, const std::vector<std::vector<Distribution>>& initial_labels, AdaptOptions opt)
      : model_(model), opt_(opt), adam_(AdamHyper{opt.lr, 0.9, 0.999, 1e-8}) {
    opt_.validate();
    if (initial_labels.size() != model.teachers()) {
      throw ContractError("adapter: " + std::to_string(initial_labels.size()) + " label sets for " +
                          std::to_string(model.teachers()) + " teachers");
    }
    for (const auto& labels : initial_labels) {
      for (const Distribution& y : labels)
        if (y.size() != model.config.classes) throw ContractError("adapter: teacher label has wrong class count");
      buffers_.push_back(TeacherBuffer::init(labels, opt_.ema_gamma));
    }
    for (const TeacherBuffer& b : buffers_)
      if (b.size() != buffers_.front().size()) throw ContractError("adapter: teachers disagree on target size");
  }

  const std::vector<TeacherBuffer>& buffers() const { return buffers_; }
  const TransferWeights& weights() const { return weights_; }
  const std::vector<double>& lambda() const { return weights_.lambda; }

  /// Per-epoch fusion weights from the current buffers.
  void refresh_weights() {
    const std::size_t m = buffers_.size();
    if (opt_.naive_avg) {
      weights_ = TransferWeights{std::vector<double>(m, 1.0), std::vector<double>(m, 1.0 / static_cast<double>(m)),
                                 weights_.epoch + 1};
      return;
    }
    std::vector<std::vector<Distribution>> labels;
    for (const TeacherBuffer& b : buffers_) labels.push_back(b.entries());
    weights_ = refresh_transfer_weights(weights_, labels, opt_.confident_threshold);
  }

  /// One Adam step for a single branch against its teacher's buffered labels.
  /// The branch's pre-step prediction is copied to `probs_out` when given.
  LossStats adapt_branch(const Tensor& series, std::span<const std::size_t> ids, std::size_t teacher,
                         std::size_t branch, std::span<const unsigned char> patch_mask,
                         std::vector<double>* probs_out = nullptr) {
    const std::size_t k = model_.config.classes;
    Branch& live = model_.pairs.at(teacher).at(branch);

    std::vector<double> target_values;
    target_values.reserve(ids.size() * k);
    for (std::size_t id : ids) {
      if (id >= buffers_[teacher].size()) {
        throw ContractError("adapt: no buffered label for sample " + std::to_string(id));
      }
      const Distribution& y = buffers_[teacher].entry(id);
      target_values.insert(target_values.end(), y.begin(), y.end());
    }
    Tensor targets({ids.size(), k}, std::move(target_values));

    BranchLosses losses = branch_losses(model_, series, targets, teacher, branch, patch_mask, opt_.weights);
    losses.total.backward();
    if (probs_out) probs_out->assign(losses.probs.values().begin(), losses.probs.values().end());
    std::vector<Tensor> params{live.prompt, live.head.weight, live.head.bias, model_.recon.weight,
                               model_.recon.bias};
    for (Tensor* t : model_.autoencoder.params()) params.push_back(*t);
    if (opt_.lr > 0.0) {
      adam_.step(params);
    } else {
      for (Tensor& p : params) p.zero_grad();
    }
    return {losses.ce.item(), losses.prompt_recon.item(), losses.input_recon.item(), losses.total.item()};
  }

  /// One batch: fused target prediction from the pre-update model, a step for
  /// every branch of every pair (teacher order, then branch 1 before 2), and
  /// the EMA refresh of every buffer with that prediction.
  LossStats adapt_batch(const Tensor& series, std::span<const std::size_t> ids, std::uint64_t batch_seed) {
    if (weights_.lambda.empty()) refresh_weights();
    const EncoderConfig& cfg = model_.config;
    const std::size_t k = cfg.classes;
    const std::size_t m = model_.teachers();
    const std::size_t n_patches = cfg.num_patches();

    std::vector<std::vector<double>> probs(2 * m);
    LossStats acc;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t f = 0; f < 2; ++f) {
        Mask mask;
        if (opt_.mask_inputs && cfg.mask_ratio > 0.0) {
          const std::uint64_t branch_seed = derive_seed(batch_seed, 2 * i + f);
          for (std::size_t s = 0; s < ids.size(); ++s) {
            Mask one = gen_mask(n_patches, cfg.mask_ratio, derive_seed(branch_seed, ids[s]));
            mask.insert(mask.end(), one.begin(), one.end());
          }
        }
        LossStats st = adapt_branch(series, ids, i, f, mask, &probs[2 * i + f]);
        acc.ce += st.ce;
        acc.prompt_recon += st.prompt_recon;
        acc.input_recon += st.input_recon;
        acc.total += st.total;
      }
    // A branch's prediction depends only on its own prompt and head, so each
    // forward above is that branch's prediction from before this batch.
    std::vector<Distribution> per_teacher(m);
    for (std::size_t s = 0; s < ids.size(); ++s) {
      for (std::size_t i = 0; i < m; ++i) {
        per_teacher[i] = aggregate_branches(std::span<const double>(probs[2 * i]).subspan(s * k, k),
                                            std::span<const double>(probs[2 * i + 1]).subspan(s * k, k));
      }
      const Distribution fused = combine_teachers(per_teacher, weights_.lambda);
      for (TeacherBuffer& b : buffers_) b.update(ids[s], fused);
    }

    const double steps = static_cast<double>(2 * m);
    return {acc.ce / steps, acc.prompt_recon / steps, acc.input_recon / steps, acc.total / steps};
  }

  /// Weight refresh, then a seeded shuffle of the target set into batches.
  EpochStats run_epoch(const Dataset& target) {
    if (target.size() != buffers_.front().size()) {
      throw ContractError("adapt: target has " + std::to_string(target.size()) + " samples, buffers hold " +
                          std::to_string(buffers_.front().size()));
    }
    const auto start = std::chrono::steady_clock::now();
    refresh_weights();
    const std::size_t epoch = weights_.epoch;
    std::vector<std::size_t> order(target.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng(derive_seed(opt_.seed, epoch)).shuffle(order);

    LossStats acc;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += opt_.batch_size) {
      const std::size_t end = std::min(order.size(), begin + opt_.batch_size);
      std::span<const std::size_t> ids(order.data() + begin, end - begin);
      std::vector<std::span<const double>> rows;
      for (std::size_t id : ids) rows.push_back(target.sample(id));
      Tensor x = make_batch(rows, target.series_len, target.channels);
      LossStats st = adapt_batch(x, ids, derive_seed(derive_seed(opt_.seed, 1000 + epoch), batches));
      acc.ce += st.ce;
      acc.prompt_recon += st.prompt_recon;
      acc.input_recon += st.input_recon;
      acc.total += st.total;
      ++batches;
    }
    EpochStats out;
    out.epoch = epoch;
    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    out.loss = {acc.ce / nb, acc.prompt_recon / nb, acc.input_recon / nb, acc.total / nb};
    out.weights = weights_;
    out.buffers_on_simplex = std::all_of(buffers_.begin(), buffers_.end(),
                                         [](const TeacherBuffer& b) { return b.audit(); });
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
  }

  std::vector<EpochStats> run(const Dataset& target) {
    std::vector<EpochStats> history;
    for (std::size_t e = 0; e < opt_.epochs; ++e) history.push_back(run_epoch(target));
    return history;
  }

 private:
  CpfmModel& model_;
  AdaptOptions opt_;
  Adam adam_;
  std::vector<TeacherBuffer> buffers_;
  TransferWeights weights_;
};

}  // namespace cpfm
