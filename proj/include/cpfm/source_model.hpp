// SPDX-License-Identifier: Apache-2.0
#pragma once

// Source models: the shared frozen backbone with a private prompt and a
// classification head, trained on labeled source data with hard-label CE.

#include <cstdint>
#include <numeric>
#include <vector>

#include "cpfm/adam.hpp"
#include "cpfm/checkpoint.hpp"
#include "cpfm/dataset.hpp"
#include "cpfm/encoder.hpp"
#include "cpfm/pseudo_labels.hpp"

namespace cpfm {

struct SourceModel {
  EncoderConfig config;
  Backbone backbone;
  Tensor prompt;
  ClassifierHead head;

  static SourceModel init(const EncoderConfig& cfg, Backbone backbone, std::uint64_t seed) {
    cfg.validate();
    SourceModel m{cfg, std::move(backbone), init_prompt(cfg, derive_seed(seed, 1)),
                  ClassifierHead::init(cfg, derive_seed(seed, 2))};
    m.backbone.set_trainable(false);
    m.prompt.set_requires_grad(true);
    m.head.weight.set_requires_grad(true);
    m.head.bias.set_requires_grad(true);
    return m;
  }

  Tensor probs(const Tensor& series) const {
    return softmax(classify_head(encode(series, prompt, {}, backbone, config), head));
  }

  /// Soft labels for every sample, without gradients.
  std::vector<Distribution> predict(const Dataset& data, std::size_t batch_size = 64) const {
    NoGradGuard no_grad;
    std::vector<Distribution> out;
    out.reserve(data.size());
    const std::size_t k = config.classes;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
      const std::size_t end = std::min(data.size(), start + batch_size);
      std::vector<std::span<const double>> rows;
      for (std::size_t s = start; s < end; ++s) rows.push_back(data.sample(s));
      Tensor p = probs(make_batch(rows, data.series_len, data.channels));
      for (std::size_t s = 0; s < rows.size(); ++s) {
        auto v = p.values().subspan(s * k, k);
        out.emplace_back(v.begin(), v.end());
      }
    }
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck{config, {}};
    ck.add_all(backbone.named());
    ck.add("source.prompt", prompt);
    ck.add("source.head.weight", head.weight);
    ck.add("source.head.bias", head.bias);
    return ck;
  }

  static SourceModel from_checkpoint(const Checkpoint& ck) {
    if (!ck.has("source.head.weight")) throw ContractError("checkpoint holds no source model");
    SourceModel m{ck.config, backbone_from(ck), ck.get("source.prompt"),
                  {ck.get("source.head.weight"), ck.get("source.head.bias")}};
    return m;
  }
};

struct SourceTrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Hard-label cross entropy on the prompt and head; the backbone stays frozen.
/// Returns the mean loss of each epoch.
inline std::vector<double> train_source(SourceModel& model, const Dataset& data, const SourceTrainOptions& opt) {
  data.check_labels();
  if (data.classes != model.config.classes || data.series_len != model.config.series_len ||
      data.channels != model.config.channels) {
    throw ConfigError("train_source: dataset shape (T=" + std::to_string(data.series_len) +
                      ", D_in=" + std::to_string(data.channels) + ", K=" + std::to_string(data.classes) +
                      ") does not match the encoder config");
  }
  if (opt.epochs < 1 || opt.batch_size < 1) throw ConfigError("train_source: epochs and batch size must be >= 1");
  Adam adam(AdamHyper{opt.lr, 0.9, 0.999, 1e-8});
  const std::size_t k = model.config.classes;
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng(derive_seed(opt.seed, epoch)).shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += opt.batch_size) {
      const std::size_t end = std::min(order.size(), begin + opt.batch_size);
      std::vector<std::span<const double>> rows;
      std::vector<double> onehot((end - begin) * k, 0.0);
      for (std::size_t s = begin; s < end; ++s) {
        rows.push_back(data.sample(order[s]));
        onehot[(s - begin) * k + data.labels[order[s]]] = 1.0;
      }
      Tensor x = make_batch(rows, data.series_len, data.channels);
      Tensor target({rows.size(), k}, std::move(onehot));
      Tensor loss = scale(sum(mul(target, log_eps(model.probs(x), 1e-12))), -1.0 / static_cast<double>(rows.size()));
      loss.backward();
      std::vector<Tensor> params{model.prompt, model.head.weight, model.head.bias};
      adam.step(params);
      total += loss.item();
      ++batches;
    }
    history.push_back(total / static_cast<double>(batches));
  }
  return history;
}

}  // namespace cpfm
