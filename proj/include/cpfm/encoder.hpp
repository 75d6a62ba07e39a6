// SPDX-License-Identifier: Apache-2.0
#pragma once

// Patch-based pre-norm transformer encoder with prompt injection into every
// self-attention layer, plus classification and reconstruction heads.
//
// Data layout: a batch of series is [B, T, D_in] row-major, so the values of
// one patch (P consecutive time steps, all channels, time-major) are contiguous
// and patchify is a pure reshape to [B, N, P*D_in].

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpfm/errors.hpp"
#include "cpfm/rng.hpp"
#include "cpfm/tensor.hpp"

namespace cpfm {

struct EncoderConfig {
  std::uint32_t series_len = 128;
  std::uint32_t channels = 3;
  std::uint32_t patch_len = 16;
  std::uint32_t model_dim = 64;
  std::uint32_t heads = 4;
  std::uint32_t layers = 2;
  std::uint32_t prompt_len = 4;
  std::uint32_t classes = 5;
  double mask_ratio = 0.3;

  std::size_t num_patches() const { return series_len / patch_len; }
  std::size_t patch_width() const { return std::size_t{patch_len} * channels; }
  std::size_t ffn_dim() const { return 2 * std::size_t{model_dim}; }

  void validate() const {
    if (series_len == 0 || channels == 0 || patch_len == 0 || model_dim == 0 || heads == 0 ||
        classes < 2) {
      throw ConfigError("encoder config: sizes must be positive and classes >= 2");
    }
    if (series_len % patch_len != 0) {
      throw ConfigError("encoder config: series_len " + std::to_string(series_len) +
                        " is not a multiple of patch_len " + std::to_string(patch_len));
    }
    if (model_dim % heads != 0) {
      throw ConfigError("encoder config: model_dim " + std::to_string(model_dim) +
                        " is not divisible by heads " + std::to_string(heads));
    }
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
      throw ConfigError("encoder config: mask_ratio must be in [0, 1)");
    }
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;

  /// UCIHAR-shaped preset (9 channels, 6 classes, length 128).
  static EncoderConfig ucihar_like() {
    EncoderConfig c;
    c.channels = 9;
    c.classes = 6;
    c.series_len = 128;
    return c;
  }
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline Tensor init_normal(Shape shape, std::uint64_t seed, double stddev) {
  CounterRng rng(seed);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace detail

struct EncoderLayer {
  Tensor attn_gain;  // [d]
  Tensor wq, wk, wv, wo;  // [d, d]
  Tensor ffn_gain;  // [d]
  Tensor ffn_in;  // [d, ffn]
  Tensor ffn_out;  // [ffn, d]
};

/// The frozen foundation stand-in. Bias-free throughout.
struct Backbone {
  Tensor patch_proj;  // [P*D_in, d]
  Tensor mask_embedding;  // [d]
  Tensor position;  // [N, d]
  std::vector<EncoderLayer> layers;
  Tensor final_gain;  // [d]

  static Backbone init(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t d = cfg.model_dim;
    const std::size_t pw = cfg.patch_width();
    const std::size_t ff = cfg.ffn_dim();
    std::uint64_t stream = 0;
    auto next = [&] { return derive_seed(seed, ++stream); };
    Backbone b;
    b.patch_proj = detail::init_normal({pw, d}, next(), 1.0 / std::sqrt(static_cast<double>(pw)));
    // Starts at zero so a masked patch first reads as "no signal" rather than noise.
    b.mask_embedding = Tensor::zeros({d});
    b.position = detail::init_normal({cfg.num_patches(), d}, next(), 0.1);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::uint32_t l = 0; l < cfg.layers; ++l) {
      EncoderLayer layer;
      layer.attn_gain = Tensor::full({d}, 1.0);
      layer.wq = detail::init_normal({d, d}, next(), sd);
      layer.wk = detail::init_normal({d, d}, next(), sd);
      layer.wv = detail::init_normal({d, d}, next(), sd);
      layer.wo = detail::init_normal({d, d}, next(), sd);
      layer.ffn_gain = Tensor::full({d}, 1.0);
      layer.ffn_in = detail::init_normal({d, ff}, next(), sd);
      layer.ffn_out = detail::init_normal({ff, d}, next(), 1.0 / std::sqrt(static_cast<double>(ff)));
      b.layers.push_back(std::move(layer));
    }
    b.final_gain = Tensor::full({d}, 1.0);
    return b;
  }

  NamedTensors named(const std::string& prefix = "backbone.") const {
    NamedTensors out{{prefix + "patch_proj", patch_proj},
                     {prefix + "mask_embedding", mask_embedding},
                     {prefix + "position", position}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = prefix + "layer" + std::to_string(l) + ".";
      const EncoderLayer& L = layers[l];
      out.emplace_back(p + "attn_gain", L.attn_gain);
      out.emplace_back(p + "wq", L.wq);
      out.emplace_back(p + "wk", L.wk);
      out.emplace_back(p + "wv", L.wv);
      out.emplace_back(p + "wo", L.wo);
      out.emplace_back(p + "ffn_gain", L.ffn_gain);
      out.emplace_back(p + "ffn_in", L.ffn_in);
      out.emplace_back(p + "ffn_out", L.ffn_out);
    }
    out.emplace_back(prefix + "final_gain", final_gain);
    return out;
  }

  /// Frozen parameters never receive gradients.
  void set_trainable(bool on) {
    for (auto& [name, t] : named()) t.set_requires_grad(on);
  }
};

struct ClassifierHead {
  Tensor weight;  // [d, K]
  Tensor bias;  // [K]

  static ClassifierHead init(const EncoderConfig& cfg, std::uint64_t seed) {
    const std::size_t d = cfg.model_dim;
    return {detail::init_normal({d, cfg.classes}, seed, 1.0 / std::sqrt(static_cast<double>(d))),
            Tensor::zeros({cfg.classes})};
  }
};

struct ReconstructionHead {
  Tensor weight;  // [d, P*D_in]
  Tensor bias;  // [P*D_in]

  static ReconstructionHead init(const EncoderConfig& cfg, std::uint64_t seed) {
    const std::size_t d = cfg.model_dim;
    return {detail::init_normal({d, cfg.patch_width()}, seed, 1.0 / std::sqrt(static_cast<double>(d))),
            Tensor::zeros({cfg.patch_width()})};
  }
};

/// i.i.d. normal(0, 0.02) prompt rows.
inline Tensor init_prompt(const EncoderConfig& cfg, std::uint64_t seed) {
  return detail::init_normal({cfg.prompt_len, cfg.model_dim}, seed, 0.02);
}

/// The two per-branch prompts of one teacher's dual-branch pair.
struct PromptPair {
  Tensor p1;
  Tensor p2;

  /// Independent streams per branch; `clone` gives both branches the same initial rows.
  static PromptPair init(const EncoderConfig& cfg, std::uint64_t seed, bool clone = false) {
    Tensor a = init_prompt(cfg, derive_seed(seed, 1));
    Tensor b = clone ? a.detach() : init_prompt(cfg, derive_seed(seed, 2));
    return {a, b};
  }
};

// ---------------------------------------------------------------------------

/// [B, T, D_in] -> [B, N, P*D_in].
inline Tensor patchify(const Tensor& series, std::size_t patch_len) {
  if (series.rank() != 3) throw DimensionError("patchify expects [B, T, D_in], got " + shape_str(series.shape()));
  const std::size_t t = series.dim(1);
  const std::size_t ch = series.dim(2);
  if (patch_len == 0 || t % patch_len != 0) {
    throw ConfigError("patchify: series length " + std::to_string(t) + " is not a multiple of " +
                      std::to_string(patch_len));
  }
  return reshape(series, {series.dim(0), t / patch_len, patch_len * ch});
}

/// [B, N, P*D_in] -> [B, N*P, D_in].
inline Tensor unpatchify(const Tensor& patches, std::size_t channels) {
  if (patches.rank() != 3 || channels == 0 || patches.dim(2) % channels != 0) {
    throw DimensionError("unpatchify: " + shape_str(patches.shape()) + " with " +
                         std::to_string(channels) + " channels");
  }
  const std::size_t p = patches.dim(2) / channels;
  return reshape(patches, {patches.dim(0), patches.dim(1) * p, channels});
}

/// Linear projection of each patch, with masked patches replaced by the mask embedding.
/// `mask` has B*N entries (1 = masked).
inline Tensor embed_patches(const Tensor& patches, std::span<const unsigned char> mask,
                            const Backbone& bb) {
  Tensor tokens = matmul(patches, bb.patch_proj);
  if (mask.empty()) return tokens;
  return mask_rows(tokens, bb.mask_embedding, mask);
}

/// Self-attention over [prompt; tokens]. The caller passes the normalized
/// tokens [B, L, d] and a prompt [Lp, d] (Lp may be 0 or the tensor undefined).
/// Keys and values see Lp + L rows; the Lp prompt output rows are dropped, so
/// only the L token queries are evaluated. Returns [B, L, d].
inline Tensor prompted_msa(const Tensor& tokens, const Tensor& prompt, const EncoderLayer& layer,
                           std::size_t heads, std::vector<double>* weights_out = nullptr) {
  Tensor q = matmul(tokens, layer.wq);
  Tensor k = matmul(tokens, layer.wk);
  Tensor v = matmul(tokens, layer.wv);
  if (prompt.defined() && prompt.numel() > 0) {
    if (prompt.rank() != 2 || prompt.dim(1) != tokens.dim(-1)) {
      throw DimensionError("prompted_msa: prompt " + shape_str(prompt.shape()) + " for tokens " +
                           shape_str(tokens.shape()));
    }
    k = concat_seq(matmul(prompt, layer.wk), k);
    v = concat_seq(matmul(prompt, layer.wv), v);
  }
  return matmul(multihead_attention(q, k, v, heads, weights_out), layer.wo);
}

/// Full encoder stack on a batch of series [B, T, D_in] -> tokens [B, N, d].
/// With zero layers the stack is empty and the result is embed_patches.
inline Tensor encode(const Tensor& series, const Tensor& prompt, std::span<const unsigned char> mask,
                     const Backbone& bb, const EncoderConfig& cfg) {
  Tensor h = embed_patches(patchify(series, cfg.patch_len), mask, bb);
  if (bb.layers.empty()) return h;
  h = add(h, bb.position);
  for (const EncoderLayer& layer : bb.layers) {
    h = add(h, prompted_msa(layernorm_nobias(h, layer.attn_gain), prompt, layer, cfg.heads));
    Tensor f = matmul(gelu(matmul(layernorm_nobias(h, layer.ffn_gain), layer.ffn_in)), layer.ffn_out);
    h = add(h, f);
  }
  return layernorm_nobias(h, bb.final_gain);
}

/// Mean-pool over tokens, then affine map to K logits. [B, N, d] -> [B, K].
inline Tensor classify_head(const Tensor& tokens, const ClassifierHead& head) {
  return add(matmul(mean_axis(tokens, -2), head.weight), head.bias);
}

/// Per-token affine map back to patch values, un-patchified. [B, N, d] -> [B, T, D_in].
inline Tensor reconstruct_head(const Tensor& tokens, const ReconstructionHead& head,
                               std::size_t channels) {
  return unpatchify(add(matmul(tokens, head.weight), head.bias), channels);
}

/// Stacks samples (each T*D_in values) into a [B, T, D_in] tensor.
inline Tensor make_batch(const std::vector<std::span<const double>>& samples, std::size_t series_len,
                         std::size_t channels) {
  const std::size_t width = series_len * channels;
  std::vector<double> v;
  v.reserve(samples.size() * width);
  for (auto s : samples) {
    if (s.size() != width) {
      throw DimensionError("make_batch: sample has " + std::to_string(s.size()) + " values, expected " +
                           std::to_string(width));
    }
    v.insert(v.end(), s.begin(), s.end());
  }
  return Tensor({samples.size(), series_len, channels}, std::move(v));
}

}  // namespace cpfm
