// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file layout (little-endian):
//   magic "CPFMCKPT" (8 bytes), version u16,
//   EncoderConfig as u32: series_len, channels, patch_len, model_dim, heads,
//     layers, prompt_len, classes, mask_ratio in parts per million,
//   then until end of file, each parameter as
//     name length u16, name bytes, rank u8, dims u32 x rank, values f64.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cpfm/binary_io.hpp"
#include "cpfm/encoder.hpp"
#include "cpfm/errors.hpp"

namespace cpfm {

inline constexpr char kCheckpointMagic[] = "CPFMCKPT";
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  EncoderConfig config;
  NamedTensors params;

  bool has(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return true;
    return false;
  }

  /// Copy of the named tensor (detached from anything the checkpoint was built from).
  Tensor get(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t.detach();
    throw ContractError("checkpoint has no parameter '" + name + "'");
  }

  void add(const std::string& name, const Tensor& t) { params.emplace_back(name, t.detach()); }

  void add_all(const NamedTensors& named) {
    for (const auto& [n, t] : named) add(n, t);
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 8));
  w.u16(kCheckpointVersion);
  const EncoderConfig& c = ckpt.config;
  for (std::uint32_t v : {c.series_len, c.channels, c.patch_len, c.model_dim, c.heads, c.layers,
                          c.prompt_len, c.classes}) {
    w.u32(v);
  }
  w.u32(static_cast<std::uint32_t>(std::lround(c.mask_ratio * 1e6)));
  for (const auto& [name, t] : ckpt.params) {
    if (name.size() > 0xFFFF) throw ContractError("checkpoint: parameter name too long");
    if (t.rank() > 0xFF) throw ContractError("checkpoint: rank too large");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f64s(t.vec());
  }
  return w.data();
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.remaining() < 8 || r.bytes(8) != std::string_view(kCheckpointMagic, 8)) {
    throw FormatError("checkpoint: bad magic", 0);
  }
  const std::size_t version_at = r.offset();
  if (const auto v = r.u16(); v != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(v), version_at);
  }
  Checkpoint ckpt;
  EncoderConfig& c = ckpt.config;
  for (std::uint32_t* f : {&c.series_len, &c.channels, &c.patch_len, &c.model_dim, &c.heads,
                           &c.layers, &c.prompt_len, &c.classes}) {
    *f = r.u32();
  }
  c.mask_ratio = static_cast<double>(r.u32()) / 1e6;
  while (!r.at_end()) {
    const std::size_t len = r.u16();
    std::string name = r.bytes(len);
    const std::size_t rank = r.u8();
    Shape shape(rank);
    for (std::size_t& d : shape) d = r.u32();
    ckpt.params.emplace_back(std::move(name), Tensor(shape, r.f64s(numel_of(shape))));
  }
  return ckpt;
}

inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

/// Rebuilds a backbone from checkpoint tensors written by Backbone::named().
inline Backbone backbone_from(const Checkpoint& ckpt, const std::string& prefix = "backbone.") {
  Backbone b;
  b.patch_proj = ckpt.get(prefix + "patch_proj");
  b.mask_embedding = ckpt.get(prefix + "mask_embedding");
  b.position = ckpt.get(prefix + "position");
  for (std::uint32_t l = 0; l < ckpt.config.layers; ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    EncoderLayer L;
    L.attn_gain = ckpt.get(p + "attn_gain");
    L.wq = ckpt.get(p + "wq");
    L.wk = ckpt.get(p + "wk");
    L.wv = ckpt.get(p + "wv");
    L.wo = ckpt.get(p + "wo");
    L.ffn_gain = ckpt.get(p + "ffn_gain");
    L.ffn_in = ckpt.get(p + "ffn_in");
    L.ffn_out = ckpt.get(p + "ffn_out");
    b.layers.push_back(std::move(L));
  }
  b.final_gain = ckpt.get(prefix + "final_gain");
  return b;
}

}  // namespace cpfm
