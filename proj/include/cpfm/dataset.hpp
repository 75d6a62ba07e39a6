// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic domain-shifted time series and the dataset file format.
//
// Dataset file (little-endian):
//   magic "TSDS", version u16, flags u16 (bit0 = has labels),
//   n_samples u32, T u32, D_in u32, K u32,
//   n*T*D_in f64 values (sample-major, then time, then channel),
//   n u16 labels if bit0 is set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cpfm/binary_io.hpp"
#include "cpfm/errors.hpp"
#include "cpfm/rng.hpp"

namespace cpfm {

inline constexpr std::uint16_t kDatasetVersion = 1;

struct Dataset {
  std::uint32_t series_len = 0;
  std::uint32_t channels = 0;
  std::uint32_t classes = 0;
  std::vector<double> values;
  std::vector<std::uint16_t> labels;  // empty when unlabeled
  bool has_labels = false;

  std::size_t sample_width() const { return std::size_t{series_len} * channels; }
  std::size_t size() const { return sample_width() == 0 ? 0 : values.size() / sample_width(); }

  std::span<const double> sample(std::size_t i) const {
    return std::span<const double>(values).subspan(i * sample_width(), sample_width());
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{series_len, channels, classes, {}, {}, has_labels};
    out.values.reserve(indices.size() * sample_width());
    for (std::size_t i : indices) {
      auto s = sample(i);
      out.values.insert(out.values.end(), s.begin(), s.end());
      if (has_labels) out.labels.push_back(labels[i]);
    }
    return out;
  }

  /// Same samples with the labels stripped.
  Dataset unlabeled() const { return Dataset{series_len, channels, classes, values, {}, false}; }

  /// Throws DataError when a label is outside [0, classes).
  void check_labels() const {
    if (!has_labels) throw DataError("dataset has no labels");
    if (labels.size() != size()) throw DataError("label count does not match sample count");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= classes) {
        throw DataError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                        " is outside [0, " + std::to_string(classes) + ")");
      }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct DomainSpec {
  std::string name;
  std::uint32_t classes = 5;
  std::uint32_t series_len = 128;
  std::uint32_t channels = 3;
  std::vector<double> base_freqs;  // cycles per window, one per class
  double freq_shift = 0.0;
  double amplitude = 1.0;
  double phase = 0.0;
  double noise_std = 0.0;
  std::uint32_t per_class = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("domain " + name + ": need at least 2 classes");
    if (per_class < 1) throw ConfigError("domain " + name + ": per_class must be >= 1");
    if (noise_std < 0.0) throw ConfigError("domain " + name + ": negative noise");
    if (base_freqs.size() != classes) throw ConfigError("domain " + name + ": one base frequency per class");
    std::vector<double> f = base_freqs;
    std::sort(f.begin(), f.end());
    if (std::adjacent_find(f.begin(), f.end()) != f.end()) {
      throw ConfigError("domain " + name + ": base frequencies must be distinct");
    }
    if (series_len == 0 || channels == 0) throw ConfigError("domain " + name + ": empty series shape");
  }
};

/// Class-balanced sinusoids: sample j of class c is stored at index c*per_class + j,
///   x[t][ch] = a * sin(2*pi*(f_c + df)*t/T + phi0 + ch*pi/4) + N(0, sigma^2).
/// The noise of each sample comes from its own stream derive_seed(seed, index),
/// so the result does not depend on generation order.
inline Dataset gen_domain(const DomainSpec& spec) {
  spec.validate();
  Dataset ds{spec.series_len, spec.channels, spec.classes, {}, {}, true};
  const std::size_t n = std::size_t{spec.classes} * spec.per_class;
  ds.values.resize(n * ds.sample_width());
  ds.labels.resize(n);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::uint32_t c = 0; c < spec.classes; ++c) {
    const double f = spec.base_freqs[c] + spec.freq_shift;
    for (std::uint32_t j = 0; j < spec.per_class; ++j) {
      const std::size_t idx = std::size_t{c} * spec.per_class + j;
      ds.labels[idx] = static_cast<std::uint16_t>(c);
      CounterRng noise(derive_seed(spec.seed, idx));
      double* out = ds.values.data() + idx * ds.sample_width();
      for (std::uint32_t t = 0; t < spec.series_len; ++t)
        for (std::uint32_t ch = 0; ch < spec.channels; ++ch) {
          const double arg = two_pi * f * t / spec.series_len + spec.phase + ch * std::numbers::pi / 4.0;
          double v = spec.amplitude * std::sin(arg);
          if (spec.noise_std > 0.0) v += spec.noise_std * noise.normal();
          out[std::size_t{t} * spec.channels + ch] = v;
        }
    }
  }
  return ds;
}

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  if (ds.values.size() != ds.size() * ds.sample_width()) throw ContractError("dataset: ragged values");
  if (ds.has_labels && ds.labels.size() != ds.size()) throw ContractError("dataset: label count mismatch");
  io::ByteWriter w;
  w.bytes("TSDS");
  w.u16(kDatasetVersion);
  w.u16(ds.has_labels ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(ds.series_len);
  w.u32(ds.channels);
  w.u32(ds.classes);
  w.f64s(ds.values);
  if (ds.has_labels)
    for (std::uint16_t l : ds.labels) w.u16(l);
  return w.data();
}

inline Dataset decode_dataset(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.bytes(4) != "TSDS") throw FormatError("dataset: bad magic", 0);
  const std::size_t vat = r.offset();
  if (const auto v = r.u16(); v != kDatasetVersion) {
    throw FormatError("dataset: unsupported version " + std::to_string(v), vat);
  }
  const std::size_t fat = r.offset();
  const std::uint16_t flags = r.u16();
  if (flags & ~1u) throw FormatError("dataset: unknown flags", fat);
  Dataset ds;
  const std::uint32_t n = r.u32();
  ds.series_len = r.u32();
  ds.channels = r.u32();
  ds.classes = r.u32();
  ds.has_labels = flags & 1u;
  ds.values = r.f64s(std::size_t{n} * ds.sample_width());
  if (ds.has_labels) {
    ds.labels.resize(n);
    for (auto& l : ds.labels) {
      const std::size_t at = r.offset();
      l = r.u16();
      if (l >= ds.classes) throw FormatError("dataset: label " + std::to_string(l) + " outside [0, K)", at);
    }
  }
  if (!r.at_end()) throw FormatError("dataset: trailing bytes", r.offset());
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

inline Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

/// Seeded stratified split. Each class contributes round(fraction * n_c)
/// samples to the first part. Unlabeled data is split as a single group.
/// Both parts keep the original sample order.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("split: train fraction must be in (0, 1)");
  }
  const std::size_t groups = ds.has_labels ? ds.classes : 1;
  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t i = 0; i < ds.size(); ++i) members[ds.has_labels ? ds.labels[i] : 0].push_back(i);
  std::vector<std::size_t> train, test;
  for (std::size_t g = 0; g < groups; ++g) {
    CounterRng rng(derive_seed(seed, g));
    rng.shuffle(members[g]);
    const auto take = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(members[g].size())));
    train.insert(train.end(), members[g].begin(), members[g].begin() + static_cast<std::ptrdiff_t>(take));
    test.insert(test.end(), members[g].begin() + static_cast<std::ptrdiff_t>(take), members[g].end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {ds.subset(train), ds.subset(test)};
}

// ---------------------------------------------------------------------------
// synth5: five paired (source, target) domains sharing one set of class
// frequencies. Row i of the table is scenario i. Sources sit near zero phase
// with noise 0.3; each target is phase-shifted by about 0.3 rad and rescaled.
// Table and rationale: docs/synth5.md.

struct DomainShift {
  double freq_shift;
  double amplitude;
  double phase;
  double noise_std;
};

struct Synth5Row {
  DomainShift source;
  DomainShift target;
};

inline const std::vector<double>& synth5_base_freqs() {
  static const std::vector<double> f{1.0, 1.75, 2.5, 3.25, 4.0};
  return f;
}

inline const std::vector<Synth5Row>& synth5_table() {
  static const std::vector<Synth5Row> t{
      {{0.0, 1.0, 0.0, 0.3}, {0.0, 1.0, 0.3, 0.3}},
      {{0.0, 0.9, 0.05, 0.3}, {0.0, 0.8, 0.35, 0.2}},
      {{0.0, 1.1, -0.05, 0.3}, {0.0, 1.0, 0.25, 0.2}},
      {{0.0, 1.0, 0.1, 0.3}, {0.0, 0.9, 0.4, 0.25}},
      {{0.0, 0.9, -0.1, 0.3}, {0.0, 0.9, 0.2, 0.25}},
  };
  return t;
}

struct Synth5Options {
  std::uint32_t series_len = 128;
  std::uint32_t channels = 3;
  std::uint32_t per_class = 40;
  std::uint64_t seed = 0;
};

inline DomainSpec synth5_domain(std::size_t scenario, bool target, const Synth5Options& opt) {
  const auto& table = synth5_table();
  if (scenario >= table.size()) throw ConfigError("synth5 has scenarios 0..4");
  const DomainShift& s = target ? table[scenario].target : table[scenario].source;
  DomainSpec spec;
  spec.name = (target ? "T" : "S") + std::to_string(scenario);
  spec.classes = static_cast<std::uint32_t>(synth5_base_freqs().size());
  spec.series_len = opt.series_len;
  spec.channels = opt.channels;
  spec.base_freqs = synth5_base_freqs();
  spec.freq_shift = s.freq_shift;
  spec.amplitude = s.amplitude;
  spec.phase = s.phase;
  spec.noise_std = s.noise_std;
  spec.per_class = opt.per_class;
  spec.seed = derive_seed(opt.seed, 2 * scenario + (target ? 1 : 0));
  return spec;
}

}  // namespace cpfm
