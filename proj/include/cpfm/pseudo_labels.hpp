// SPDX-License-Identifier: Apache-2.0
#pragma once

// Teacher-label lifecycle: first-epoch smoothing, EMA refinement, dual-branch
// aggregation, and the per-sample teacher buffer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cpfm/binary_io.hpp"
#include "cpfm/errors.hpp"

namespace cpfm {

using Distribution = std::vector<double>;

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline bool on_simplex(std::span<const double> v, double tol) {
  double s = 0.0;
  for (double x : v) {
    if (!(x >= -tol) || !std::isfinite(x)) return false;
    s += x;
  }
  return std::abs(s - 1.0) <= tol;
}

/// Keeps the top-1 probability and spreads the remaining mass evenly over the
/// other K-1 classes.
inline Distribution smooth_first_epoch(std::span<const double> y) {
  const std::size_t k = y.size();
  if (k < 2) throw ContractError("smooth_first_epoch needs at least 2 classes");
  const std::size_t top = argmax(y);
  const double rest = (1.0 - y[top]) / static_cast<double>(k - 1);
  Distribution out(k, rest);
  out[top] = y[top];
  return out;
}

struct BranchWeights {
  double alpha;
  double beta;
};

/// Confidence weights of two branch outputs: each branch's max probability over the sum of both.
inline BranchWeights branch_weights(std::span<const double> o1, std::span<const double> o2) {
  const double m1 = *std::max_element(o1.begin(), o1.end());
  const double m2 = *std::max_element(o2.begin(), o2.end());
  return {m1 / (m1 + m2), m2 / (m1 + m2)};
}

inline Distribution aggregate_branches(std::span<const double> o1, std::span<const double> o2) {
  if (o1.size() != o2.size() || o1.empty()) {
    throw DimensionError("aggregate_branches: outputs of size " + std::to_string(o1.size()) +
                         " and " + std::to_string(o2.size()));
  }
  const auto [alpha, beta] = branch_weights(o1, o2);
  Distribution out(o1.size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = alpha * o1[c] + beta * o2[c];
  return out;
}

/// gamma * entry + (1 - gamma) * prediction.
inline Distribution ema_update(std::span<const double> entry, std::span<const double> prediction,
                               double gamma) {
  if (entry.size() != prediction.size()) throw DimensionError("ema_update: size mismatch");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ContractError("ema_update: gamma outside [0, 1]");
  Distribution out(entry.size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = gamma * entry[c] + (1.0 - gamma) * prediction[c];
  return out;
}

/// Per-target-sample soft labels, indexed by sample id 0..n-1.
class TeacherBuffer {
 public:
  TeacherBuffer() = default;

  /// One soft label per sample id, each smoothed with the first-epoch rule.
  static TeacherBuffer init(const std::vector<Distribution>& labels_by_id, double gamma,
                            std::size_t expected_count) {
    if (labels_by_id.size() != expected_count) {
      throw ContractError("buffer_init: got " + std::to_string(labels_by_id.size()) +
                          " labels for " + std::to_string(expected_count) + " samples");
    }
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ContractError("buffer_init: gamma outside [0, 1]");
    TeacherBuffer b;
    b.gamma_ = gamma;
    b.classes_ = labels_by_id.empty() ? 0 : labels_by_id.front().size();
    b.entries_.reserve(labels_by_id.size());
    for (std::size_t id = 0; id < labels_by_id.size(); ++id) {
      const Distribution& y = labels_by_id[id];
      if (y.empty()) throw ContractError("buffer_init: missing label for sample " + std::to_string(id));
      if (y.size() != b.classes_) throw ContractError("buffer_init: inconsistent class count");
      b.entries_.push_back(smooth_first_epoch(y));
    }
    return b;
  }

  static TeacherBuffer init(const std::vector<Distribution>& labels_by_id, double gamma) {
    return init(labels_by_id, gamma, labels_by_id.size());
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t classes() const { return classes_; }
  double gamma() const { return gamma_; }

  const Distribution& entry(std::size_t id) const { return entries_.at(id); }
  const std::vector<Distribution>& entries() const { return entries_; }

  void update(std::size_t id, std::span<const double> prediction) {
    entries_.at(id) = ema_update(entries_.at(id), prediction, gamma_);
  }

  /// True when every entry lies on the simplex within `tol`.
  bool audit(double tol = 1e-9) const {
    return std::all_of(entries_.begin(), entries_.end(),
                       [tol](const Distribution& e) { return on_simplex(e, tol); });
  }

  // File layout: magic "CPFMBUFF", version u16, classes u32, gamma f64,
  // count u64, then per entry: sample id u64, classes x f64.
  std::vector<std::uint8_t> encode() const {
    io::ByteWriter w;
    w.bytes("CPFMBUFF");
    w.u16(1);
    w.u32(static_cast<std::uint32_t>(classes_));
    w.f64(gamma_);
    w.u64(entries_.size());
    for (std::size_t id = 0; id < entries_.size(); ++id) {
      w.u64(id);
      w.f64s(entries_[id]);
    }
    return w.data();
  }

  static TeacherBuffer decode(std::vector<std::uint8_t> bytes) {
    io::ByteReader r(std::move(bytes));
    if (r.remaining() < 8 || r.bytes(8) != "CPFMBUFF") throw FormatError("buffer: bad magic", 0);
    const std::size_t vat = r.offset();
    if (r.u16() != 1) throw FormatError("buffer: unsupported version", vat);
    TeacherBuffer b;
    b.classes_ = r.u32();
    b.gamma_ = r.f64();
    const std::uint64_t n = r.u64();
    if (n > r.remaining()) throw FormatError("buffer: entry count exceeds file size", r.offset());
    b.entries_.assign(static_cast<std::size_t>(n), {});
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::size_t at = r.offset();
      const std::uint64_t id = r.u64();
      if (id >= n || !b.entries_[id].empty()) throw FormatError("buffer: bad sample id", at);
      b.entries_[id] = r.f64s(b.classes_);
    }
    if (!r.at_end()) throw FormatError("buffer: trailing bytes", r.offset());
    return b;
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }
  static TeacherBuffer load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

 private:
  std::vector<Distribution> entries_;
  std::size_t classes_ = 0;
  double gamma_ = 0.7;
};

}  // namespace cpfm
