// SPDX-License-Identifier: Apache-2.0
#pragma once

// The only view the adaptation side has of a source model: the series shape
// it accepts and its predictions.

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "cpfm/dataset.hpp"
#include "cpfm/pseudo_labels.hpp"
#include "cpfm/source_model.hpp"

namespace cpfm {

enum class LabelMode { soft, hard };

struct TeacherInfo {
  std::uint32_t series_len = 0;
  std::uint32_t channels = 0;
  std::uint32_t classes = 0;
  friend bool operator==(const TeacherInfo&, const TeacherInfo&) = default;
};

class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual TeacherInfo info() = 0;
  /// One K-simplex per sample, in input order.
  virtual std::vector<Distribution> soft_labels(const Dataset& batch) = 0;
  virtual std::vector<std::size_t> hard_labels(const Dataset& batch) {
    std::vector<std::size_t> out;
    for (const Distribution& p : soft_labels(batch)) out.push_back(argmax(p));
    return out;
  }
};

/// Throws ContractError unless the batch has the teacher's series shape.
inline void check_batch_shape(const TeacherInfo& info, const Dataset& batch) {
  if (batch.series_len != info.series_len || batch.channels != info.channels) {
    throw ContractError("teacher expects series of shape " + std::to_string(info.series_len) + "x" +
                        std::to_string(info.channels) + ", got " + std::to_string(batch.series_len) + "x" +
                        std::to_string(batch.channels));
  }
}

class InProcessTeacher final : public Teacher {
 public:
  explicit InProcessTeacher(SourceModel model) : model_(std::move(model)) {}

  TeacherInfo info() override {
    return {model_.config.series_len, model_.config.channels, model_.config.classes};
  }

  std::vector<Distribution> soft_labels(const Dataset& batch) override {
    check_batch_shape(info(), batch);
    if (batch.size() == 0) return {};
    return model_.predict(batch);
  }

 private:
  SourceModel model_;
};

/// Soft labels for a whole dataset, requested in chunks of `chunk` samples.
inline std::vector<Distribution> query_teacher(Teacher& teacher, const Dataset& data, std::size_t chunk = 256) {
  std::vector<Distribution> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> ids(std::min(chunk, data.size() - start));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = start + i;
    auto part = teacher.soft_labels(data.subset(ids).unlabeled());
    if (part.size() != ids.size()) throw ContractError("teacher returned the wrong number of labels");
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

}  // namespace cpfm
