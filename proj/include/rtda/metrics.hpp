// SPDX-License-Identifier: Apache-2.0
//
// Confusion matrices and intersection-over-union.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtda/tensor.hpp"

namespace rtda {

/// K x K pixel counts; rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  /// Adds one count per pixel whose truth is not kIgnoreLabel. Throws
  /// ShapeError on differing shapes and Error on a prediction >= K or a
  /// truth label that is neither < K nor ignored.
  void accumulate(const LabelMask& pred, const LabelMask& truth);
  void merge(const ConfusionMatrix& other);

  int num_classes() const noexcept { return k_; }
  std::uint64_t at(int truth, int pred) const { return counts_.at(index(truth, pred)); }
  std::uint64_t& at(int truth, int pred) { return counts_.at(index(truth, pred)); }
  std::uint64_t total() const;
  std::uint64_t diagonal() const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t index(int truth, int pred) const;

  int k_;
  std::vector<std::uint64_t> counts_;
};

struct IouReport {
  std::vector<int> classes;                  // evaluated class indices
  std::vector<std::optional<double>> iou;    // nullopt: zero denominator
  double mean = 0.0;                         // over classes with a value

  /// "class,iou" rows (empty iou for undefined classes), then "mIoU,<mean>".
  std::string to_csv() const;
};

/// IoU_c = TP / (TP + FP + FN). Classes with a zero denominator are left
/// out of the mean. Throws ConfigError for a subset index >= K and Error
/// when no evaluated class has a defined IoU.
IouReport miou(const ConfusionMatrix& cm, std::optional<std::span<const int>> class_subset = std::nullopt);

/// Per-pixel argmax over the channel axis of an [N,C,H,W] map; ties go to
/// the lower class. Result is [N,H,W].
LabelMask argmax_channels(const Tensor<float>& scores);

}  // namespace rtda
