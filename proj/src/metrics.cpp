// SPDX-License-Identifier: Apache-2.0

#include "rtda/metrics.hpp"

#include <charconv>

namespace rtda {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes < 1 || num_classes > 255) throw ConfigError("confusion matrix needs 1..255 classes");
  counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

std::size_t ConfusionMatrix::index(int truth, int pred) const {
  if (truth < 0 || truth >= k_ || pred < 0 || pred >= k_) throw Error("confusion matrix index out of range");
  return static_cast<std::size_t>(truth) * k_ + pred;
}

void ConfusionMatrix::accumulate(const LabelMask& pred, const LabelMask& truth) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  }
  const std::size_t n = pred.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const int t = truth[i];
    if (t == kIgnoreLabel) continue;
    const int p = pred[i];
    if (p >= k_) throw Error("prediction " + std::to_string(p) + " out of range for " + std::to_string(k_) + " classes");
    if (t >= k_) throw Error("label " + std::to_string(t) + " out of range for " + std::to_string(k_) + " classes");
    ++counts_[static_cast<std::size_t>(t) * k_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

std::uint64_t ConfusionMatrix::diagonal() const {
  std::uint64_t s = 0;
  for (int c = 0; c < k_; ++c) s += counts_[static_cast<std::size_t>(c) * k_ + c];
  return s;
}

IouReport miou(const ConfusionMatrix& cm, std::optional<std::span<const int>> class_subset) {
  const int k = cm.num_classes();
  IouReport report;
  if (class_subset) {
    for (int c : *class_subset) {
      if (c < 0 || c >= k) throw ConfigError("class subset index " + std::to_string(c) + " out of range");
      report.classes.push_back(c);
    }
  } else {
    for (int c = 0; c < k; ++c) report.classes.push_back(c);
  }

  double sum = 0.0;
  int defined = 0;
  for (int c : report.classes) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t denom = row + col - tp;
    if (denom == 0) {
      report.iou.emplace_back(std::nullopt);
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(denom);
    report.iou.emplace_back(v);
    sum += v;
    ++defined;
  }
  if (defined == 0) throw Error("no evaluated class has a defined IoU");
  report.mean = sum / defined;
  return report;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string IouReport::to_csv() const {
  std::string out = "class,iou\n";
  for (std::size_t i = 0; i < classes.size(); ++i) {
    out += std::to_string(classes[i]) + ",";
    if (iou[i]) out += shortest(*iou[i]);
    out += "\n";
  }
  out += "mIoU," + shortest(mean) + "\n";
  return out;
}

LabelMask argmax_channels(const Tensor<float>& scores) {
  if (scores.rank() != 4) throw ShapeError("argmax_channels expects [N,C,H,W], got " + shape_str(scores.shape()));
  const int n = scores.dim(0), c = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  if (c > 255) throw ShapeError("argmax_channels supports at most 255 classes");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  LabelMask out({n, h, w});
  for (int b = 0; b < n; ++b) {
    const float* base = scores.data() + static_cast<std::size_t>(b) * c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      float best_v = base[p];
      for (int k = 1; k < c; ++k) {
        const float v = base[k * plane + p];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out[b * plane + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace rtda
