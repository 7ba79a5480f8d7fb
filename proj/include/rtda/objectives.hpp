// SPDX-License-Identifier: Apache-2.0
//
// Segmentation, discriminator and adversarial losses, the poly learning-rate
// schedule, and the two optimizers.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rtda/autodiff.hpp"
#include "rtda/nn.hpp"

namespace rtda {

template <typename T>
struct LossValue {
  Var<T> var;
  Reduction reduction = Reduction::Mean;
  std::size_t count = 0;  // contributing positions

  double value() const { return static_cast<double>(var.value()[0]); }
};

/// -mean log P[label] over non-ignored pixels; probs is [N,C,H,W].
template <typename T>
LossValue<T> seg_cross_entropy(Tape<T>& tape, const Var<T>& probs, const LabelMask& labels,
                               Reduction reduction = Reduction::Mean) {
  return {nll_probs(tape, probs, labels, reduction), reduction, count_scored(labels)};
}

/// Same quantity evaluated from logits with a fused log-softmax, so that
/// saturated probabilities cannot produce log(0).
template <typename T>
LossValue<T> seg_cross_entropy_logits(Tape<T>& tape, const Var<T>& logits, const LabelMask& labels,
                                      Reduction reduction = Reduction::Mean) {
  return {softmax_cross_entropy(tape, logits, labels, reduction), reduction, count_scored(labels)};
}

/// Discriminator loss: source cells are labeled 1, target cells 0.
/// -mean log sigmoid(d_src) - mean log(1 - sigmoid(d_tgt)).
template <typename T>
LossValue<T> disc_loss(Tape<T>& tape, const Var<T>& d_src_logits, const Var<T>& d_tgt_logits,
                       Reduction reduction = Reduction::Mean) {
  Var<T> src = bce_with_logits(tape, d_src_logits, T{1}, reduction);
  Var<T> tgt = bce_with_logits(tape, d_tgt_logits, T{0}, reduction);
  return {add(tape, src, tgt), reduction, d_src_logits.value().numel() + d_tgt_logits.value().numel()};
}

/// Adversarial loss pushing target cells toward the source label:
/// -mean log sigmoid(d_tgt).
template <typename T>
LossValue<T> adv_loss(Tape<T>& tape, const Var<T>& d_tgt_logits, Reduction reduction = Reduction::Mean) {
  return {bce_with_logits(tape, d_tgt_logits, T{1}, reduction), reduction, d_tgt_logits.value().numel()};
}

/// l_seg + lambda * l_adv.
template <typename T>
LossValue<T> total_seg_objective(Tape<T>& tape, const LossValue<T>& l_seg, const LossValue<T>& l_adv, T lambda) {
  if (!(lambda >= T{0})) throw ConfigError("lambda_adv must be non-negative");
  return {add(tape, l_seg.var, scale(tape, l_adv.var, lambda)), l_seg.reduction, l_seg.count};
}

/// base_lr * (1 - iter / max_iter)^power, for 0 <= iter <= max_iter.
double poly_lr(double base_lr, std::int64_t iter, std::int64_t max_iter, double power);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Momentum SGD with weight decay added to the gradient:
/// v = momentum * v + (g + wd * p);  p -= lr * v.
class Sgd {
 public:
  Sgd(std::span<const NamedVar> params, SgdConfig config = {});

  void step(double lr);

  const SgdConfig& config() const noexcept { return config_; }
  std::uint64_t steps() const noexcept { return steps_; }
  void set_steps(std::uint64_t steps) noexcept { steps_ = steps; }
  std::span<Tensor<float>> momentum_buffers() noexcept { return momentum_; }
  std::span<const Tensor<float>> momentum_buffers() const noexcept { return momentum_; }

 private:
  std::vector<NamedVar> params_;
  SgdConfig config_;
  std::vector<Tensor<float>> momentum_;
  std::uint64_t steps_ = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments and no weight decay.
class Adam {
 public:
  Adam(std::span<const NamedVar> params, AdamConfig config = {});

  void step(double lr);

  const AdamConfig& config() const noexcept { return config_; }
  std::uint64_t steps() const noexcept { return steps_; }
  void set_steps(std::uint64_t steps) noexcept { steps_ = steps; }
  std::span<Tensor<float>> first_moments() noexcept { return m_; }
  std::span<Tensor<float>> second_moments() noexcept { return v_; }
  std::span<const Tensor<float>> first_moments() const noexcept { return m_; }
  std::span<const Tensor<float>> second_moments() const noexcept { return v_; }

 private:
  std::vector<NamedVar> params_;
  AdamConfig config_;
  std::vector<Tensor<float>> m_, v_;
  std::uint64_t steps_ = 0;
};

}  // namespace rtda
