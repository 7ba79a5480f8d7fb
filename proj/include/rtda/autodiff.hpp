// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over an explicit tape.
//
// A Var is a shared handle to a value and its gradient buffer. Ops append one
// entry to the tape whenever any input requires a gradient; Tape::backward
// replays the entries in exact reverse insertion order. Leaves (parameters)
// accumulate gradients across backward calls until zero_grad(); gradients of
// intermediate values are scratch space reset at the start of every backward.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtda/tensor.hpp"

namespace rtda {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool leaf = true;

  Tensor<T>& grad_buffer() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct write access, reserved for optimizers and checkpoint loading.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool has_grad() const { return node_->grad.numel() == node_->value.numel() && node_->value.numel() > 0; }
  /// Gradient buffer; allocated as zeros on first access.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (has_grad()) node_->grad.fill(T{0});
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Var from_node(std::shared_ptr<Node<T>> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  /// Receives the gradient of the entry's output and adds into input grads.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out)>;

  struct Entry {
    std::string op;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::shared_ptr<Node<T>> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// Wraps `out` in a Var and, if any input requires grad, records it.
  Var<T> record(std::string_view op, std::span<const Var<T>> inputs, Tensor<T> out, BackwardFn backward);
  Var<T> record(std::string_view op, std::initializer_list<Var<T>> inputs, Tensor<T> out, BackwardFn backward) {
    return record(op, std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(out), std::move(backward));
  }

  void backward(const Var<T>& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  std::span<const Entry> entries() const noexcept { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Copy of `v` with no gradient history.
template <typename T>
Var<T> detach(const Var<T>& v) {
  return Var<T>(v.value(), false);
}

enum class Reduction { Mean, Sum };

// ---------------------------------------------------------------------------
// Primitives. All image tensors are NCHW. Each throws ShapeError on malformed
// arguments and NumericError if the forward result is not finite.

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride, int pad);

/// Per-channel convolution; weight is [C,1,k,k].
template <typename T>
Var<T> depthwise_conv2d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride,
                        int pad);

template <typename T>
Var<T> leaky_relu(Tape<T>& tape, const Var<T>& input, T slope);
template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& input);
template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& input);
template <typename T>
Var<T> log(Tape<T>& tape, const Var<T>& input);

/// Softmax over the channel axis of an NCHW tensor.
template <typename T>
Var<T> softmax_channels(Tape<T>& tape, const Var<T>& input);

/// Bilinear resize with half-pixel centers (align_corners = false).
template <typename T>
Var<T> bilinear_upsample(Tape<T>& tape, const Var<T>& input, int out_h, int out_w);

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor);
template <typename T>
Var<T> reduce_sum(Tape<T>& tape, const Var<T>& a);
template <typename T>
Var<T> reduce_mean(Tape<T>& tape, const Var<T>& a);

/// [N,C,H,W] -> [N,C,1,1] spatial mean.
template <typename T>
Var<T> global_average_pool(Tape<T>& tape, const Var<T>& input);
/// x[n,c,h,w] * gate[n,c,0,0]
template <typename T>
Var<T> channel_scale(Tape<T>& tape, const Var<T>& input, const Var<T>& gate);
/// x[n,c,h,w] + shift[n,c,0,0]
template <typename T>
Var<T> channel_add(Tape<T>& tape, const Var<T>& input, const Var<T>& shift);
template <typename T>
Var<T> concat_channels(Tape<T>& tape, std::span<const Var<T>> inputs);

/// Training-mode batch normalization; the biased batch statistics are
/// written to `batch_mean` / `batch_var` when non-null.
template <typename T>
Var<T> batch_norm_train(Tape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, T eps,
                        Tensor<T>* batch_mean = nullptr, Tensor<T>* batch_var = nullptr);
template <typename T>
Var<T> batch_norm_eval(Tape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps);

/// Binary cross-entropy against a constant target in {0,1}, evaluated from
/// logits as max(x,0) - x*t + log1p(exp(-|x|)).
template <typename T>
Var<T> bce_with_logits(Tape<T>& tape, const Var<T>& logits, T target, Reduction reduction);

/// -log probs[label] over non-ignored pixels. probs is [N,C,H,W].
template <typename T>
Var<T> nll_probs(Tape<T>& tape, const Var<T>& probs, const LabelMask& labels, Reduction reduction);

/// Fused log-softmax + negative log-likelihood over non-ignored pixels.
template <typename T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits, const LabelMask& labels, Reduction reduction);

/// Number of labels that are not kIgnoreLabel.
std::size_t count_scored(const LabelMask& labels);

// ---------------------------------------------------------------------------
// Multiply tally: every forward convolution adds the number of scalar
// multiplications its loops execute to a thread-local counter.

std::uint64_t mac_tally() noexcept;
void reset_mac_tally() noexcept;

}  // namespace rtda
