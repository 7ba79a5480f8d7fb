// SPDX-License-Identifier: Apache-2.0
//
// Parameterized layers and their composition into a ModelGraph.

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rtda/autodiff.hpp"
#include "rtda/rng.hpp"

namespace rtda {

/// Selects batch statistics (Train) or running statistics (Eval) in
/// normalization layers. Passed explicitly on every forward.
enum class Mode { Train, Eval };

struct NamedVar {
  std::string name;
  Var<float> var;
};

/// Named trainable parameters plus non-trainable buffers (running stats),
/// both in registration order.
class ParamRegistry {
 public:
  void add_param(std::string name, Var<float> var);
  void add_buffer(std::string name, Var<float> var);

  std::span<const NamedVar> params() const noexcept { return params_; }
  std::span<const NamedVar> buffers() const noexcept { return buffers_; }
  std::uint64_t num_params() const;
  const Var<float>* find(std::string_view name) const;

 private:
  void check_unique(const std::string& name) const;

  std::vector<NamedVar> params_;
  std::vector<NamedVar> buffers_;
};

/// One row of an analytical cost breakdown.
struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

std::string join_name(const std::string& prefix, std::string_view leaf);

class Module {
 public:
  virtual ~Module() = default;

  virtual std::string_view kind() const = 0;
  virtual Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) = 0;
  /// Shape propagation for an NCHW input; throws ShapeError if it does not fit.
  virtual Shape output_shape(const Shape& in) const = 0;

  virtual void collect(const std::string& /*prefix*/, ParamRegistry& /*registry*/) {}
  virtual void init(Rng& /*rng*/) {}
  /// Appends cost rows for this module and returns its output shape.
  virtual Shape account(const std::string& /*prefix*/, const Shape& in, std::vector<LayerCost>& /*rows*/) const {
    return output_shape(in);
  }
  virtual int total_stride() const { return 1; }
};

class Conv2d final : public Module {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int pad = 0);

  std::string_view kind() const override { return "conv"; }
  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  void collect(const std::string& prefix, ParamRegistry& registry) override;
  void init(Rng& rng) override;
  Shape account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const override;
  int total_stride() const override { return stride_; }

  std::uint64_t num_params() const;
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  Var<float>& weight() { return weight_; }
  Var<float>& bias() { return bias_; }

 private:
  int in_, out_, k_, stride_, pad_;
  Var<float> weight_, bias_;
};

/// Depthwise k x k convolution (carrying stride and padding) followed by a
/// 1x1 pointwise convolution; both stages have biases.
class DSConv2d final : public Module {
 public:
  DSConv2d(int in_channels, int out_channels, int kernel, int stride = 1, int pad = 0);

  std::string_view kind() const override { return "dsconv"; }
  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  void collect(const std::string& prefix, ParamRegistry& registry) override;
  void init(Rng& rng) override;
  Shape account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const override;
  int total_stride() const override { return stride_; }

  std::uint64_t num_params() const;
  Var<float>& depthwise_weight() { return dw_weight_; }
  Var<float>& depthwise_bias() { return dw_bias_; }
  Var<float>& pointwise_weight() { return pw_weight_; }
  Var<float>& pointwise_bias() { return pw_bias_; }

 private:
  int in_, out_, k_, stride_, pad_;
  Var<float> dw_weight_, dw_bias_, pw_weight_, pw_bias_;
};

class BatchNorm2d final : public Module {
 public:
  static constexpr float kEps = 1e-5f;
  static constexpr float kMomentum = 0.1f;

  explicit BatchNorm2d(int channels);

  std::string_view kind() const override { return "batchnorm"; }
  /// Train mode normalizes with batch statistics and folds them into the
  /// running estimates (unbiased variance); Eval uses the running estimates.
  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  void collect(const std::string& prefix, ParamRegistry& registry) override;
  void init(Rng& rng) override;
  Shape account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const override;

  Var<float>& gamma() { return gamma_; }
  Var<float>& beta() { return beta_; }
  Var<float>& running_mean() { return running_mean_; }
  Var<float>& running_var() { return running_var_; }

 private:
  int channels_;
  Var<float> gamma_, beta_, running_mean_, running_var_;
};

class LeakyReLU final : public Module {
 public:
  explicit LeakyReLU(float slope) : slope_(slope) {}
  std::string_view kind() const override { return "leaky_relu"; }
  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode) override { return leaky_relu(tape, x, slope_); }
  Shape output_shape(const Shape& in) const override { return in; }

 private:
  float slope_;
};

class ReLU final : public Module {
 public:
  std::string_view kind() const override { return "relu"; }
  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode) override { return relu(tape, x); }
  Shape output_shape(const Shape& in) const override { return in; }
};

class Sigmoid final : public Module {
 public:
  std::string_view kind() const override { return "sigmoid"; }
  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode) override { return sigmoid(tape, x); }
  Shape output_shape(const Shape& in) const override { return in; }
};

/// Ordered chain of named modules.
class Sequential : public Module {
 public:
  Sequential() = default;

  Sequential& add(std::string name, std::unique_ptr<Module> module);
  template <typename M, typename... Args>
  M& emplace(std::string name, Args&&... args) {
    auto ptr = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *ptr;
    add(std::move(name), std::move(ptr));
    return ref;
  }

  std::string_view kind() const override { return "sequential"; }
  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) override;
  Shape output_shape(const Shape& in) const override;
  void collect(const std::string& prefix, ParamRegistry& registry) override;
  void init(Rng& rng) override;
  Shape account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const override;
  int total_stride() const override;

  std::size_t size() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  const std::string& name_at(std::size_t i) const { return layers_.at(i).first; }
  Module& at(std::size_t i) { return *layers_.at(i).second; }
  const Module& at(std::size_t i) const { return *layers_.at(i).second; }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> layers_;
};

/// A network: a named chain of modules (composite modules provide branches
/// and merges) with a registry of every parameter and buffer.
class ModelGraph {
 public:
  explicit ModelGraph(int in_channels);

  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;
  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;

  ModelGraph& add(std::string name, std::unique_ptr<Module> module);
  template <typename M, typename... Args>
  M& emplace(std::string name, Args&&... args) {
    auto ptr = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *ptr;
    add(std::move(name), std::move(ptr));
    return ref;
  }

  /// Layer-by-layer composition. Shape errors name the failing layer.
  Var<float> forward(Tape<float>& tape, const Var<float>& input, Mode mode);

  int in_channels() const noexcept { return in_channels_; }
  int total_stride() const { return layers_.total_stride(); }
  Shape output_shape(const Shape& in) const;
  std::vector<LayerCost> account(const Shape& in) const;

  const ParamRegistry& registry() const noexcept { return registry_; }
  std::uint64_t num_params() const { return registry_.num_params(); }

  void init_kaiming(Rng& rng) { layers_.init(rng); }
  void zero_grad();
  void set_requires_grad(bool on);

  Sequential& layers() noexcept { return layers_; }
  const Sequential& layers() const noexcept { return layers_; }

 private:
  int in_channels_;
  Sequential layers_;
  ParamRegistry registry_;
};

/// Kaiming-normal weights with std sqrt(2 / fan_in), zero biases, unit
/// BatchNorm scale and zero shift.
void init_kaiming(Module& module, Rng& rng);
void init_kaiming(ModelGraph& graph, Rng& rng);

std::uint64_t num_params(const ModelGraph& graph);

/// Fills `weight` with N(0, 2 / fan_in) samples.
void kaiming_normal(Tensor<float>& weight, int fan_in, Rng& rng);

}  // namespace rtda
