// SPDX-License-Identifier: Apache-2.0

#include "rtda/nn.hpp"

#include <cmath>

namespace rtda {

namespace {

Shape conv_shape(const Shape& in, int in_channels, int out_channels, int k, int stride, int pad,
                 std::string_view what) {
  if (in.size() != 4) throw ShapeError(std::string(what) + ": expected NCHW input, got " + shape_str(in));
  if (in[1] != in_channels) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(in_channels) + " input channels, got " +
                     std::to_string(in[1]));
  }
  if (in[2] + 2 * pad < k || in[3] + 2 * pad < k) {
    throw ShapeError(std::string(what) + ": input " + shape_str(in) + " smaller than kernel");
  }
  return {in[0], out_channels, (in[2] + 2 * pad - k) / stride + 1, (in[3] + 2 * pad - k) / stride + 1};
}

std::uint64_t spatial(const Shape& s) { return static_cast<std::uint64_t>(s[2]) * static_cast<std::uint64_t>(s[3]); }

}  // namespace

std::string join_name(const std::string& prefix, std::string_view leaf) {
  if (prefix.empty()) return std::string(leaf);
  return prefix + "." + std::string(leaf);
}

// ---------------------------------------------------------------------------

void ParamRegistry::check_unique(const std::string& name) const {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
}

void ParamRegistry::add_param(std::string name, Var<float> var) {
  check_unique(name);
  params_.push_back({std::move(name), std::move(var)});
}

void ParamRegistry::add_buffer(std::string name, Var<float> var) {
  check_unique(name);
  buffers_.push_back({std::move(name), std::move(var)});
}

std::uint64_t ParamRegistry::num_params() const {
  std::uint64_t n = 0;
  for (const auto& p : params_) n += p.var.value().numel();
  return n;
}

const Var<float>* ParamRegistry::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p.var;
  }
  for (const auto& b : buffers_) {
    if (b.name == name) return &b.var;
  }
  return nullptr;
}

void kaiming_normal(Tensor<float>& weight, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / fan_in);
  for (auto& v : weight.values()) v = static_cast<float>(rng.normal() * stddev);
}

// ---------------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(Tensor<float>({out_channels, in_channels, kernel, kernel}), true),
      bias_(Tensor<float>({out_channels}), true) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || pad < 0) {
    throw ConfigError("Conv2d: invalid geometry");
  }
}

Var<float> Conv2d::forward(Tape<float>& tape, const Var<float>& x, Mode) {
  return conv2d(tape, x, weight_, bias_, stride_, pad_);
}

Shape Conv2d::output_shape(const Shape& in) const { return conv_shape(in, in_, out_, k_, stride_, pad_, "conv"); }

void Conv2d::collect(const std::string& prefix, ParamRegistry& registry) {
  registry.add_param(join_name(prefix, "weight"), weight_);
  registry.add_param(join_name(prefix, "bias"), bias_);
}

void Conv2d::init(Rng& rng) {
  kaiming_normal(weight_.mutable_value(), in_ * k_ * k_, rng);
  bias_.mutable_value().fill(0.0f);
}

std::uint64_t Conv2d::num_params() const {
  return static_cast<std::uint64_t>(out_) * in_ * k_ * k_ + static_cast<std::uint64_t>(out_);
}

Shape Conv2d::account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const {
  Shape out = output_shape(in);
  rows.push_back({prefix, num_params(), static_cast<std::uint64_t>(k_) * k_ * in_ * out_ * spatial(out)});
  return out;
}

// ---------------------------------------------------------------------------

DSConv2d::DSConv2d(int in_channels, int out_channels, int kernel, int stride, int pad)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      dw_weight_(Tensor<float>({in_channels, 1, kernel, kernel}), true),
      dw_bias_(Tensor<float>({in_channels}), true),
      pw_weight_(Tensor<float>({out_channels, in_channels, 1, 1}), true),
      pw_bias_(Tensor<float>({out_channels}), true) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || pad < 0) {
    throw ConfigError("DSConv2d: invalid geometry");
  }
}

Var<float> DSConv2d::forward(Tape<float>& tape, const Var<float>& x, Mode) {
  Var<float> mid = depthwise_conv2d(tape, x, dw_weight_, dw_bias_, stride_, pad_);
  return conv2d(tape, mid, pw_weight_, pw_bias_, 1, 0);
}

Shape DSConv2d::output_shape(const Shape& in) const {
  Shape mid = conv_shape(in, in_, in_, k_, stride_, pad_, "dsconv");
  mid[1] = out_;
  return mid;
}

void DSConv2d::collect(const std::string& prefix, ParamRegistry& registry) {
  registry.add_param(join_name(prefix, "depthwise.weight"), dw_weight_);
  registry.add_param(join_name(prefix, "depthwise.bias"), dw_bias_);
  registry.add_param(join_name(prefix, "pointwise.weight"), pw_weight_);
  registry.add_param(join_name(prefix, "pointwise.bias"), pw_bias_);
}

void DSConv2d::init(Rng& rng) {
  // A depthwise filter sees one input channel.
  kaiming_normal(dw_weight_.mutable_value(), k_ * k_, rng);
  dw_bias_.mutable_value().fill(0.0f);
  kaiming_normal(pw_weight_.mutable_value(), in_, rng);
  pw_bias_.mutable_value().fill(0.0f);
}

std::uint64_t DSConv2d::num_params() const {
  const std::uint64_t in = in_, out = out_, kk = static_cast<std::uint64_t>(k_) * k_;
  return in * kk + in + in * out + out;
}

Shape DSConv2d::account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const {
  Shape out = output_shape(in);
  const std::uint64_t hw = spatial(out);
  const std::uint64_t kk = static_cast<std::uint64_t>(k_) * k_;
  rows.push_back({join_name(prefix, "depthwise"), static_cast<std::uint64_t>(in_) * kk + in_, kk * in_ * hw});
  rows.push_back({join_name(prefix, "pointwise"), static_cast<std::uint64_t>(in_) * out_ + out_,
                  static_cast<std::uint64_t>(in_) * out_ * hw});
  return out;
}

// ---------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(int channels)
    : channels_(channels),
      gamma_(Tensor<float>({channels}, 1.0f), true),
      beta_(Tensor<float>({channels}, 0.0f), true),
      running_mean_(Tensor<float>({channels}, 0.0f), false),
      running_var_(Tensor<float>({channels}, 1.0f), false) {}

Var<float> BatchNorm2d::forward(Tape<float>& tape, const Var<float>& x, Mode mode) {
  if (mode == Mode::Eval) {
    return batch_norm_eval(tape, x, gamma_, beta_, running_mean_.value(), running_var_.value(), kEps);
  }
  Tensor<float> mean, var;
  Var<float> y = batch_norm_train(tape, x, gamma_, beta_, kEps, &mean, &var);
  const auto& s = x.shape();
  const double m = static_cast<double>(s[0]) * s[2] * s[3];
  const double unbias = m > 1 ? m / (m - 1) : 1.0;
  auto& rm = running_mean_.mutable_value();
  auto& rv = running_var_.mutable_value();
  for (int c = 0; c < channels_; ++c) {
    rm[c] = (1.0f - kMomentum) * rm[c] + kMomentum * mean[c];
    rv[c] = (1.0f - kMomentum) * rv[c] + kMomentum * static_cast<float>(var[c] * unbias);
  }
  return y;
}

Shape BatchNorm2d::output_shape(const Shape& in) const {
  if (in.size() != 4 || in[1] != channels_) {
    throw ShapeError("batchnorm: expected " + std::to_string(channels_) + " channels, got " + shape_str(in));
  }
  return in;
}

void BatchNorm2d::collect(const std::string& prefix, ParamRegistry& registry) {
  registry.add_param(join_name(prefix, "gamma"), gamma_);
  registry.add_param(join_name(prefix, "beta"), beta_);
  registry.add_buffer(join_name(prefix, "running_mean"), running_mean_);
  registry.add_buffer(join_name(prefix, "running_var"), running_var_);
}

void BatchNorm2d::init(Rng&) {
  gamma_.mutable_value().fill(1.0f);
  beta_.mutable_value().fill(0.0f);
  running_mean_.mutable_value().fill(0.0f);
  running_var_.mutable_value().fill(1.0f);
}

Shape BatchNorm2d::account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const {
  Shape out = output_shape(in);
  rows.push_back({prefix, 2 * static_cast<std::uint64_t>(channels_), 0});
  return out;
}

// ---------------------------------------------------------------------------

Sequential& Sequential::add(std::string name, std::unique_ptr<Module> module) {
  for (const auto& [existing, m] : layers_) {
    if (existing == name) throw ConfigError("duplicate layer name '" + name + "'");
  }
  layers_.emplace_back(std::move(name), std::move(module));
  return *this;
}

Var<float> Sequential::forward(Tape<float>& tape, const Var<float>& x, Mode mode) {
  Var<float> h = x;
  for (auto& [name, layer] : layers_) h = layer->forward(tape, h, mode);
  return h;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& [name, layer] : layers_) s = layer->output_shape(s);
  return s;
}

void Sequential::collect(const std::string& prefix, ParamRegistry& registry) {
  for (auto& [name, layer] : layers_) layer->collect(join_name(prefix, name), registry);
}

void Sequential::init(Rng& rng) {
  for (auto& [name, layer] : layers_) layer->init(rng);
}

Shape Sequential::account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const {
  Shape s = in;
  for (const auto& [name, layer] : layers_) s = layer->account(join_name(prefix, name), s, rows);
  return s;
}

int Sequential::total_stride() const {
  int stride = 1;
  for (const auto& [name, layer] : layers_) stride *= layer->total_stride();
  return stride;
}

// ---------------------------------------------------------------------------

ModelGraph::ModelGraph(int in_channels) : in_channels_(in_channels) {
  if (in_channels < 1) throw ConfigError("ModelGraph: input channels must be positive");
}

ModelGraph& ModelGraph::add(std::string name, std::unique_ptr<Module> module) {
  module->collect(name, registry_);
  layers_.add(std::move(name), std::move(module));
  return *this;
}

Var<float> ModelGraph::forward(Tape<float>& tape, const Var<float>& input, Mode mode) {
  if (input.value().rank() != 4 || input.shape()[1] != in_channels_) {
    throw ShapeError("graph input " + shape_str(input.shape()) + " does not have " + std::to_string(in_channels_) +
                     " channels");
  }
  Var<float> h = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      h = layers_.at(i).forward(tape, h, mode);
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + layers_.name_at(i) + "': " + e.what());
    }
  }
  return h;
}

Shape ModelGraph::output_shape(const Shape& in) const {
  Shape s = in;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      s = layers_.at(i).output_shape(s);
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + layers_.name_at(i) + "': " + e.what());
    }
  }
  return s;
}

std::vector<LayerCost> ModelGraph::account(const Shape& in) const {
  std::vector<LayerCost> rows;
  layers_.account("", in, rows);
  return rows;
}

void ModelGraph::zero_grad() {
  for (const auto& p : registry_.params()) {
    Var<float> v = p.var;
    v.zero_grad();
  }
}

void ModelGraph::set_requires_grad(bool on) {
  for (const auto& p : registry_.params()) {
    Var<float> v = p.var;
    v.set_requires_grad(on);
  }
}

void init_kaiming(Module& module, Rng& rng) { module.init(rng); }
void init_kaiming(ModelGraph& graph, Rng& rng) { graph.init_kaiming(rng); }

std::uint64_t num_params(const ModelGraph& graph) { return graph.num_params(); }

}  // namespace rtda
