// SPDX-License-Identifier: Apache-2.0

#include "rtda/models.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace rtda {

// ---------------------------------------------------------------------------
// Discriminators

std::string_view variant_name(DiscriminatorVariant v) {
  switch (v) {
    case DiscriminatorVariant::FCD:
      return "FCD";
    case DiscriminatorVariant::FCDLight:
      return "FCD-Light";
    case DiscriminatorVariant::FCDLightThin:
      return "FCD-Light&Thin";
  }
  return "?";
}

DiscriminatorVariant parse_variant(std::string_view text) {
  std::string key;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c == '-' || c == '_' || c == '&' || c == ' ') continue;
    key += static_cast<char>(std::tolower(c));
  }
  if (key == "fcd") return DiscriminatorVariant::FCD;
  if (key == "fcdlight") return DiscriminatorVariant::FCDLight;
  if (key == "fcdlightthin") return DiscriminatorVariant::FCDLightThin;
  throw ConfigError("unknown discriminator variant '" + std::string(text) + "'");
}

std::vector<DiscriminatorVariant> all_variants() {
  return {DiscriminatorVariant::FCD, DiscriminatorVariant::FCDLight, DiscriminatorVariant::FCDLightThin};
}

DiscriminatorSpec DiscriminatorSpec::make(DiscriminatorVariant variant, int num_classes) {
  if (num_classes < 2) throw ConfigError("discriminator needs at least 2 input classes");
  DiscriminatorSpec spec;
  spec.variant = variant;
  spec.in_channels = num_classes;
  switch (variant) {
    case DiscriminatorVariant::FCD:
      spec.channels = {64, 128, 256, 512, 1};
      break;
    case DiscriminatorVariant::FCDLight:
      spec.channels = {64, 128, 256, 512, 1};
      spec.separable = true;
      break;
    case DiscriminatorVariant::FCDLightThin:
      spec.channels = {64, 128, 1};
      spec.separable = true;
      break;
  }
  return spec;
}

ModelGraph build_discriminator(const DiscriminatorSpec& spec) {
  ModelGraph graph(spec.in_channels);
  int in = spec.in_channels;
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    const int out = spec.channels[i];
    const std::string idx = std::to_string(i + 1);
    if (spec.separable) {
      graph.emplace<DSConv2d>("conv" + idx, in, out, spec.kernel, spec.stride, spec.pad);
    } else {
      graph.emplace<Conv2d>("conv" + idx, in, out, spec.kernel, spec.stride, spec.pad);
    }
    if (i + 1 < spec.channels.size()) graph.emplace<LeakyReLU>("lrelu" + idx, spec.slope);
    in = out;
  }
  return graph;
}

ModelGraph build_discriminator(DiscriminatorVariant variant, int num_classes) {
  return build_discriminator(DiscriminatorSpec::make(variant, num_classes));
}

void zero_final_layer(ModelGraph& discriminator) {
  auto& layers = discriminator.layers();
  for (std::size_t i = layers.size(); i-- > 0;) {
    Module& m = layers.at(i);
    if (auto* conv = dynamic_cast<Conv2d*>(&m)) {
      conv->weight().mutable_value().fill(0.0f);
      conv->bias().mutable_value().fill(0.0f);
      return;
    }
    if (auto* ds = dynamic_cast<DSConv2d*>(&m)) {
      ds->pointwise_weight().mutable_value().fill(0.0f);
      ds->pointwise_bias().mutable_value().fill(0.0f);
      return;
    }
  }
  throw ConfigError("zero_final_layer: graph has no convolution");
}

// ---------------------------------------------------------------------------
// Two-path segmentation network

namespace {

std::unique_ptr<Sequential> conv_bn_relu(int in, int out, int k, int stride, int pad) {
  auto block = std::make_unique<Sequential>();
  block->emplace<Conv2d>("conv", in, out, k, stride, pad);
  block->emplace<BatchNorm2d>("bn", out);
  block->emplace<ReLU>("relu");
  return block;
}

Shape pooled(const Shape& in) { return {in[0], in[1], 1, 1}; }

// Global pool -> 1x1 conv -> sigmoid, used to reweight the input channels.
class AttentionRefinement final : public Module {
 public:
  explicit AttentionRefinement(int channels) : conv_(channels, channels, 1) {}

  std::string_view kind() const override { return "attention_refinement"; }

  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) override {
    Var<float> gate = sigmoid(tape, conv_.forward(tape, global_average_pool(tape, x), mode));
    return channel_scale(tape, x, gate);
  }

  Shape output_shape(const Shape& in) const override {
    conv_.output_shape(pooled(in));
    return in;
  }
  void collect(const std::string& prefix, ParamRegistry& registry) override {
    conv_.collect(join_name(prefix, "conv"), registry);
  }
  void init(Rng& rng) override { conv_.init(rng); }
  Shape account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const override {
    conv_.account(join_name(prefix, "conv"), pooled(in), rows);
    return in;
  }

 private:
  Conv2d conv_;
};

// 1x1 conv-BN-ReLU projection of the concatenated paths, then
// y = f + f * sigmoid(conv(relu(conv(pool(f))))).
class FeatureFusion final : public Module {
 public:
  FeatureFusion(int in, int out) : proj_(conv_bn_relu(in, out, 1, 1, 0)), squeeze_(out, out, 1), excite_(out, out, 1) {}

  std::string_view kind() const override { return "feature_fusion"; }

  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) override {
    Var<float> f = proj_->forward(tape, x, mode);
    Var<float> a = relu(tape, squeeze_.forward(tape, global_average_pool(tape, f), mode));
    Var<float> gate = sigmoid(tape, excite_.forward(tape, a, mode));
    return add(tape, f, channel_scale(tape, f, gate));
  }

  Shape output_shape(const Shape& in) const override {
    Shape f = proj_->output_shape(in);
    excite_.output_shape(squeeze_.output_shape(pooled(f)));
    return f;
  }
  void collect(const std::string& prefix, ParamRegistry& registry) override {
    proj_->collect(join_name(prefix, "proj"), registry);
    squeeze_.collect(join_name(prefix, "squeeze"), registry);
    excite_.collect(join_name(prefix, "excite"), registry);
  }
  void init(Rng& rng) override {
    proj_->init(rng);
    squeeze_.init(rng);
    excite_.init(rng);
  }
  Shape account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const override {
    Shape f = proj_->account(join_name(prefix, "proj"), in, rows);
    Shape s = squeeze_.account(join_name(prefix, "squeeze"), pooled(f), rows);
    excite_.account(join_name(prefix, "excite"), s, rows);
    return f;
  }

 private:
  std::unique_ptr<Sequential> proj_;
  Conv2d squeeze_, excite_;
};

class TwoPathNet final : public Module {
 public:
  explicit TwoPathNet(const MiniBiSeNetSpec& spec)
      : spec_(spec), arm16_(spec.context16), arm32_(spec.context32),
        ffm_(spec.spatial.back() + spec.context16 + spec.context32, spec.fusion),
        head_(spec.fusion, spec.num_classes, 1) {
    int in = 3;
    for (std::size_t i = 0; i < spec.spatial.size(); ++i) {
      spatial_.add(std::to_string(i), conv_bn_relu(in, spec.spatial[i], 3, 2, 1));
      in = spec.spatial[i];
    }
    in = 3;
    for (std::size_t i = 0; i < spec.stem.size(); ++i) {
      stem_.add(std::to_string(i), conv_bn_relu(in, spec.stem[i], 3, 2, 1));
      in = spec.stem[i];
    }
    stage16_.add("0", conv_bn_relu(in, spec.context16, 3, 2, 1));
    stage32_.add("0", conv_bn_relu(spec.context16, spec.context32, 3, 2, 1));
  }

  std::string_view kind() const override { return "two_path"; }

  Var<float> forward(Tape<float>& tape, const Var<float>& x, Mode mode) override {
    output_shape(x.shape());
    const int h = x.shape()[2], w = x.shape()[3];
    Var<float> sp = spatial_.forward(tape, x, mode);
    const int h8 = sp.shape()[2], w8 = sp.shape()[3];
    Var<float> c8 = stem_.forward(tape, x, mode);
    Var<float> c16 = stage16_.forward(tape, c8, mode);
    Var<float> c32 = stage32_.forward(tape, c16, mode);
    Var<float> tail = global_average_pool(tape, c32);
    Var<float> r32 = channel_scale(tape, arm32_.forward(tape, c32, mode), tail);
    Var<float> r16 = arm16_.forward(tape, c16, mode);
    const Var<float> parts[] = {sp, bilinear_upsample(tape, r16, h8, w8), bilinear_upsample(tape, r32, h8, w8)};
    Var<float> fused = ffm_.forward(tape, concat_channels<float>(tape, parts), mode);
    return bilinear_upsample(tape, head_.forward(tape, fused, mode), h, w);
  }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4 || in[1] != 3) throw ShapeError("two-path net expects [N,3,H,W], got " + shape_str(in));
    if (in[2] % 32 != 0 || in[3] % 32 != 0) {
      throw ShapeError("two-path net input " + shape_str(in) + " must be divisible by 32");
    }
    return {in[0], spec_.num_classes, in[2], in[3]};
  }

  void collect(const std::string& prefix, ParamRegistry& registry) override {
    spatial_.collect(join_name(prefix, "spatial"), registry);
    stem_.collect(join_name(prefix, "stem"), registry);
    stage16_.collect(join_name(prefix, "stage16"), registry);
    stage32_.collect(join_name(prefix, "stage32"), registry);
    arm16_.collect(join_name(prefix, "arm16"), registry);
    arm32_.collect(join_name(prefix, "arm32"), registry);
    ffm_.collect(join_name(prefix, "ffm"), registry);
    head_.collect(join_name(prefix, "head"), registry);
  }

  void init(Rng& rng) override {
    spatial_.init(rng);
    stem_.init(rng);
    stage16_.init(rng);
    stage32_.init(rng);
    arm16_.init(rng);
    arm32_.init(rng);
    ffm_.init(rng);
    head_.init(rng);
  }

  Shape account(const std::string& prefix, const Shape& in, std::vector<LayerCost>& rows) const override {
    Shape out = output_shape(in);
    Shape sp = spatial_.account(join_name(prefix, "spatial"), in, rows);
    Shape c8 = stem_.account(join_name(prefix, "stem"), in, rows);
    Shape c16 = stage16_.account(join_name(prefix, "stage16"), c8, rows);
    Shape c32 = stage32_.account(join_name(prefix, "stage32"), c16, rows);
    arm16_.account(join_name(prefix, "arm16"), c16, rows);
    arm32_.account(join_name(prefix, "arm32"), c32, rows);
    Shape cat{in[0], sp[1] + c16[1] + c32[1], sp[2], sp[3]};
    Shape fused = ffm_.account(join_name(prefix, "ffm"), cat, rows);
    head_.account(join_name(prefix, "head"), fused, rows);
    return out;
  }

  int total_stride() const override { return 32; }

 private:
  MiniBiSeNetSpec spec_;
  Sequential spatial_, stem_, stage16_, stage32_;
  AttentionRefinement arm16_, arm32_;
  FeatureFusion ffm_;
  Conv2d head_;
};

}  // namespace

int MiniBiSeNetSpec::scaled(int channels, double width_multiplier) {
  const int c = static_cast<int>(std::ceil(channels * width_multiplier / 4.0 - 1e-9)) * 4;
  return std::max(4, c);
}

MiniBiSeNetSpec MiniBiSeNetSpec::make(int num_classes, double width_multiplier) {
  if (num_classes < 2) throw ConfigError("segmentation network needs at least 2 classes");
  if (!(width_multiplier > 0)) throw ConfigError("width multiplier must be positive");
  MiniBiSeNetSpec spec;
  spec.num_classes = num_classes;
  spec.width_multiplier = width_multiplier;
  for (int c : {16, 32, 64}) spec.spatial.push_back(scaled(c, width_multiplier));
  for (int c : {16, 32, 32}) spec.stem.push_back(scaled(c, width_multiplier));
  spec.context16 = scaled(64, width_multiplier);
  spec.context32 = scaled(128, width_multiplier);
  spec.fusion = scaled(64, width_multiplier);
  return spec;
}

ModelGraph build_mini_bisenet(const MiniBiSeNetSpec& spec) {
  ModelGraph graph(3);
  graph.emplace<TwoPathNet>("net", spec);
  return graph;
}

ModelGraph build_mini_bisenet(int num_classes, double width_multiplier) {
  return build_mini_bisenet(MiniBiSeNetSpec::make(num_classes, width_multiplier));
}

// ---------------------------------------------------------------------------
// Cost model

std::uint64_t CostReport::total_params() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

std::uint64_t CostReport::total_macs() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.macs;
  return n;
}

namespace {

std::string human(double value) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  if (value >= 1e9) {
    os << value / 1e9 << "G";
  } else if (value >= 1e6) {
    os << value / 1e6 << "M";
  } else if (value >= 1e3) {
    os << value / 1e3 << "K";
  } else {
    os << std::setprecision(0) << value;
  }
  return os.str();
}

}  // namespace

std::string CostReport::to_text() const {
  std::size_t width_name = 5;
  for (const auto& r : rows) width_name = std::max(width_name, r.name.size());
  std::ostringstream os;
  os << "input " << in_channels << "x" << height << "x" << width << "\n";
  os << std::left << std::setw(static_cast<int>(width_name)) << "layer" << std::right << std::setw(14) << "params"
     << std::setw(16) << "MACs" << std::setw(16) << "FLOPs" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(width_name)) << r.name << std::right << std::setw(14) << r.params
       << std::setw(16) << r.macs << std::setw(16) << 2 * r.macs << "\n";
  }
  os << std::left << std::setw(static_cast<int>(width_name)) << "total" << std::right << std::setw(14)
     << total_params() << std::setw(16) << total_macs() << std::setw(16) << total_flops() << "\n";
  os << "params " << human(static_cast<double>(total_params())) << ", FLOPs "
     << human(static_cast<double>(total_flops())) << "\n";
  return os.str();
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "layer,params,macs,flops\n";
  for (const auto& r : rows) os << r.name << "," << r.params << "," << r.macs << "," << 2 * r.macs << "\n";
  os << "total," << total_params() << "," << total_macs() << "," << total_flops() << "\n";
  return os.str();
}

CostReport count_flops(const ModelGraph& graph, int height, int width) {
  const int stride = graph.total_stride();
  if (height < 1 || width < 1 || height % stride != 0 || width % stride != 0) {
    throw ShapeError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by the total stride " + std::to_string(stride));
  }
  CostReport report;
  report.in_channels = graph.in_channels();
  report.height = height;
  report.width = width;
  report.rows = graph.account({1, graph.in_channels(), height, width});
  return report;
}

}  // namespace rtda
