// SPDX-License-Identifier: Apache-2.0
//
// Domain discriminators, the reduced two-path segmentation network, and the
// analytical parameter / MAC / FLOP model.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rtda/nn.hpp"

namespace rtda {

enum class DiscriminatorVariant { FCD, FCDLight, FCDLightThin };

/// Canonical display names: "FCD", "FCD-Light", "FCD-Light&Thin".
std::string_view variant_name(DiscriminatorVariant v);
/// Accepts the display names and the FCD / FCD_LIGHT / FCD_LIGHT_THIN
/// spellings, case-insensitively. Throws ConfigError otherwise.
DiscriminatorVariant parse_variant(std::string_view text);
std::vector<DiscriminatorVariant> all_variants();

struct DiscriminatorSpec {
  DiscriminatorVariant variant = DiscriminatorVariant::FCD;
  int in_channels = 19;
  std::vector<int> channels;
  int kernel = 4;
  int stride = 2;
  int pad = 1;
  float slope = 0.2f;
  bool separable = false;

  static DiscriminatorSpec make(DiscriminatorVariant variant, int num_classes);
};

/// Fully convolutional discriminator emitting one logit per output cell.
/// Every layer but the last is followed by LeakyReLU(0.2).
ModelGraph build_discriminator(const DiscriminatorSpec& spec);
ModelGraph build_discriminator(DiscriminatorVariant variant, int num_classes);

/// Zeroes the last layer so the initial logits are exactly 0. For a
/// separable last layer only the pointwise stage is zeroed; zeroing both
/// stages would leave the layer with no gradient.
void zero_final_layer(ModelGraph& discriminator);

/// Channel widths after scaling; each rounded up to a multiple of 4.
struct MiniBiSeNetSpec {
  int num_classes = 5;
  double width_multiplier = 1.0;
  std::vector<int> spatial;  // three stride-2 3x3 conv + BN + ReLU stages
  std::vector<int> stem;     // context stem, down to 1/8
  int context16 = 64;
  int context32 = 128;
  int fusion = 64;

  static MiniBiSeNetSpec make(int num_classes, double width_multiplier);
  static int scaled(int channels, double width_multiplier);
};

/// Two-path segmentation network whose output holds per-class logits at the
/// input resolution. Softmax is applied by the caller.
ModelGraph build_mini_bisenet(const MiniBiSeNetSpec& spec);
ModelGraph build_mini_bisenet(int num_classes, double width_multiplier = 1.0);

struct CostReport {
  int in_channels = 0;
  int height = 0;
  int width = 0;
  std::vector<LayerCost> rows;

  std::uint64_t total_params() const;
  std::uint64_t total_macs() const;
  /// Two FLOPs per multiply-accumulate.
  std::uint64_t total_flops() const { return 2 * total_macs(); }

  std::string to_text() const;
  /// Columns: layer,params,macs,flops; the last row is "total".
  std::string to_csv() const;
};

/// Counts convolution MACs only (bias, normalization, activation, pooling
/// and resampling are free). Throws ShapeError when height or width is not
/// divisible by the graph's total stride.
CostReport count_flops(const ModelGraph& graph, int height, int width);

}  // namespace rtda
