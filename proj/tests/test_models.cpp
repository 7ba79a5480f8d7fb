// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "rtda/models.hpp"
#include "support.hpp"

using namespace rtda;
using rtda::test::random_tensor;

namespace {

std::uint64_t conv_params(std::uint64_t in, std::uint64_t out, std::uint64_t k) { return out * in * k * k + out; }
std::uint64_t ds_params(std::uint64_t in, std::uint64_t out, std::uint64_t k) {
  return in * k * k + in + in * out + out;
}

// Closed-form MACs of a k4 s2 p1 layer stack, independent of the library.
std::uint64_t disc_macs(const std::vector<int>& channels, bool separable, int cin, int h, int w) {
  std::uint64_t total = 0;
  int c = cin;
  for (int out : channels) {
    h = (h + 2 - 4) / 2 + 1;
    w = (w + 2 - 4) / 2 + 1;
    const std::uint64_t plane = static_cast<std::uint64_t>(h) * w;
    total += separable ? plane * c * 16 + plane * c * out : plane * out * c * 16;
    c = out;
  }
  return total;
}

}  // namespace

TEST_CASE("discriminator specs") {
  auto fcd = DiscriminatorSpec::make(DiscriminatorVariant::FCD, 19);
  CHECK(fcd.channels == std::vector<int>{64, 128, 256, 512, 1});
  CHECK_FALSE(fcd.separable);
  auto light = DiscriminatorSpec::make(DiscriminatorVariant::FCDLight, 19);
  CHECK(light.channels == fcd.channels);
  CHECK(light.separable);
  auto thin = DiscriminatorSpec::make(DiscriminatorVariant::FCDLightThin, 19);
  CHECK(thin.channels == std::vector<int>{64, 128, 1});
  CHECK(thin.separable);
  CHECK(thin.kernel == 4);
  CHECK(thin.stride == 2);
  CHECK(thin.pad == 1);
  CHECK_THROWS_AS(DiscriminatorSpec::make(DiscriminatorVariant::FCD, 1), ConfigError);
}

TEST_CASE("discriminator parameter counts, closed form") {
  const std::uint64_t fcd = conv_params(19, 64, 4) + conv_params(64, 128, 4) + conv_params(128, 256, 4) +
                            conv_params(256, 512, 4) + conv_params(512, 1, 4);
  const std::uint64_t light = ds_params(19, 64, 4) + ds_params(64, 128, 4) + ds_params(128, 256, 4) +
                              ds_params(256, 512, 4) + ds_params(512, 1, 4);
  const std::uint64_t thin = ds_params(19, 64, 4) + ds_params(64, 128, 4) + ds_params(128, 1, 4);
  CHECK(build_discriminator(DiscriminatorVariant::FCD, 19).num_params() == fcd);
  CHECK(build_discriminator(DiscriminatorVariant::FCDLight, 19).num_params() == light);
  CHECK(build_discriminator(DiscriminatorVariant::FCDLightThin, 19).num_params() == thin);
  CHECK(fcd == 2781121);
  CHECK(light == 191364);
  CHECK(thin == 13316);
}

TEST_CASE("FLOPs at 19x512x1024 agree with the closed form") {
  const std::vector<int> five{64, 128, 256, 512, 1};
  const std::vector<int> three{64, 128, 1};
  CHECK(count_flops(build_discriminator(DiscriminatorVariant::FCD, 19), 512, 1024).total_macs() ==
        disc_macs(five, false, 19, 512, 1024));
  CHECK(count_flops(build_discriminator(DiscriminatorVariant::FCDLight, 19), 512, 1024).total_macs() ==
        disc_macs(five, true, 19, 512, 1024));
  CHECK(count_flops(build_discriminator(DiscriminatorVariant::FCDLightThin, 19), 512, 1024).total_macs() ==
        disc_macs(three, true, 19, 512, 1024));
  const auto r = count_flops(build_discriminator(DiscriminatorVariant::FCD, 19), 512, 1024);
  CHECK(r.total_flops() == 2 * r.total_macs());
  CHECK(r.total_macs() == 15439233024ull);
}

TEST_CASE("FCD output extent at 1x19x512x1024 is 1x1x16x32") {
  ModelGraph d = build_discriminator(DiscriminatorVariant::FCD, 19);
  CHECK(d.output_shape({1, 19, 512, 1024}) == Shape{1, 1, 16, 32});
  CHECK(d.total_stride() == 32);
  Rng rng(1);
  d.init_kaiming(rng);
  Tape<float> tape;
  auto y = d.forward(tape, Var<float>(random_tensor<float>({1, 19, 64, 128}, rng, 0, 1)), Mode::Eval);
  CHECK(y.shape() == Shape{1, 1, 2, 4});
}

TEST_CASE("ordering invariants mirror the cost table") {
  std::vector<std::uint64_t> params, flops;
  for (auto v : all_variants()) {
    ModelGraph d = build_discriminator(v, 19);
    params.push_back(d.num_params());
    flops.push_back(count_flops(d, 512, 1024).total_flops());
  }
  CHECK(params[0] > params[1]);
  CHECK(params[1] > params[2]);
  CHECK(flops[0] > flops[1]);
  CHECK(flops[1] > flops[2]);
}

TEST_CASE("count_flops equals the multiply tally of a real forward") {
  for (auto v : all_variants()) {
    ModelGraph d = build_discriminator(v, 19);
    Rng rng(2);
    d.init_kaiming(rng);
    d.set_requires_grad(false);
    const auto report = count_flops(d, 32, 64);
    reset_mac_tally();
    Tape<float> tape;
    d.forward(tape, Var<float>(random_tensor<float>({1, 19, 32, 64}, rng)), Mode::Eval);
    CHECK(mac_tally() == report.total_macs());
  }
}

TEST_CASE("count_flops rejects resolutions not divisible by the stride") {
  ModelGraph d = build_discriminator(DiscriminatorVariant::FCD, 19);
  CHECK_THROWS_AS(count_flops(d, 500, 1024), ShapeError);
}

TEST_CASE("cost report totals equal the sum of rows; CSV ends with the total") {
  const auto r = count_flops(build_discriminator(DiscriminatorVariant::FCDLight, 19), 512, 1024);
  std::uint64_t p = 0, m = 0;
  for (const auto& row : r.rows) {
    p += row.params;
    m += row.macs;
  }
  CHECK(p == r.total_params());
  CHECK(m == r.total_macs());
  const std::string csv = r.to_csv();
  CHECK(csv.rfind("layer,params,macs,flops\n", 0) == 0);
  CHECK(csv.find("total,191364,") != std::string::npos);
  CHECK(r.to_text().find("191.364K") != std::string::npos);
}

TEST_CASE("variant names parse in several spellings") {
  CHECK(parse_variant("FCD") == DiscriminatorVariant::FCD);
  CHECK(parse_variant("fcd_light") == DiscriminatorVariant::FCDLight);
  CHECK(parse_variant("FCD-Light&Thin") == DiscriminatorVariant::FCDLightThin);
  CHECK(parse_variant("FCD_LIGHT_THIN") == DiscriminatorVariant::FCDLightThin);
  CHECK(variant_name(DiscriminatorVariant::FCDLightThin) == "FCD-Light&Thin");
  CHECK_THROWS_AS(parse_variant("PatchGAN"), ConfigError);
}

TEST_CASE("zeroed final layer gives exactly zero logits") {
  for (auto v : all_variants()) {
    ModelGraph d = build_discriminator(v, 5);
    Rng rng(3);
    d.init_kaiming(rng);
    zero_final_layer(d);
    Tape<float> tape;
    auto y = d.forward(tape, Var<float>(random_tensor<float>({2, 5, 64, 64}, rng, 0, 1)), Mode::Train);
    for (float x : y.value().values()) CHECK(x == 0.0f);
  }
}

TEST_CASE("mini-BiSeNet parameter count, closed form at width 1") {
  auto bn = [](std::uint64_t c) { return 2 * c; };
  const std::uint64_t spatial = conv_params(3, 16, 3) + bn(16) + conv_params(16, 32, 3) + bn(32) +
                                conv_params(32, 64, 3) + bn(64);
  const std::uint64_t stem = conv_params(3, 16, 3) + bn(16) + conv_params(16, 32, 3) + bn(32) +
                             conv_params(32, 32, 3) + bn(32);
  const std::uint64_t stages = conv_params(32, 64, 3) + bn(64) + conv_params(64, 128, 3) + bn(128);
  const std::uint64_t arms = conv_params(64, 64, 1) + conv_params(128, 128, 1);
  const std::uint64_t ffm = conv_params(256, 64, 1) + bn(64) + 2 * conv_params(64, 64, 1);
  const std::uint64_t head = conv_params(64, 5, 1);
  CHECK(build_mini_bisenet(5, 1.0).num_params() == spatial + stem + stages + arms + ffm + head);
}

TEST_CASE("mini-BiSeNet width scaling rounds to multiples of four") {
  CHECK(MiniBiSeNetSpec::scaled(64, 0.5) == 32);
  CHECK(MiniBiSeNetSpec::scaled(16, 0.3) == 8);
  CHECK(MiniBiSeNetSpec::scaled(16, 0.01) == 4);
  auto spec = MiniBiSeNetSpec::make(5, 0.5);
  CHECK(spec.spatial == std::vector<int>{8, 16, 32});
  CHECK(spec.context32 == 64);
}

TEST_CASE("mini-BiSeNet output covers the input and softmax sums to one") {
  ModelGraph seg = build_mini_bisenet(5, 0.5);
  Rng rng(4);
  seg.init_kaiming(rng);
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    Tape<float> tape;
    auto logits = seg.forward(tape, Var<float>(random_tensor<float>({2, 3, 64, 96}, rng, 0, 1)), mode);
    REQUIRE(logits.shape() == Shape{2, 5, 64, 96});
    auto p = softmax_channels(tape, logits);
    const std::size_t plane = 64 * 96;
    for (std::size_t q = 0; q < plane; q += 97) {
      double s = 0;
      for (int c = 0; c < 5; ++c) s += p.value()[c * plane + q];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  CHECK(seg.total_stride() == 32);
  CHECK_THROWS_AS(seg.output_shape({1, 3, 48, 64}), ShapeError);
}

TEST_CASE("mini-BiSeNet parameter names are unique and gradients reach every parameter") {
  ModelGraph seg = build_mini_bisenet(5, 0.25);
  Rng rng(5);
  seg.init_kaiming(rng);
  Tape<float> tape;
  auto logits = seg.forward(tape, Var<float>(random_tensor<float>({2, 3, 32, 32}, rng, 0, 1)), Mode::Train);
  LabelMask labels({2, 32, 32});
  for (std::size_t i = 0; i < labels.numel(); ++i) labels[i] = static_cast<std::uint8_t>(i % 5);
  tape.backward(softmax_cross_entropy(tape, logits, labels, Reduction::Mean));
  const auto& params = seg.registry().params();
  for (const auto& p : params) {
    INFO(p.name);
    CHECK(p.var.has_grad());
    // A conv bias feeding a train-mode BatchNorm cancels out of the loss.
    const std::string suffix = ".conv.bias";
    if (p.name.size() > suffix.size() && p.name.ends_with(suffix) &&
        seg.registry().find(p.name.substr(0, p.name.size() - suffix.size()) + ".bn.gamma")) {
      continue;
    }
    double norm = 0;
    for (float g : p.var.grad().values()) norm += std::abs(g);
    CHECK(norm > 0);
  }
}
