// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "rtda/autodiff.hpp"
#include "rtda/gradcheck.hpp"
#include "rtda/rng.hpp"
#include "support.hpp"

using namespace rtda;
using rtda::test::random_tensor;
using Catch::Approx;

namespace {

template <typename T>
Var<T> leaf(Tensor<T> t, bool grad = false) {
  return Var<T>(std::move(t), grad);
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 gives 9") {
  Tape<float> tape;
  auto x = leaf(Tensor<float>({1, 1, 3, 3}, 1.0f));
  auto w = leaf(Tensor<float>({1, 1, 3, 3}, 1.0f));
  auto b = leaf(Tensor<float>({1}, 0.0f));
  auto y = conv2d(tape, x, w, b, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value()[0] == 9.0f);
}

TEST_CASE("conv2d: output extent follows floor((H + 2p - k) / s) + 1") {
  Tape<float> tape;
  auto x = leaf(Tensor<float>({1, 19, 64, 128}, 0.5f));
  auto w = leaf(Tensor<float>({2, 19, 4, 4}, 0.1f));
  auto b = leaf(Tensor<float>({2}));
  CHECK(conv2d(tape, x, w, b, 2, 1).shape() == Shape{1, 2, 32, 64});
  // Extent arithmetic at 512x1024 without running the kernel.
  CHECK((512 + 2 - 4) / 2 + 1 == 256);
  CHECK((1024 + 2 - 4) / 2 + 1 == 512);
}

TEST_CASE("conv2d: 1x1 identity kernel returns the input") {
  Rng rng(1);
  Tape<float> tape;
  auto x = leaf(random_tensor<float>({2, 1, 5, 6}, rng));
  auto w = leaf(Tensor<float>({1, 1, 1, 1}, 1.0f));
  auto b = leaf(Tensor<float>({1}));
  CHECK(conv2d(tape, x, w, b, 1, 0).value() == x.value());
}

TEST_CASE("conv2d: one-hot kernel is an exact shifted crop") {
  Rng rng(2);
  const auto xs = random_tensor<float>({1, 1, 6, 7}, rng);
  for (int ky = 0; ky < 3; ++ky) {
    for (int kx = 0; kx < 3; ++kx) {
      Tape<float> tape;
      Tensor<float> w({1, 1, 3, 3});
      w.at(0, 0, ky, kx) = 1.0f;
      auto y = conv2d(tape, leaf(xs), leaf(w), leaf(Tensor<float>({1})), 1, 0);
      for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 5; ++ox) CHECK(y.value().at(0, 0, oy, ox) == xs.at(0, 0, oy + ky, ox + kx));
    }
  }
}

TEST_CASE("conv2d matches a direct-loop oracle") {
  Rng rng(3);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1, 2}) {
      const auto x = random_tensor<double>({2, 3, 7, 6}, rng);
      const auto w = random_tensor<double>({5, 3, 3, 3}, rng);
      const auto b = random_tensor<double>({5}, rng);
      Tape<double> tape;
      auto y = conv2d(tape, leaf(x), leaf(w), leaf(b), stride, pad);
      const auto ref = rtda::test::naive_conv(x, w, b, stride, pad);
      REQUIRE(y.shape() == ref.shape());
      CHECK(rtda::test::max_abs_diff(y.value(), ref) < 1e-12);
    }
  }
}

TEST_CASE("conv2d rejects mismatched channels and oversized kernels") {
  Tape<float> tape;
  auto x = leaf(Tensor<float>({1, 3, 4, 4}));
  auto b = leaf(Tensor<float>({1}));
  CHECK_THROWS_AS(conv2d(tape, x, leaf(Tensor<float>({1, 2, 3, 3})), b, 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, leaf(Tensor<float>({1, 3, 7, 7})), b, 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, leaf(Tensor<float>({1, 3, 3, 3})), b, 0, 0), ShapeError);
}

TEST_CASE("depthwise_conv2d keeps channels independent") {
  Tape<float> tape;
  Tensor<float> x({1, 2, 3, 3});
  for (int i = 0; i < 9; ++i) x[i] = 1.0f;
  auto y = depthwise_conv2d(tape, leaf(x), leaf(Tensor<float>({2, 1, 3, 3}, 1.0f)), leaf(Tensor<float>({2})), 1, 0);
  REQUIRE(y.shape() == Shape{1, 2, 1, 1});
  CHECK(y.value()[0] == 9.0f);
  CHECK(y.value()[1] == 0.0f);
}

TEMPLATE_TEST_CASE("depthwise_conv2d equals conv2d with block-diagonal weights, bitwise", "", float, double) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const int c = 2 + trial % 3;
    const int stride = 1 + trial % 2;
    const int pad = trial % 3;
    const auto x = random_tensor<TestType>({2, c, 7, 8}, rng);
    const auto dw = random_tensor<TestType>({c, 1, 3, 3}, rng);
    const auto b = random_tensor<TestType>({c}, rng);
    Tensor<TestType> full({c, c, 3, 3});
    for (int ch = 0; ch < c; ++ch)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) full.at(ch, ch, ky, kx) = dw.at(ch, 0, ky, kx);
    Tape<TestType> tape;
    auto a = depthwise_conv2d(tape, leaf(x), leaf(dw), leaf(b), stride, pad);
    auto r = conv2d(tape, leaf(x), leaf(full), leaf(b), stride, pad);
    CHECK(a.value() == r.value());
  }
}

TEST_CASE("leaky_relu examples") {
  Tape<float> tape;
  auto y = leaky_relu(tape, leaf(Tensor<float>({3}, std::vector<float>{1.0f, -1.0f, 0.0f})), 0.2f);
  CHECK(y.value()[0] == 1.0f);
  CHECK(y.value()[1] == Approx(-0.2f));
  CHECK(y.value()[2] == 0.0f);
  CHECK_THROWS_AS(leaky_relu(tape, leaf(Tensor<float>({1})), 1.5f), ConfigError);
}

TEST_CASE("softmax_channels examples") {
  Tape<double> tape;
  auto u = softmax_channels(tape, leaf(Tensor<double>({1, 19, 2, 2})));
  for (double v : u.value().values()) CHECK(v == Approx(1.0 / 19.0).margin(1e-12));

  Tensor<double> two({1, 2, 1, 1}, std::vector<double>{std::log(2.0), 0.0});
  auto p = softmax_channels(tape, leaf(two));
  CHECK(p.value()[0] == Approx(2.0 / 3.0).margin(1e-12));
  CHECK(p.value()[1] == Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("softmax_channels sums to one and ignores per-pixel shifts") {
  Rng rng(5);
  const auto x = random_tensor<float>({2, 6, 4, 5}, rng, -8, 8);
  Tape<float> tape;
  auto p = softmax_channels(tape, leaf(x));
  const int plane = 20;
  for (int n = 0; n < 2; ++n)
    for (int q = 0; q < plane; ++q) {
      double s = 0;
      for (int c = 0; c < 6; ++c) s += p.value()[(n * 6 + c) * plane + q];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  // Shifting by the per-pixel maximum is what the kernel subtracts, so the
  // result must not change at all.
  Tensor<float> shifted = x;
  for (int n = 0; n < 2; ++n)
    for (int q = 0; q < plane; ++q) {
      float m = -1e30f;
      for (int c = 0; c < 6; ++c) m = std::max(m, x[(n * 6 + c) * plane + q]);
      for (int c = 0; c < 6; ++c) shifted[(n * 6 + c) * plane + q] -= m;
    }
  CHECK(softmax_channels(tape, leaf(shifted)).value() == p.value());
  Tensor<float> plus = x;
  for (auto& v : plus.values()) v += 3.0f;
  CHECK(rtda::test::max_abs_diff(softmax_channels(tape, leaf(plus)).value(), p.value()) < 1e-6);
}

TEST_CASE("bilinear_upsample examples") {
  Tape<double> tape;
  auto c = bilinear_upsample(tape, leaf(Tensor<double>({1, 1, 4, 4}, 3.5)), 8, 8);
  for (double v : c.value().values()) CHECK(v == 3.5);

  auto one = bilinear_upsample(tape, leaf(Tensor<double>({1, 2, 1, 1}, std::vector<double>{1.25, -2.0})), 3, 5);
  for (int i = 0; i < 15; ++i) CHECK(one.value()[i] == 1.25);
  for (int i = 15; i < 30; ++i) CHECK(one.value()[i] == -2.0);

  auto col = bilinear_upsample(tape, leaf(Tensor<double>({1, 1, 2, 1}, std::vector<double>{0.0, 1.0})), 4, 1);
  CHECK(col.value()[0] == Approx(0.0));
  CHECK(col.value()[1] == Approx(0.25));
  CHECK(col.value()[2] == Approx(0.75));
  CHECK(col.value()[3] == Approx(1.0));

  CHECK_THROWS_AS(bilinear_upsample(tape, leaf(Tensor<double>({1, 1, 2, 2})), 0, 4), ShapeError);
  CHECK_THROWS_AS(bilinear_upsample(tape, leaf(Tensor<double>({1, 1, 4, 4})), 2, 4), ShapeError);
}

TEST_CASE("backward: linear loss gives the fixed operand") {
  Rng rng(6);
  const auto xs = random_tensor<double>({2, 3}, rng);
  auto w = leaf(random_tensor<double>({2, 3}, rng), true);
  Tape<double> tape;
  auto loss = reduce_sum(tape, mul(tape, w, leaf(xs)));
  tape.backward(loss);
  CHECK(w.grad() == xs);
}

TEST_CASE("backward: mean(conv2d(x, w)^2) matches central differences") {
  Rng rng(7);
  const auto x = random_tensor<double>({1, 2, 5, 5}, rng);
  auto w = leaf(random_tensor<double>({3, 2, 3, 3}, rng), true);
  auto b = leaf(random_tensor<double>({3}, rng), true);
  auto loss_of = [&](const Var<double>& wv) {
    Tape<double> t;
    auto y = conv2d(t, leaf(x), wv, b, 1, 1);
    return reduce_mean(t, mul(t, y, y)).value()[0];
  };
  Tape<double> tape;
  auto y = conv2d(tape, leaf(x), w, b, 1, 1);
  tape.backward(reduce_mean(tape, mul(tape, y, y)));
  const Tensor<double> analytic = w.grad();

  double num2 = 0, diff2 = 0, an2 = 0;
  const double h = 1e-5;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    Tensor<double> plus = w.value(), minus = w.value();
    plus[i] += h;
    minus[i] -= h;
    const double fd = (loss_of(leaf(plus)) - loss_of(leaf(minus))) / (2 * h);
    diff2 += (fd - analytic[i]) * (fd - analytic[i]);
    num2 += fd * fd;
    an2 += analytic[i] * analytic[i];
  }
  CHECK(std::sqrt(diff2) / std::max({std::sqrt(num2), std::sqrt(an2), 1e-8}) < 1e-4);
}

TEST_CASE("backward: repeated calls accumulate, zero_grad resets") {
  Rng rng(8);
  const auto x = random_tensor<double>({1, 2, 4, 4}, rng);
  auto w = leaf(random_tensor<double>({2, 2, 3, 3}, rng), true);
  auto b = leaf(random_tensor<double>({2}, rng), true);
  Tape<double> tape;
  auto y = conv2d(tape, leaf(x), w, b, 1, 0);
  auto loss = reduce_mean(tape, mul(tape, y, y));
  tape.backward(loss);
  const Tensor<double> once = w.grad();
  tape.backward(loss);
  for (std::size_t i = 0; i < once.numel(); ++i) CHECK(w.grad()[i] == Approx(2 * once[i]).epsilon(1e-12));
  w.zero_grad();
  for (double v : w.grad().values()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and losses without history") {
  Tape<double> tape;
  auto w = leaf(Tensor<double>({2}, 1.0), true);
  auto y = scale(tape, w, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
  Tape<double> other;
  auto c = reduce_sum(other, leaf(Tensor<double>({2}, 1.0)));
  CHECK_THROWS_AS(other.backward(c), Error);
}

TEST_CASE("non-finite results raise NumericError") {
  Tape<double> tape;
  CHECK_THROWS_AS(log(tape, leaf(Tensor<double>({2}, std::vector<double>{1.0, 0.0}))), NumericError);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(add(tape, leaf(Tensor<double>({1}, inf)), leaf(Tensor<double>({1}, 1.0))), NumericError);
}

TEST_CASE("tape records only when an input requires grad") {
  Tape<float> tape;
  auto a = leaf(Tensor<float>({2}, 1.0f));
  add(tape, a, a);
  CHECK(tape.size() == 0);
  auto p = leaf(Tensor<float>({2}, 1.0f), true);
  add(tape, a, p);
  CHECK(tape.size() == 1);
}

TEST_CASE("identical op sequences are bitwise reproducible") {
  auto run = [] {
    Rng rng(9);
    auto x = leaf(random_tensor<float>({2, 3, 8, 8}, rng));
    auto w = leaf(random_tensor<float>({4, 3, 3, 3}, rng), true);
    auto b = leaf(random_tensor<float>({4}, rng), true);
    Tape<float> tape;
    auto y = softmax_channels(tape, leaky_relu(tape, conv2d(tape, x, w, b, 2, 1), 0.2f));
    tape.backward(reduce_mean(tape, mul(tape, y, y)));
    return std::make_pair(y.value(), w.grad());
  };
  CHECK(run() == run());
}

TEST_CASE("gradient suite: every primitive within 1e-4 on 20 instances") {
  const auto results = run_gradcheck_suite({});
  CHECK(results.size() == gradcheck_primitives().size());
  for (const auto& r : results) {
    INFO(r.primitive << " worst " << r.worst_relative_error);
    CHECK(r.instances >= 20);
    CHECK(r.ok());
  }
}

TEST_CASE("mac tally counts forward convolution multiplies") {
  reset_mac_tally();
  Tape<float> tape;
  auto x = leaf(Tensor<float>({2, 3, 8, 8}));
  conv2d(tape, x, leaf(Tensor<float>({4, 3, 3, 3})), leaf(Tensor<float>({4})), 1, 1);
  CHECK(mac_tally() == 2ull * 4 * 3 * 9 * 64);
  reset_mac_tally();
  depthwise_conv2d(tape, x, leaf(Tensor<float>({3, 1, 3, 3})), leaf(Tensor<float>({3})), 2, 1);
  CHECK(mac_tally() == 2ull * 3 * 9 * 16);
}

TEST_CASE("batch_norm_train normalizes each channel") {
  Rng rng(10);
  const auto x = random_tensor<double>({4, 3, 5, 5}, rng, -3, 7);
  Tape<double> tape;
  Tensor<double> mean, var;
  auto y = batch_norm_train(tape, leaf(x), leaf(Tensor<double>({3}, 1.0)), leaf(Tensor<double>({3}, 0.0)), 1e-5,
                            &mean, &var);
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (int n = 0; n < 4; ++n)
      for (int q = 0; q < 25; ++q) {
        const double v = y.value()[(n * 3 + c) * 25 + q];
        s += v;
        s2 += v * v;
      }
    CHECK(std::abs(s / 100) < 1e-5);
    CHECK(std::abs(s2 / 100 - 1.0) < 1e-4);
  }
}
