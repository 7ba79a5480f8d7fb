// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <set>

#include "rtda/metrics.hpp"
#include "rtda/rng.hpp"

using namespace rtda;

namespace {

LabelMask mask(std::vector<std::uint8_t> v) {
  const int n = static_cast<int>(v.size());
  return LabelMask({1, n}, std::move(v));
}

// Exact fraction; compared by cross-multiplication.
struct Frac {
  std::uint64_t num, den;
};

// Per-class IoU from pixel index sets, independent of the confusion matrix.
std::vector<std::optional<Frac>> set_iou(const LabelMask& pred, const LabelMask& truth, int k) {
  std::vector<std::optional<Frac>> out;
  for (int c = 0; c < k; ++c) {
    std::set<std::size_t> p, t;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      if (truth[i] == kIgnoreLabel) continue;
      if (pred[i] == c) p.insert(i);
      if (truth[i] == c) t.insert(i);
    }
    std::vector<std::size_t> inter, uni;
    std::set_intersection(p.begin(), p.end(), t.begin(), t.end(), std::back_inserter(inter));
    std::set_union(p.begin(), p.end(), t.begin(), t.end(), std::back_inserter(uni));
    if (uni.empty()) out.emplace_back(std::nullopt);
    else out.emplace_back(Frac{inter.size(), uni.size()});
  }
  return out;
}

}  // namespace

TEST_CASE("accumulate examples") {
  ConfusionMatrix cm(3);
  std::vector<std::uint8_t> v(100);
  for (int i = 0; i < 100; ++i) v[i] = static_cast<std::uint8_t>(i % 3);
  cm.accumulate(mask(v), mask(v));
  CHECK(cm.diagonal() == 100);
  CHECK(cm.total() == 100);

  ConfusionMatrix empty(3);
  empty.accumulate(mask({0, 1, 2}), mask({255, 255, 255}));
  CHECK(empty.total() == 0);

  ConfusionMatrix two(2);
  two.accumulate(mask({0, 1, 1, 0}), mask({0, 1, 0, 1}));
  CHECK(two.at(0, 0) == 1);
  CHECK(two.at(0, 1) == 1);
  CHECK(two.at(1, 0) == 1);
  CHECK(two.at(1, 1) == 1);
}

TEST_CASE("accumulate errors") {
  ConfusionMatrix cm(2);
  CHECK_THROWS_AS(cm.accumulate(mask({0, 2}), mask({0, 1})), Error);
  CHECK_THROWS_AS(cm.accumulate(mask({0, 1}), mask({0, 3})), Error);
  CHECK_THROWS_AS(cm.accumulate(mask({0, 1, 1}), mask({0, 1})), ShapeError);
}

TEST_CASE("miou examples") {
  ConfusionMatrix diag(2);
  diag.at(0, 0) = 50;
  diag.at(1, 1) = 50;
  auto r = miou(diag);
  CHECK(*r.iou[0] == 1.0);
  CHECK(*r.iou[1] == 1.0);
  CHECK(r.mean == 1.0);

  ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(0, 1) = 1;
  cm.at(1, 0) = 1;
  cm.at(1, 1) = 3;
  r = miou(cm);
  CHECK(*r.iou[0] == 0.6);
  CHECK(*r.iou[1] == 0.6);
  CHECK(r.mean == 0.6);

  const std::vector<int> subset{0};
  r = miou(cm, std::span<const int>(subset));
  CHECK(r.classes == subset);
  CHECK(r.mean == 0.6);
}

TEST_CASE("absent classes are excluded from the mean") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 4;
  cm.at(1, 1) = 2;
  cm.at(1, 0) = 2;
  auto r = miou(cm);
  CHECK_FALSE(r.iou[2].has_value());
  CHECK(r.mean == Catch::Approx((4.0 / 6.0 + 2.0 / 4.0) / 2));
  const std::vector<int> only_absent{2};
  CHECK_THROWS_AS(miou(cm, std::span<const int>(only_absent)), Error);
  const std::vector<int> out_of_range{3};
  CHECK_THROWS_AS(miou(cm, std::span<const int>(out_of_range)), ConfigError);
}

TEST_CASE("miou equals brute-force set IoU on 200 random mask pairs") {
  Rng rng(20240601);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = rng.range(2, 6);
    const int h = rng.range(1, 16), w = rng.range(1, 16);
    LabelMask pred({h, w}), truth({h, w});
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      pred[i] = static_cast<std::uint8_t>(rng.below(k));
      truth[i] = rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(k));
    }
    ConfusionMatrix cm(k);
    cm.accumulate(pred, truth);
    const auto oracle = set_iou(pred, truth, k);
    bool any = false;
    for (const auto& o : oracle) any = any || o.has_value();
    if (!any) {
      CHECK_THROWS_AS(miou(cm), Error);
      continue;
    }
    const auto r = miou(cm);
    for (int c = 0; c < k; ++c) {
      REQUIRE(r.iou[c].has_value() == oracle[c].has_value());
      if (oracle[c]) CHECK(*r.iou[c] == static_cast<double>(oracle[c]->num) / static_cast<double>(oracle[c]->den));
    }
    double lo = 2, hi = -1;
    for (const auto& v : r.iou) {
      if (!v) continue;
      CHECK((*v >= 0.0 && *v <= 1.0));
      lo = std::min(lo, *v);
      hi = std::max(hi, *v);
    }
    CHECK(r.mean >= lo - 1e-15);
    CHECK(r.mean <= hi + 1e-15);
  }
}

TEST_CASE("accumulation order and sharded merges do not matter") {
  Rng rng(3);
  std::vector<std::pair<LabelMask, LabelMask>> batches;
  for (int b = 0; b < 8; ++b) {
    LabelMask p({4, 4}), t({4, 4});
    for (std::size_t i = 0; i < 16; ++i) {
      p[i] = static_cast<std::uint8_t>(rng.below(4));
      t[i] = static_cast<std::uint8_t>(rng.below(4));
    }
    batches.emplace_back(p, t);
  }
  ConfusionMatrix forward(4), backward(4), left(4), right(4);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    forward.accumulate(batches[i].first, batches[i].second);
    backward.accumulate(batches[batches.size() - 1 - i].first, batches[batches.size() - 1 - i].second);
    (i % 2 ? left : right).accumulate(batches[i].first, batches[i].second);
  }
  CHECK(forward == backward);
  ConfusionMatrix lr = left, rl = right;
  lr.merge(right);
  rl.merge(left);
  CHECK(lr == forward);
  CHECK(rl == forward);
}

TEST_CASE("argmax of a one-hot map reproduces the class indices") {
  Rng rng(4);
  const int k = 5, h = 6, w = 7;
  Tensor<float> onehot({2, k, h, w});
  LabelMask truth({2, h, w});
  for (int n = 0; n < 2; ++n)
    for (int q = 0; q < h * w; ++q) {
      const int c = static_cast<int>(rng.below(k));
      truth[n * h * w + q] = static_cast<std::uint8_t>(c);
      onehot[(n * k + c) * h * w + q] = 1.0f;
    }
  CHECK(argmax_channels(onehot) == truth);
}

TEST_CASE("report CSV layout") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 3;
  cm.at(0, 1) = 1;
  cm.at(1, 0) = 1;
  cm.at(1, 1) = 3;
  CHECK(miou(cm).to_csv() == "class,iou\n0,0.6\n1,0.6\n2,\nmIoU,0.6\n");
}
