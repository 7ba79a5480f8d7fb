// SPDX-License-Identifier: Apache-2.0

#include "rtda/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace rtda {

namespace {

Tensor<double> random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so kinked primitives are probed off the kink.
Tensor<double> off_kink_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) {
    const double mag = rng.uniform(0.05, 2.0);
    v = rng.below(2) ? mag : -mag;
  }
  return t;
}

Shape small_image(Rng& rng, int max_channels = 4) {
  return {rng.range(1, 2), rng.range(1, max_channels), rng.range(1, 4), rng.range(1, 4)};
}

LabelMask random_labels(Rng& rng, int n, int c, int h, int w) {
  LabelMask labels({n, h, w});
  for (auto& v : labels.values()) v = rng.below(5) == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.below(c));
  labels[0] = static_cast<std::uint8_t>(rng.below(c));
  return labels;
}

double probe_value(const Tensor<double>& out, const Tensor<double>& probe) {
  double acc = 0;
  for (std::size_t i = 0; i < out.numel(); ++i) acc += out[i] * probe[i];
  return acc;
}

double l2(const std::vector<double>& v) {
  double acc = 0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

struct Instance {
  PrimitiveFn fn;
  std::vector<Tensor<double>> inputs;
};

using Generator = std::function<Instance(Rng&)>;

std::map<std::string, Generator> generators() {
  std::map<std::string, Generator> g;

  auto conv_like = [](Rng& rng, bool depthwise) {
    const int n = rng.range(1, 2), cin = rng.range(1, 4);
    const int cout = depthwise ? cin : rng.range(1, 4);
    const int h = rng.range(2, 4), w = rng.range(2, 4);
    const int k = rng.range(1, 3), stride = rng.range(1, 2);
    int pad = rng.range(0, 1);
    while (h + 2 * pad < k || w + 2 * pad < k) ++pad;
    Instance inst;
    inst.inputs = {random_tensor(rng, {n, cin, h, w}, -1, 1),
                   random_tensor(rng, {cout, depthwise ? 1 : cin, k, k}, -1, 1), random_tensor(rng, {cout}, -1, 1)};
    inst.fn = [depthwise, stride, pad](Tape<double>& t, std::span<const Var<double>> v) {
      return depthwise ? depthwise_conv2d(t, v[0], v[1], v[2], stride, pad) : conv2d(t, v[0], v[1], v[2], stride, pad);
    };
    return inst;
  };
  g["conv2d"] = [conv_like](Rng& rng) { return conv_like(rng, false); };
  g["depthwise_conv2d"] = [conv_like](Rng& rng) { return conv_like(rng, true); };

  g["leaky_relu"] = [](Rng& rng) {
    const double slope = rng.uniform(0.05, 0.95);
    return Instance{[slope](Tape<double>& t, std::span<const Var<double>> v) { return leaky_relu(t, v[0], slope); },
                    {off_kink_tensor(rng, small_image(rng))}};
  };
  g["relu"] = [](Rng& rng) {
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return relu(t, v[0]); },
                    {off_kink_tensor(rng, small_image(rng))}};
  };
  g["sigmoid"] = [](Rng& rng) {
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return sigmoid(t, v[0]); },
                    {random_tensor(rng, small_image(rng), -4, 4)}};
  };
  g["log"] = [](Rng& rng) {
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return log(t, v[0]); },
                    {random_tensor(rng, small_image(rng), 0.5, 3)}};
  };
  g["softmax_channels"] = [](Rng& rng) {
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return softmax_channels(t, v[0]); },
                    {random_tensor(rng, small_image(rng), -3, 3)}};
  };
  g["bilinear_upsample"] = [](Rng& rng) {
    Shape s = small_image(rng);
    const int oh = rng.range(s[2], 2 * s[2] + 1), ow = rng.range(s[3], 2 * s[3] + 1);
    return Instance{
        [oh, ow](Tape<double>& t, std::span<const Var<double>> v) { return bilinear_upsample(t, v[0], oh, ow); },
        {random_tensor(rng, s, -1, 1)}};
  };
  g["add"] = [](Rng& rng) {
    Shape s = small_image(rng);
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return add(t, v[0], v[1]); },
                    {random_tensor(rng, s, -1, 1), random_tensor(rng, s, -1, 1)}};
  };
  g["mul"] = [](Rng& rng) {
    Shape s = small_image(rng);
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return mul(t, v[0], v[1]); },
                    {random_tensor(rng, s, -1, 1), random_tensor(rng, s, -1, 1)}};
  };
  g["scale"] = [](Rng& rng) {
    const double f = rng.uniform(-2, 2);
    return Instance{[f](Tape<double>& t, std::span<const Var<double>> v) { return scale(t, v[0], f); },
                    {random_tensor(rng, small_image(rng), -1, 1)}};
  };
  g["reduce_sum"] = [](Rng& rng) {
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return reduce_sum(t, v[0]); },
                    {random_tensor(rng, small_image(rng), -1, 1)}};
  };
  g["reduce_mean"] = [](Rng& rng) {
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return reduce_mean(t, v[0]); },
                    {random_tensor(rng, small_image(rng), -1, 1)}};
  };
  g["global_average_pool"] = [](Rng& rng) {
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return global_average_pool(t, v[0]); },
                    {random_tensor(rng, small_image(rng), -1, 1)}};
  };
  g["channel_scale"] = [](Rng& rng) {
    Shape s = small_image(rng);
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return channel_scale(t, v[0], v[1]); },
                    {random_tensor(rng, s, -1, 1), random_tensor(rng, {s[0], s[1], 1, 1}, -1, 1)}};
  };
  g["channel_add"] = [](Rng& rng) {
    Shape s = small_image(rng);
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) { return channel_add(t, v[0], v[1]); },
                    {random_tensor(rng, s, -1, 1), random_tensor(rng, {s[0], s[1], 1, 1}, -1, 1)}};
  };
  g["concat_channels"] = [](Rng& rng) {
    const int n = rng.range(1, 2), h = rng.range(1, 4), w = rng.range(1, 4);
    const int parts = rng.range(2, 3);
    Instance inst;
    for (int i = 0; i < parts; ++i) inst.inputs.push_back(random_tensor(rng, {n, rng.range(1, 3), h, w}, -1, 1));
    inst.fn = [](Tape<double>& t, std::span<const Var<double>> v) { return concat_channels(t, v); };
    return inst;
  };
  g["batch_norm_train"] = [](Rng& rng) {
    const int c = rng.range(1, 4);
    Shape s{2, c, rng.range(2, 4), rng.range(2, 4)};
    return Instance{[](Tape<double>& t, std::span<const Var<double>> v) {
                      return batch_norm_train(t, v[0], v[1], v[2], 1e-5);
                    },
                    {random_tensor(rng, s, -2, 2), random_tensor(rng, {c}, 0.5, 1.5), random_tensor(rng, {c}, -1, 1)}};
  };
  g["batch_norm_eval"] = [](Rng& rng) {
    const int c = rng.range(1, 4);
    Shape s = small_image(rng);
    s[1] = c;
    Tensor<double> mean = random_tensor(rng, {c}, -1, 1);
    Tensor<double> var = random_tensor(rng, {c}, 0.2, 2);
    return Instance{[mean, var](Tape<double>& t, std::span<const Var<double>> v) {
                      return batch_norm_eval(t, v[0], v[1], v[2], mean, var, 1e-5);
                    },
                    {random_tensor(rng, s, -2, 2), random_tensor(rng, {c}, 0.5, 1.5), random_tensor(rng, {c}, -1, 1)}};
  };
  g["bce_with_logits"] = [](Rng& rng) {
    const double target = static_cast<double>(rng.below(2));
    const Reduction red = rng.below(2) ? Reduction::Mean : Reduction::Sum;
    return Instance{[target, red](Tape<double>& t, std::span<const Var<double>> v) {
                      return bce_with_logits(t, v[0], target, red);
                    },
                    {random_tensor(rng, small_image(rng, 1), -5, 5)}};
  };
  g["nll_probs"] = [](Rng& rng) {
    Shape s = small_image(rng);
    s[1] = rng.range(2, 4);
    LabelMask labels = random_labels(rng, s[0], s[1], s[2], s[3]);
    const Reduction red = rng.below(2) ? Reduction::Mean : Reduction::Sum;
    return Instance{[labels, red](Tape<double>& t, std::span<const Var<double>> v) {
                      return nll_probs(t, v[0], labels, red);
                    },
                    {random_tensor(rng, s, 0.2, 1.0)}};
  };
  g["softmax_cross_entropy"] = [](Rng& rng) {
    Shape s = small_image(rng);
    s[1] = rng.range(2, 4);
    LabelMask labels = random_labels(rng, s[0], s[1], s[2], s[3]);
    const Reduction red = rng.below(2) ? Reduction::Mean : Reduction::Sum;
    return Instance{[labels, red](Tape<double>& t, std::span<const Var<double>> v) {
                      return softmax_cross_entropy(t, v[0], labels, red);
                    },
                    {random_tensor(rng, s, -3, 3)}};
  };
  return g;
}

}  // namespace

double gradient_relative_error(const PrimitiveFn& f, const std::vector<Tensor<double>>& inputs, Rng& rng,
                               double step) {
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  Tape<double> tape;
  Var<double> out = f(tape, vars);
  Tensor<double> probe(out.shape());
  for (auto& v : probe.values()) v = rng.uniform(-1, 1);
  Var<double> loss = reduce_sum(tape, mul(tape, out, Var<double>(probe)));
  tape.backward(loss);

  auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
    std::vector<Var<double>> plain;
    for (const auto& t : xs) plain.emplace_back(t, false);
    Tape<double> scratch;
    return probe_value(f(scratch, plain).value(), probe);
  };

  double worst = 0;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(vars[k].grad().values().begin(), vars[k].grad().values().end());
    std::vector<double> numeric(inputs[k].numel());
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + step;
      const double up = evaluate(work);
      work[k][i] = orig - step;
      const double down = evaluate(work);
      work[k][i] = orig;
      numeric[i] = (up - down) / (2 * step);
    }
    std::vector<double> diff(numeric.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double denom = std::max({l2(analytic), l2(numeric), 1e-8});
    worst = std::max(worst, l2(diff) / denom);
  }
  return worst;
}

std::vector<std::string> gradcheck_primitives() {
  std::vector<std::string> names;
  for (const auto& [name, gen] : generators()) names.push_back(name);
  return names;
}

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  std::uint64_t salt = 0;
  for (const auto& [name, gen] : generators()) {
    Rng rng(mix_seed(options.seed, ++salt));
    GradCheckResult r{name, 0, 0, 0.0};
    for (int i = 0; i < options.instances; ++i) {
      Instance inst = gen(rng);
      const double err = gradient_relative_error(inst.fn, inst.inputs, rng, options.step);
      ++r.instances;
      if (err < options.tolerance) ++r.passed;
      r.worst_relative_error = std::max(r.worst_relative_error, err);
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace rtda
