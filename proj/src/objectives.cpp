// SPDX-License-Identifier: Apache-2.0

#include "rtda/objectives.hpp"

#include <cmath>

namespace rtda {

double poly_lr(double base_lr, std::int64_t iter, std::int64_t max_iter, double power) {
  if (max_iter < 1) throw ConfigError("poly_lr: max_iter must be at least 1");
  if (iter < 0 || iter > max_iter) throw ConfigError("poly_lr: iteration outside [0, max_iter]");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

namespace {

// Gradient of a parameter, or nullptr if it never received one.
const float* grad_of(const NamedVar& p) {
  const Var<float>& v = p.var;
  if (!v.has_grad()) return nullptr;
  if (v.grad().shape() != v.shape()) throw ShapeError("gradient shape mismatch for '" + p.name + "'");
  return v.grad().data();
}

}  // namespace

Sgd::Sgd(std::span<const NamedVar> params, SgdConfig config) : params_(params.begin(), params.end()), config_(config) {
  for (const auto& p : params_) momentum_.emplace_back(p.var.shape());
}

void Sgd::step(double lr) {
  const float rate = static_cast<float>(lr);
  const float mu = static_cast<float>(config_.momentum);
  const float wd = static_cast<float>(config_.weight_decay);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<float> var = params_[i].var;
    auto& theta = var.mutable_value();
    auto& buf = momentum_[i];
    if (buf.shape() != theta.shape()) throw ShapeError("momentum buffer shape mismatch for '" + params_[i].name + "'");
    const float* g = grad_of(params_[i]);
    for (std::size_t j = 0; j < theta.numel(); ++j) {
      const float d = (g ? g[j] : 0.0f) + wd * theta[j];
      buf[j] = mu * buf[j] + d;
      theta[j] -= rate * buf[j];
    }
  }
  ++steps_;
}

Adam::Adam(std::span<const NamedVar> params, AdamConfig config)
    : params_(params.begin(), params.end()), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::step(double lr) {
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<float> var = params_[i].var;
    auto& theta = var.mutable_value();
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.shape() != theta.shape() || v.shape() != theta.shape()) {
      throw ShapeError("moment buffer shape mismatch for '" + params_[i].name + "'");
    }
    const float* g = grad_of(params_[i]);
    for (std::size_t j = 0; j < theta.numel(); ++j) {
      const double gj = g ? g[j] : 0.0;
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      theta[j] = static_cast<float>(theta[j] - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

}  // namespace rtda
