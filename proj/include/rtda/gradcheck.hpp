// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of every differentiable primitive.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rtda/autodiff.hpp"
#include "rtda/rng.hpp"

namespace rtda {

struct GradCheckOptions {
  int instances = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 20240601;
};

struct GradCheckResult {
  std::string primitive;
  int instances = 0;
  int passed = 0;
  double worst_relative_error = 0.0;

  bool ok() const { return instances > 0 && passed == instances; }
};

using PrimitiveFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Relative error ||g_rev - g_fd|| / max(||g_rev||, ||g_fd||) for the scalar
/// probe sum(f(inputs) * probe), maximized over the inputs. The probe weights
/// are drawn from `rng`; gradients are computed for every input.
double gradient_relative_error(const PrimitiveFn& f, const std::vector<Tensor<double>>& inputs, Rng& rng,
                               double step = 1e-5);

std::vector<std::string> gradcheck_primitives();

/// Runs `options.instances` random instances for each primitive.
std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& options = {});

}  // namespace rtda
