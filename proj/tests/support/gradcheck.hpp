// Copyright 2026 The advmlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ==============================================================================

// Central finite-difference oracle for autodiff gradients. Independent of the
// backward implementations: it only evaluates forward values.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "advmlm/ops.hpp"
#include "advmlm/rng.hpp"

namespace advmlm::testing {

using TensorD = Tensor<double>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  Index checked = 0;
};

/// Relative error with a floor on the denominator, so gradients near zero are
/// judged on absolute error at the 1e-3 scale.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares autodiff against central differences (step eps) for every entry
/// of every input, or at most `max_coords` evenly spaced entries per input.
inline GradCheckResult grad_check(const std::function<TensorD()>& loss, std::vector<TensorD> inputs,
                                  double eps = 1e-4, Index max_coords = -1) {
  for (auto& in : inputs) in.zero_grad();
  loss().backward();
  std::vector<TensorD::Array> analytic;
  for (auto& in : inputs) analytic.push_back(in.grad_or_zero());

  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const Index n = in.size();
    const Index step = (max_coords > 0 && n > max_coords) ? n / max_coords : 1;
    for (Index j = 0; j < n; j += step) {
      const double orig = in.value()[j];
      in.mutable_value()[j] = orig + eps;
      const double up = loss().item();
      in.mutable_value()[j] = orig - eps;
      const double down = loss().item();
      in.mutable_value()[j] = orig;
      const double numeric = (up - down) / (2 * eps);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[k][j], numeric));
      res.max_abs_grad = std::max(res.max_abs_grad, std::abs(analytic[k][j]));
      ++res.checked;
    }
  }
  for (auto& in : inputs) in.zero_grad();
  return res;
}

inline TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  const Index n = numel(shape);
  TensorD::Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = rng.uniform(lo, hi);
  return TensorD(std::move(shape), std::move(a), requires_grad);
}

/// Constant random weights w; sum(w * y) turns any output into a scalar
/// loss where every entry contributes a distinct gradient.
inline TensorD probe_weights(const Shape& shape, Rng& rng) { return random_tensor(shape, rng, -1.0, 1.0, false); }

inline TensorD weighted_sum(const TensorD& y, const TensorD& w) { return sum(mul(y, w)); }

}  // namespace advmlm::testing
