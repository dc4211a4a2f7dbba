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

// Differentiable sampling: Gumbel noise, Gumbel-Softmax, budgeted relaxed
// subset selection and the three-way straight-through masker.
//
// Samplers take a const Rng and derive one sub-stream per batch row, so a
// call is a pure function of (inputs, stream seed).

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <type_traits>
#include <vector>

#include "advmlm/ops.hpp"
#include "advmlm/rng.hpp"
#include "advmlm/tensor.hpp"
#include "advmlm/types.hpp"

namespace advmlm {

struct SamplerParams {
  double rho = 0.10;
  double temperature = 1.0;
  double epsilon = 1e-18;

  void validate() const {
    require(rho > 0.0 && rho < 1.0, "SamplerParams: rho must lie in (0, 1)");
    require(temperature > 0.0, "SamplerParams: temperature must be positive");
    require(epsilon > 0.0, "SamplerParams: epsilon must be positive");
  }
};

/// Entries below this are treated as zero after subset selection.
inline constexpr double kResidueFloor = 1e-6;

/// i.i.d. standard Gumbel samples. Row r of a tensor with leading extent R is
/// drawn from rng.fork(r); rank-0/1 tensors use a single stream.
template <class S>
Tensor<S> gumbel_noise(const Shape& shape, const Rng& rng) {
  const Index n = numel(shape);
  const Index rows = shape.size() >= 2 ? shape.front() : 1;
  const Index per_row = rows > 0 ? n / rows : 0;
  typename Tensor<S>::Array a(n);
  for (Index r = 0; r < rows; ++r) {
    Rng row = rng.fork(static_cast<std::uint64_t>(r));
    for (Index i = 0; i < per_row; ++i) a[r * per_row + i] = static_cast<S>(row.gumbel());
  }
  return Tensor<S>(shape, std::move(a));
}

/// softmax((scores + Gumbel) / t) along the last dimension.
template <class S>
Tensor<S> gumbel_softmax(const Tensor<S>& scores, double temperature, const Rng& rng) {
  require(temperature > 0.0, "gumbel_softmax: temperature must be positive");
  const Tensor<S> g = add(scores, gumbel_noise<S>(scores.shape(), rng));
  return softmax(mul_scalar(g, static_cast<S>(1.0 / temperature)), -1);
}

/// round(len * rho) per row of `valid`.
inline std::vector<Index> subset_sizes(const IntMatrix& valid, double rho) {
  std::vector<Index> k(static_cast<std::size_t>(valid.rows()));
  for (Index r = 0; r < valid.rows(); ++r)
    k[static_cast<std::size_t>(r)] = static_cast<Index>(std::round(static_cast<double>(valid.row(r).sum()) * rho));
  return k;
}

/// Relaxed subset selection with a per-row budget of round(len * rho).
///
///   g = s + Gumbel
///   repeat while the row has budget left:
///     khot = max((1 - y) * valid, eps);  g += log(khot);  y += softmax(g / t)
///
/// A row stops accumulating once its budget is spent. Afterwards entries at
/// invalid positions and residue below kResidueFloor are zeroed.
/// s[B, T], valid[B, T] -> y_soft[B, T].
template <class S>
Tensor<S> rss_sampler(const Tensor<S>& s, const IntMatrix& valid, double rho, double temperature, const Rng& rng,
                      double epsilon = 1e-18) {
  require(s.rank() == 2 && s.dim(0) == valid.rows() && s.dim(1) == valid.cols(),
          "rss_sampler: scores " + shape_str(s.shape()) + " do not match mask");
  require(rho > 0.0 && rho < 1.0, "rss_sampler: rho must lie in (0, 1)");
  require(temperature > 0.0, "rss_sampler: temperature must be positive");
  require(s.value().isFinite().all(), "rss_sampler: scores must be finite");
  const Index rows = s.dim(0), cols = s.dim(1);
  const std::vector<Index> budget = subset_sizes(valid, rho);
  const Index rounds = budget.empty() ? 0 : *std::max_element(budget.begin(), budget.end());

  Tensor<S> g = add(s, gumbel_noise<S>(s.shape(), rng));
  Tensor<S> y = Tensor<S>::zeros(s.shape());
  IntMatrix active_valid = valid;
  const S inv_t = static_cast<S>(1.0 / temperature);
  for (Index it = 0; it < rounds; ++it) {
    typename Tensor<S>::Array row_on(rows);
    for (Index r = 0; r < rows; ++r) row_on[r] = it < budget[static_cast<std::size_t>(r)] ? S(1) : S(0);
    const Tensor<S> khot = maximum(mul(S(1) - y, mask_tensor<S>(active_valid, {rows, cols})), static_cast<S>(epsilon));
    g = add(g, log(khot));
    y = add(y, mul(softmax(mul_scalar(g, inv_t), -1), Tensor<S>({rows, 1}, row_on)));
    for (Index r = 0; r < rows; ++r)
      if (it + 1 >= budget[static_cast<std::size_t>(r)]) active_valid.row(r).setZero();
  }
  typename Tensor<S>::Array keep(rows * cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      keep[r * cols + c] = valid(r, c) != 0 && y.value()[r * cols + c] >= static_cast<S>(kResidueFloor) ? S(1) : S(0);
  return mul(y, Tensor<S>(s.shape(), std::move(keep)));
}

/// Exact k-hot of the `budget[r]` largest valid entries of each row of y
/// (lowest index wins ties). Constant.
template <class S>
Tensor<S> top_k_hot(const Tensor<S>& y, const IntMatrix& valid, const std::vector<Index>& budget) {
  const Index rows = y.dim(0), cols = y.dim(1);
  typename Tensor<S>::Array out = Tensor<S>::Array::Zero(rows * cols);
  std::vector<Index> idx;
  for (Index r = 0; r < rows; ++r) {
    idx.clear();
    for (Index c = 0; c < cols; ++c)
      if (valid(r, c)) idx.push_back(c);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(budget[static_cast<std::size_t>(r)]), idx.size());
    std::stable_sort(idx.begin(), idx.end(),
                     [&](Index a, Index b) { return y.value()[r * cols + a] > y.value()[r * cols + b]; });
    for (std::size_t j = 0; j < k; ++j) out[r * cols + idx[j]] = S(1);
  }
  return Tensor<S>(y.shape(), std::move(out));
}

/// Channel layout of the mask-options axis.
enum MaskChannel : Index { kChannelMask = 0, kChannelKeep = 1, kChannelReplace = 2 };

/// How a hard-masked position was noised.
enum class MaskKind : std::int32_t { kNone = -1, kMask = 0, kKeep = 1, kReplace = 2 };

template <class S>
struct StraightThroughResult {
  Tensor<S> x_tilde;    // [B, T, V]
  IntMatrix masked;     // 1 where p_mask_overall > 0.5
  IntMatrix kind;       // MaskKind per position
  IntMatrix replaced_by;  // replacement token id, -1 otherwise
};

/// Hard masking with straight-through gradients.
///
/// mask_any = [p_overall > 0.5]. Masked rows become one_hot(mask_id), the
/// original row, or a content-token one-hot, chosen by argmax over p_type
/// channels [MASK | keep | replace(v_idx..V-1)]; without p_type they become
/// one_hot(mask_id). Both hard decisions carry straight-through gradients:
///
///   x_tilde = x + st(mask_any, p_overall) * (x_masked - x)
///   x_masked = one_hot(mask_id) * M[0] + x * M[1] + pad(M[2:]),  M = st(argmax(p_type), p_type)
template <class S>
StraightThroughResult<S> straight_through(const Tensor<S>& x, const Tensor<S>& p_overall,
                                          const std::optional<std::type_identity_t<Tensor<S>>>& p_type, Index mask_id, Index v_idx) {
  require(x.rank() == 3, "straight_through: x must be [B, T, V]");
  const Index rows = x.dim(0), cols = x.dim(1), vocab = x.dim(2);
  require(p_overall.shape() == Shape({rows, cols}), "straight_through: p_mask_overall must be [B, T]");
  require(mask_id >= 0 && mask_id < v_idx && v_idx < vocab, "straight_through: need mask_id < v_idx < V");
  const auto& pv = p_overall.value();
  require((pv >= S(0)).all() && (pv <= S(1)).all(), "straight_through: p_mask_overall must lie in [0, 1]");

  StraightThroughResult<S> res;
  res.masked = IntMatrix::Zero(rows, cols);
  res.kind = IntMatrix::Constant(rows, cols, static_cast<std::int32_t>(MaskKind::kNone));
  res.replaced_by = IntMatrix::Constant(rows, cols, -1);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) res.masked(r, c) = pv[r * cols + c] > S(0.5) ? 1 : 0;

  const Tensor<S> any_hard = greater(p_overall, S(0.5));
  const Tensor<S> any_st = reshape(straight_through_estimator(any_hard, p_overall), {rows, cols, 1});
  const Tensor<S> mask_row = one_hot<S>({mask_id}, {}, vocab);

  Tensor<S> x_masked;
  if (!p_type) {
    x_masked = mask_row;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c)
        if (res.masked(r, c)) res.kind(r, c) = static_cast<std::int32_t>(MaskKind::kMask);
  } else {
    const Tensor<S>& pt = *p_type;
    const Index content = vocab - v_idx;
    require(pt.rank() == 3 && pt.dim(0) == rows && pt.dim(1) == cols,
            "straight_through: p_mask_type must be [B, T, 2 + V - v_idx]");
    require(pt.dim(2) == 2 + content, "straight_through: p_mask_type has " + std::to_string(pt.dim(2)) +
                                          " channels; replacement channels may only cover content tokens (" +
                                          std::to_string(2 + content) + " expected)");
    for (Index r = 0; r < rows * cols; ++r) {
      const double total = static_cast<double>(pt.value().segment(r * (2 + content), 2 + content).sum());
      require(std::abs(total - 1.0) <= 1e-4, "straight_through: p_mask_type rows must sum to 1");
    }
    const Tensor<S> hard = argmax_one_hot(pt);
    const Tensor<S> m = straight_through_estimator(hard, pt);
    const Tensor<S> m_mask = narrow(m, -1, kChannelMask, 1);
    const Tensor<S> m_keep = narrow(m, -1, kChannelKeep, 1);
    const Tensor<S> m_replace = narrow(m, -1, kChannelReplace, content);
    const Tensor<S> replace_rows = concat<S>({Tensor<S>::zeros({rows, cols, v_idx}), m_replace}, -1);
    x_masked = add(add(mul(mask_row, m_mask), mul(x, m_keep)), replace_rows);
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        if (!res.masked(r, c)) continue;
        Index ch = 0;
        hard.value().segment((r * cols + c) * (2 + content), 2 + content).maxCoeff(&ch);
        if (ch == kChannelMask) {
          res.kind(r, c) = static_cast<std::int32_t>(MaskKind::kMask);
        } else if (ch == kChannelKeep) {
          res.kind(r, c) = static_cast<std::int32_t>(MaskKind::kKeep);
        } else {
          res.kind(r, c) = static_cast<std::int32_t>(MaskKind::kReplace);
          res.replaced_by(r, c) = static_cast<std::int32_t>(v_idx + ch - kChannelReplace);
        }
      }
    }
  }
  res.x_tilde = add(x, mul(any_st, sub(x_masked, x)));
  return res;
}

}  // namespace advmlm
