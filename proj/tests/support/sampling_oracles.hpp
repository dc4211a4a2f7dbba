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

// Statistical and brute-force oracles for the samplers. Each helper returns a
// raw statistic; callers own the pass/fail threshold.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "advmlm/sampling.hpp"
#include "support/gradcheck.hpp"

namespace advmlm::testing {

inline TensorD tile_rows(const std::vector<double>& row, Index n) {
  const Index len = static_cast<Index>(row.size());
  TensorD::Array a(n * len);
  for (Index r = 0; r < n; ++r)
    for (Index j = 0; j < len; ++j) a[r * len + j] = row[static_cast<std::size_t>(j)];
  return TensorD({n, len}, std::move(a));
}

inline std::vector<Index> argmax_counts(const TensorD& y) {
  const Index len = y.dim(-1);
  std::vector<Index> counts(static_cast<std::size_t>(len), 0);
  for (Index r = 0; r < y.size() / len; ++r) {
    Index best = 0;
    y.value().segment(r * len, len).maxCoeff(&best);
    ++counts[static_cast<std::size_t>(best)];
  }
  return counts;
}

/// Total variation between Gumbel-softmax argmax frequencies (t = 1) and the
/// exact categorical softmax(scores).
inline double gumbel_softmax_argmax_tv(const TensorD& scores, Index n, const Rng& rng) {
  NoGradGuard guard;
  const std::vector<double> row(scores.value().data(), scores.value().data() + scores.size());
  const auto counts = argmax_counts(gumbel_softmax(tile_rows(row, n), 1.0, rng));
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0;
  for (double s : row) z += std::exp(s - mx);
  double tv = 0;
  for (std::size_t j = 0; j < row.size(); ++j)
    tv += std::abs(static_cast<double>(counts[j]) / static_cast<double>(n) - std::exp(row[j] - mx) / z);
  return tv / 2;
}

/// Pearson chi-square of argmax counts against uniform for equal scores.
inline double gumbel_softmax_uniform_chi2(Index categories, Index n, const Rng& rng) {
  NoGradGuard guard;
  const auto counts =
      argmax_counts(gumbel_softmax(tile_rows(std::vector<double>(static_cast<std::size_t>(categories), 0.0), n), 1.0, rng));
  const double expected = static_cast<double>(n) / static_cast<double>(categories);
  double chi2 = 0;
  for (Index c : counts) chi2 += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  return chi2;
}

inline std::vector<Index> sorted_support(const TensorD& khot, Index row) {
  const Index len = khot.dim(1);
  std::vector<Index> out;
  for (Index c = 0; c < len; ++c)
    if (khot.value()[row * len + c] > 0.5) out.push_back(c);
  return out;
}

/// Fraction of trials in which the hard k-subset drawn from rss_sampler equals
/// the brute-force top-k of scores plus the same Gumbel noise.
inline double rss_topk_match_rate(Index trials, Index seq, Index k, double temperature, const Rng& rng) {
  NoGradGuard guard;
  Rng score_rng = rng.fork(1);
  const Rng stream = rng.fork(2);
  const TensorD s = random_tensor({trials, seq}, score_rng, -2, 2, false);
  const IntMatrix valid = IntMatrix::Ones(trials, seq);
  const double rho = static_cast<double>(k) / static_cast<double>(seq);
  const TensorD y = rss_sampler(s, valid, rho, temperature, stream);
  const TensorD hard = top_k_hot(y, valid, subset_sizes(valid, rho));
  const TensorD perturbed = add(s, gumbel_noise<double>(s.shape(), stream));
  Index matches = 0;
  for (Index r = 0; r < trials; ++r) {
    std::vector<Index> idx(static_cast<std::size_t>(seq));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
      return perturbed.value()[r * seq + a] > perturbed.value()[r * seq + b];
    });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    matches += idx == sorted_support(hard, r);
  }
  return static_cast<double>(matches) / static_cast<double>(trials);
}

/// Per-position selection frequency of the hard subset under all-equal scores.
inline std::vector<double> rss_uniform_selection_freq(Index samples, Index len, double rho, const Rng& rng) {
  NoGradGuard guard;
  std::vector<double> freq(static_cast<std::size_t>(len), 0.0);
  const Index chunk = 10000;
  for (Index done = 0, part = 0; done < samples; done += chunk, ++part) {
    const Index rows = std::min(chunk, samples - done);
    const IntMatrix valid = IntMatrix::Ones(rows, len);
    const TensorD y = rss_sampler(TensorD::zeros({rows, len}), valid, rho, 1.0, rng.fork(static_cast<std::uint64_t>(part)));
    const TensorD hard = top_k_hot(y, valid, subset_sizes(valid, rho));
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < len; ++c) freq[static_cast<std::size_t>(c)] += hard.value()[r * len + c];
  }
  for (double& f : freq) f /= static_cast<double>(samples);
  return freq;
}

struct BudgetStats {
  Index rows = 0;
  Index budget_mismatches = 0;
  Index soft_sum_mismatches = 0;
  Index padding_masked = 0;
};

/// Runs the subset sampler and the straight-through masker on random batches
/// (random shapes, lengths, rho and temperature) and audits the hard masks.
inline BudgetStats hard_budget_stats(Index batches, const Rng& rng) {
  NoGradGuard guard;
  BudgetStats st;
  const Index vocab = 12, v_idx = 5, mask_id = 1;
  for (Index b = 0; b < batches; ++b) {
    Rng r = rng.fork(static_cast<std::uint64_t>(b));
    const Index rows = 1 + static_cast<Index>(r.below(6)), cols = 4 + static_cast<Index>(r.below(28));
    IntMatrix valid = IntMatrix::Zero(rows, cols);
    std::vector<Index> ids(static_cast<std::size_t>(rows * cols));
    for (Index i = 0; i < rows; ++i) {
      const Index len = static_cast<Index>(r.below(static_cast<std::uint64_t>(cols - 1)));
      valid.row(i).segment(1, len).setOnes();
    }
    for (auto& id : ids) id = v_idx + static_cast<Index>(r.below(static_cast<std::uint64_t>(vocab - v_idx)));
    const double rho = r.uniform(0.05, 0.45);
    const double t = std::array<double, 3>{0.3, 1.0, 2.0}[r.below(3)];
    const TensorD s = random_tensor({rows, cols}, r, -3, 3, false);
    const TensorD y = rss_sampler(s, valid, rho, t, r.fork(99));
    const auto budget = subset_sizes(valid, rho);
    const TensorD p = straight_through_estimator(top_k_hot(y, valid, budget), y);
    const auto res = straight_through(one_hot<double>(ids, {rows, cols}, vocab), p, std::nullopt, mask_id, v_idx);
    for (Index i = 0; i < rows; ++i) {
      ++st.rows;
      const double soft = y.value().segment(i * cols, cols).sum();
      const auto k = budget[static_cast<std::size_t>(i)];
      st.soft_sum_mismatches += std::abs(soft - static_cast<double>(k)) > 1e-4;
      Index masked = 0;
      for (Index c = 0; c < cols; ++c) {
        masked += res.masked(i, c) && valid(i, c);
        st.padding_masked += res.masked(i, c) && !valid(i, c);
      }
      st.budget_mismatches += masked != k;
    }
  }
  return st;
}

/// Mean |y_soft - khot(y_soft)| per temperature, shared scores and noise.
inline std::vector<double> concrete_gaps(const std::vector<double>& temps, Index rows, const Rng& rng) {
  NoGradGuard guard;
  Rng score_rng = rng.fork(1);
  const Index cols = 12;
  const TensorD s = random_tensor({rows, cols}, score_rng, -2, 2, false);
  const IntMatrix valid = IntMatrix::Ones(rows, cols);
  std::vector<double> out;
  for (double t : temps) {
    const TensorD y = rss_sampler(s, valid, 0.25, t, rng.fork(2));
    const TensorD hard = top_k_hot(y, valid, subset_sizes(valid, 0.25));
    out.push_back((y.value() - hard.value()).abs().mean());
  }
  return out;
}

struct JacobianMismatches {
  Index forward = 0;
  Index overall_grad = 0;
  Index type_grad = 0;
};

/// Compares straight_through against a hand-written oracle: forward rows are
/// the hard samples, and the gradient of sum(w * x_tilde) is
///   d/dp_overall = sum_v w_v (x_masked - x)_v
///   d/dp_type[j] = [masked] * sum_v w_v basis_j(v)
/// with basis_0 = e_mask, basis_1 = x, basis_{2+i} = e_{v_idx + i}.
/// Every comparison is exact (==).
inline JacobianMismatches straight_through_jacobian_mismatches(Index instances, const Rng& rng) {
  JacobianMismatches mm;
  for (Index n = 0; n < instances; ++n) {
    Rng r = rng.fork(static_cast<std::uint64_t>(n));
    const Index rows = 1 + static_cast<Index>(r.below(3)), cols = 2 + static_cast<Index>(r.below(6));
    const Index v_idx = 5, content = 2 + static_cast<Index>(r.below(6)), vocab = v_idx + content, mask_id = 1;
    const Index channels = 2 + content;
    std::vector<Index> ids(static_cast<std::size_t>(rows * cols));
    for (auto& id : ids) id = v_idx + static_cast<Index>(r.below(static_cast<std::uint64_t>(content)));
    const TensorD x = one_hot<double>(ids, {rows, cols}, vocab);
    TensorD p = random_tensor({rows, cols}, r, 0.0, 1.0);
    const bool typed = n % 5 != 0;
    TensorD logits = random_tensor({rows, cols, channels}, r, -2, 2);
    const TensorD pt = softmax(logits, -1);
    const TensorD w = probe_weights({rows, cols, vocab}, r);

    const auto res = straight_through(x, p, typed ? std::optional<TensorD>(pt) : std::nullopt, mask_id, v_idx);
    sum(mul(res.x_tilde, w)).backward();
    // d/d pt flows into the logits through softmax; recover d/d pt by
    // differentiating a second, identical graph rooted at a leaf copy.
    TensorD pt_leaf(pt.shape(), pt.value(), true);
    TensorD p_leaf(p.shape(), p.value(), true);
    const auto res2 = straight_through(x, p_leaf, typed ? std::optional<TensorD>(pt_leaf) : std::nullopt, mask_id, v_idx);
    sum(mul(res2.x_tilde, w)).backward();

    for (Index i = 0; i < rows * cols; ++i) {
      const Index id = ids[static_cast<std::size_t>(i)];
      const bool masked = p.value()[i] > 0.5;
      Index ch = 0;
      if (typed) pt.value().segment(i * channels, channels).maxCoeff(&ch);
      const Index out_id = !masked ? id : !typed || ch == 0 ? mask_id : ch == 1 ? id : v_idx + ch - 2;
      for (Index v = 0; v < vocab; ++v)
        mm.forward += res.x_tilde.value()[i * vocab + v] != (v == out_id ? 1.0 : 0.0);

      const Index masked_id = !typed || ch == 0 ? mask_id : ch == 1 ? id : v_idx + ch - 2;
      const double g_overall = masked_id == id ? 0.0 : w.value()[i * vocab + masked_id] - w.value()[i * vocab + id];
      mm.overall_grad += p_leaf.grad()[i] != g_overall;
      mm.overall_grad += p.grad()[i] != g_overall;
      if (typed) {
        for (Index j = 0; j < channels; ++j) {
          const Index basis = j == 0 ? mask_id : j == 1 ? id : v_idx + j - 2;
          const double g = masked ? w.value()[i * vocab + basis] : 0.0;
          mm.type_grad += pt_leaf.grad()[i * channels + j] != g;
        }
      }
    }
  }
  return mm;
}

}  // namespace advmlm::testing
