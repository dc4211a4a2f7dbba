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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "advmlm/sampling.hpp"
#include "support/gradcheck.hpp"
#include "support/sampling_oracles.hpp"

using namespace advmlm;
using advmlm::testing::random_tensor;
using advmlm::testing::TensorD;

TEST_CASE("gumbel noise moments") {
  const TensorD g = gumbel_noise<double>({1000, 1000}, Rng(1));
  CHECK(g.value().isFinite().all());
  const double mean = g.value().mean();
  const double var = (g.value() - mean).square().mean();
  CHECK(std::abs(mean - 0.5772156649) <= 0.01);
  CHECK(std::abs(var - M_PI * M_PI / 6) <= 0.02);
}

TEST_CASE("gumbel-softmax argmax follows the categorical") {
  const TensorD scores({4}, {0.3, -1.0, 1.2, 0.0});
  const double tv = advmlm::testing::gumbel_softmax_argmax_tv(scores, 100000, Rng(2));
  INFO("total variation " << tv);
  CHECK(tv <= 0.02);

  const TensorD y = gumbel_softmax(TensorD({1000, 4}, TensorD::Array::Zero(4000)), 1.0, Rng(3));
  for (Index r = 0; r < 1000; ++r) {
    const auto row = y.value().segment(r * 4, 4);
    CHECK(std::abs(row.sum() - 1) <= 1e-5);
    CHECK((row >= 0).all());
  }
}

namespace {

const std::vector<double> kSharpScores{0.3, -1.0, 1.2, 0.0};

double sharp_fraction(double temperature, Index n) {
  const TensorD y = gumbel_softmax(advmlm::testing::tile_rows(kSharpScores, n), temperature, Rng(4));
  Index sharp = 0;
  for (Index r = 0; r < n; ++r) sharp += y.value().segment(r * 4, 4).maxCoeff() > 0.99;
  return static_cast<double>(sharp) / static_cast<double>(n);
}

// Same statistic from std::extreme_value_distribution, sharing no code with
// the library sampler.
double sharp_fraction_oracle(double temperature, Index n) {
  std::mt19937_64 gen(2024);
  std::extreme_value_distribution<double> gumbel(0.0, 1.0);
  Index sharp = 0;
  for (Index i = 0; i < n; ++i) {
    double z[4], mx = -1e300;
    for (int j = 0; j < 4; ++j) mx = std::max(mx, z[j] = (kSharpScores[static_cast<std::size_t>(j)] + gumbel(gen)) / temperature);
    double total = 0;
    for (double v : z) total += std::exp(v - mx);
    sharp += 1.0 / total > 0.99;
  }
  return static_cast<double>(sharp) / static_cast<double>(n);
}

}  // namespace

TEST_CASE("gumbel-softmax sharpness agrees with an independent sampler") {
  for (double t : {0.01, 0.001}) {
    const double ours = sharp_fraction(t, 100000), oracle = sharp_fraction_oracle(t, 100000);
    INFO("t=" << t << " ours " << ours << " oracle " << oracle);
    CHECK(std::abs(ours - oracle) <= 0.003);
  }
  CHECK(sharp_fraction(0.001, 100000) >= 0.99);
}

// At t = 0.01 the fraction is about 0.97 for this score vector by the
// independent oracle above: a sample misses 0.99 whenever the top two
// perturbed scores are within t*ln(99) of each other. Reported, not enforced.
TEST_CASE("gumbel-softmax at t=0.01 has max entry above 0.99 in 99% of samples" * doctest::may_fail()) {
  const double frac = sharp_fraction(0.01, 10000);
  INFO("fraction " << frac);
  CHECK(frac >= 0.99);
}

TEST_CASE("gumbel-softmax with equal scores is uniform (chi-square)") {
  const double chi2 = advmlm::testing::gumbel_softmax_uniform_chi2(4, 100000, Rng(5));
  INFO("chi2 " << chi2);
  CHECK(chi2 < 16.266);  // df = 3, p = 0.001
}

TEST_CASE("rss sampler budgets") {
  CHECK(subset_sizes(IntMatrix::Ones(1, 10), 0.2) == std::vector<Index>{2});
  CHECK(subset_sizes(IntMatrix::Ones(1, 7), 0.2) == std::vector<Index>{1});

  Rng rng(6);
  IntMatrix valid = IntMatrix::Zero(3, 12);
  valid.row(0).segment(1, 10).setOnes();
  valid.row(1).segment(1, 7).setOnes();
  const TensorD s = random_tensor({3, 12}, rng, -2, 2);
  const TensorD y = rss_sampler(s, valid, 0.2, 1.0, Rng(7));
  CHECK((y.value() >= 0).all());
  const std::vector<double> expect{2, 1, 0};
  for (Index r = 0; r < 3; ++r) {
    double total = 0, invalid = 0;
    for (Index c = 0; c < 12; ++c) {
      total += y.at({r, c});
      if (!valid(r, c)) invalid += y.at({r, c});
    }
    CHECK(std::abs(total - expect[static_cast<std::size_t>(r)]) <= 1e-4);
    CHECK(invalid <= 1e-6);
  }
  sum(mul(y, advmlm::testing::probe_weights({3, 12}, rng))).backward();
  CHECK(s.grad().abs().maxCoeff() > 0);
  CHECK(s.grad().isFinite().all());

  CHECK_THROWS_AS(rss_sampler(s, valid, 0.0, 1.0, Rng(1)), ContractViolation);
  CHECK_THROWS_AS(rss_sampler(s, valid, 0.2, 0.0, Rng(1)), ContractViolation);
}

// Close perturbed scores split a round's unit of mass; the log(1 - y)
// penalty then suppresses both and a farther candidate can take the next
// round. Agreement rises toward 1 only as t -> 0 (about 0.86 at t = 0.1,
// 0.97 at t = 0.01). The t = 0.1 figure is reported, not enforced.
TEST_CASE("rss sampler at t=0.1 picks the perturbed top-k in 95% of trials" * doctest::may_fail()) {
  const double rate = advmlm::testing::rss_topk_match_rate(1000, 12, 3, 0.1, Rng(8));
  INFO("match rate " << rate);
  CHECK(rate >= 0.95);
}

TEST_CASE("rss top-k agreement improves as temperature falls") {
  double prev = 0;
  for (double t : {0.1, 0.05, 0.02, 0.01}) {
    const double rate = advmlm::testing::rss_topk_match_rate(1000, 12, 3, t, Rng(8));
    INFO("t=" << t << " rate " << rate);
    CHECK(rate > prev);
    prev = rate;
  }
  CHECK(prev >= 0.95);
}

TEST_CASE("rss sampler with uniform scores selects uniformly") {
  const auto freq = advmlm::testing::rss_uniform_selection_freq(100000, 10, 0.2, Rng(9));
  for (double f : freq) CHECK(std::abs(f - 0.2) <= 0.02);
}

TEST_CASE("hard budget is exact and never touches padding") {
  const auto stats = advmlm::testing::hard_budget_stats(200, Rng(10));
  CHECK(stats.rows > 0);
  CHECK(stats.budget_mismatches == 0);
  CHECK(stats.padding_masked == 0);
}

TEST_CASE("concrete convergence as temperature falls") {
  const std::vector<double> temps{2.0, 1.0, 0.5, 0.1};
  const auto gaps = advmlm::testing::concrete_gaps(temps, 2000, Rng(11));
  for (std::size_t i = 1; i < gaps.size(); ++i) CHECK(gaps[i] < gaps[i - 1]);
}

TEST_CASE("straight-through examples") {
  const Index vocab = 8, v_idx = 5, mask_id = 1, content = vocab - v_idx;
  const TensorD x = one_hot<double>({6, 7}, {1, 2}, vocab);

  SUBCASE("below threshold passes through") {
    const TensorD p({1, 2}, {0.4, 0.5});  // 0.5 is not strictly above
    const auto r = straight_through(x, p, std::nullopt, mask_id, v_idx);
    CHECK((r.x_tilde.value() == x.value()).all());
    CHECK(r.masked.sum() == 0);
  }
  SUBCASE("mask-type argmax picks [MASK]") {
    const TensorD p({1, 2}, {0.9, 0.1});
    TensorD pt = TensorD::zeros({1, 2, 2 + content});
    pt.mutable_value().segment(0, 5) << 0.6, 0.1, 0.1, 0.1, 0.1;
    pt.mutable_value().segment(5, 5) << 0.2, 0.2, 0.2, 0.2, 0.2;
    const auto r = straight_through(x, p, std::optional<TensorD>(pt), mask_id, v_idx);
    for (Index v = 0; v < vocab; ++v) {
      CHECK(r.x_tilde.at({0, 0, v}) == (v == mask_id ? 1.0 : 0.0));
      CHECK(r.x_tilde.at({0, 1, v}) == x.at({0, 1, v}));
    }
    CHECK(r.kind(0, 0) == static_cast<std::int32_t>(MaskKind::kMask));
  }
  SUBCASE("no mask-type: one_hot(mask_id) with unit gradient on the mask channel") {
    TensorD p({1, 2}, {0.9, 0.2}, true);
    const auto r = straight_through(x, p, std::nullopt, mask_id, v_idx);
    for (Index v = 0; v < vocab; ++v) CHECK(r.x_tilde.at({0, 0, v}) == (v == mask_id ? 1.0 : 0.0));
    TensorD w = TensorD::zeros({1, 2, vocab});
    w.mutable_value()[mask_id] = 1.0;
    sum(mul(r.x_tilde, w)).backward();
    CHECK(p.grad()[0] == 1.0);
  }
  SUBCASE("keep-original: row unchanged but recorded as masked") {
    const TensorD p({1, 2}, {0.9, 0.0});
    TensorD pt = TensorD::zeros({1, 2, 2 + content});
    pt.mutable_value().segment(0, 5) << 0.1, 0.7, 0.1, 0.05, 0.05;
    pt.mutable_value().segment(5, 5) << 0.2, 0.2, 0.2, 0.2, 0.2;
    const auto r = straight_through(x, p, std::optional<TensorD>(pt), mask_id, v_idx);
    CHECK((r.x_tilde.value() == x.value()).all());
    CHECK(r.masked(0, 0) == 1);
    CHECK(r.kind(0, 0) == static_cast<std::int32_t>(MaskKind::kKeep));
  }
  SUBCASE("replacement channel maps to a content token") {
    const TensorD p({1, 2}, {0.9, 0.0});
    TensorD pt = TensorD::zeros({1, 2, 2 + content});
    pt.mutable_value().segment(0, 5) << 0.1, 0.1, 0.1, 0.6, 0.1;
    pt.mutable_value().segment(5, 5) << 0.2, 0.2, 0.2, 0.2, 0.2;
    const auto r = straight_through(x, p, std::optional<TensorD>(pt), mask_id, v_idx);
    CHECK(r.replaced_by(0, 0) == v_idx + 1);
    CHECK(r.x_tilde.at({0, 0, v_idx + 1}) == 1.0);
  }
  SUBCASE("mass on control-token channels is rejected") {
    const TensorD p({1, 2}, {0.9, 0.0});
    const TensorD pt = TensorD::full({1, 2, 2 + vocab}, 1.0 / (2 + vocab));
    CHECK_THROWS_AS(straight_through(x, p, std::optional<TensorD>(pt), mask_id, v_idx), ContractViolation);
  }
}

TEST_CASE("straight-through Jacobian equals the soft path exactly") {
  const auto mismatches = advmlm::testing::straight_through_jacobian_mismatches(50, Rng(12));
  CHECK(mismatches.forward == 0);
  CHECK(mismatches.overall_grad == 0);
  CHECK(mismatches.type_grad == 0);
}
