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

#include <cmath>
#include <vector>

#include "advmlm/mlm.hpp"
#include "advmlm/noiser.hpp"
#include "support/gradcheck.hpp"
#include "support/op_catalog.hpp"

using namespace advmlm;
using advmlm::testing::random_tensor;
using advmlm::testing::TensorD;

namespace {

Batch random_batch(const Vocabulary& vocab, Index rows, Index min_len, Index max_len, Index width, Rng& rng) {
  std::vector<TokenSequence> seqs;
  for (Index r = 0; r < rows; ++r) {
    const Index len = min_len + static_cast<Index>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
    TokenSequence s;
    for (Index i = 0; i < len; ++i)
      s.push_back(vocab.v_idx() + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab.content_size()))));
    seqs.push_back(s);
  }
  return make_batch(seqs, width);
}

GruConfig tiny_gru() { return GruConfig{1, 6, 5, true}; }

}  // namespace

TEST_CASE("forced scores select exactly the forced positions") {
  const Vocabulary vocab("ACDEFG");
  Rng rng(1);
  const Batch batch = random_batch(vocab, 1, 10, 10, 12, rng);
  const Index content = vocab.content_size();
  TensorD s = TensorD::full({1, 12, 3 + content}, 0.0);
  for (Index c = 0; c < 12; ++c) s.mutable_value()[c * (3 + content)] = -1e9;
  for (Index c : {2, 5, 9}) s.mutable_value()[c * (3 + content)] = 1e3;
  NoiserParams params;
  params.rho_adv = 0.3;
  params.rho_rand = 0.0;
  const auto out = noise_from_scores(s, batch.tokens, batch.valid, params, vocab, Rng(2));
  for (Index c = 0; c < 12; ++c) CHECK(out.loss_positions(0, c) == (c == 2 || c == 5 || c == 9 ? 1 : 0));
}

TEST_CASE("adversarial share is about 10% of valid tokens and the total about 20%") {
  const Vocabulary vocab;
  Rng rng(3);
  Noiser<float> noiser(GruConfig{1, 8, 8, true}, vocab, rng);
  Index valid = 0, adv = 0, rand = 0;
  for (int b = 0; b < 40; ++b) {
    const Batch batch = random_batch(vocab, 16, 20, 60, 64, rng);
    NoGradGuard guard;
    const auto out = run_noiser(noiser, batch.tokens, batch.valid, NoiserParams{}, vocab, Rng(100 + b));
    valid += batch.valid_count();
    for (Index i = 0; i < out.provenance.size(); ++i) {
      adv += is_adversarial(out.provenance.data()[i]);
      rand += is_random(out.provenance.data()[i]);
    }
    // Adversary and random floor never touch framing or padding.
    CHECK(((out.loss_positions.array() != 0) <= (batch.valid.array() != 0)).all());
    const auto budget = subset_sizes(batch.valid, 0.1);
    for (Index r = 0; r < batch.rows(); ++r) {
      Index row_adv = 0;
      for (Index c = 0; c < batch.cols(); ++c) row_adv += is_adversarial(out.provenance(r, c));
      CHECK(row_adv == budget[static_cast<std::size_t>(r)]);
    }
  }
  const double adv_frac = static_cast<double>(adv) / static_cast<double>(valid);
  const double total_frac = static_cast<double>(adv + rand) / static_cast<double>(valid);
  INFO("adversarial " << adv_frac << " total " << total_frac);
  CHECK(std::abs(adv_frac - 0.10) <= 0.01);
  CHECK(std::abs(total_frac - 0.20) <= 0.01);
}

TEST_CASE("noising is deterministic") {
  const Vocabulary vocab;
  Rng rng(4);
  Noiser<float> noiser(tiny_gru(), vocab, rng);
  const Batch batch = random_batch(vocab, 4, 8, 20, 22, rng);
  const auto a = run_noiser(noiser, batch.tokens, batch.valid, NoiserParams{}, vocab, Rng(9));
  const auto b = run_noiser(noiser, batch.tokens, batch.valid, NoiserParams{}, vocab, Rng(9));
  CHECK((a.x_tilde.value() == b.x_tilde.value()).all());
  CHECK((a.provenance == b.provenance).all());
  CHECK((a.any_mask_prob.value() == b.any_mask_prob.value()).all());
}

TEST_CASE("x_tilde rows are exact one-hots matching the provenance") {
  const Vocabulary vocab;
  Rng rng(5);
  Noiser<double> noiser(tiny_gru(), vocab, rng);
  const Batch batch = random_batch(vocab, 6, 10, 30, 32, rng);
  const auto out = run_noiser(noiser, batch.tokens, batch.valid, NoiserParams{0.2, 0.2, 1.0, 1e-18}, vocab, Rng(6));
  const Index v = vocab.size();
  for (Index r = 0; r < batch.rows(); ++r)
    for (Index c = 0; c < batch.cols(); ++c) {
      const auto row = out.x_tilde.value().segment((r * batch.cols() + c) * v, v);
      CHECK(row.sum() == 1.0);
      CHECK(row.maxCoeff() == 1.0);
      Index id = 0;
      row.maxCoeff(&id);
      const auto p = static_cast<Provenance>(out.provenance(r, c));
      if (p == Provenance::kAdvMask || p == Provenance::kRandMask) CHECK(id == vocab.mask_id());
      if (p == Provenance::kNone || p == Provenance::kAdvKeep || p == Provenance::kRandKeep)
        CHECK(id == batch.tokens(r, c));
      if (p == Provenance::kAdvReplace || p == Provenance::kRandReplace) CHECK(vocab.is_content(static_cast<std::int32_t>(id)));
    }
}

TEST_CASE("mask-type histogram") {
  NoiseOutcome<float> o;
  o.provenance = IntMatrix::Zero(1, 6);
  o.provenance(0, 1) = o.provenance(0, 3) = o.provenance(0, 4) = static_cast<std::int32_t>(Provenance::kAdvMask);
  o.loss_positions = (o.provenance.array() != 0).cast<std::int32_t>();
  const auto h = mask_type_histogram<float>({o});
  CHECK(h[static_cast<std::size_t>(Provenance::kAdvMask)] == 3);
  std::int64_t total = 0;
  for (std::size_t i = 1; i < h.size(); ++i) total += h[i];
  CHECK(total == 3);

  const Vocabulary vocab;
  Rng rng(7);
  std::vector<NoiseOutcome<float>> outs;
  Index positions = 0;
  while (positions < 500000) {
    const Batch batch = random_batch(vocab, 32, 40, 60, 62, rng);
    outs.push_back(random_mask<float>(batch.tokens, batch.valid, 0.2, vocab, rng.fork(static_cast<std::uint64_t>(positions))));
    positions += batch.valid_count();
  }
  const auto hist = mask_type_histogram(outs);
  const double n = static_cast<double>(hist[4] + hist[5] + hist[6]);
  CHECK(hist[1] + hist[2] + hist[3] == 0);
  CHECK(n >= 1e5);
  CHECK(std::abs(hist[4] / n - 0.8) <= 0.01);
  CHECK(std::abs(hist[5] / n - 0.1) <= 0.01);
  CHECK(std::abs(hist[6] / n - 0.1) <= 0.01);
  std::int64_t scored = 0;
  for (const auto& o2 : outs) scored += o2.loss_positions.sum();
  CHECK(static_cast<std::int64_t>(n) == scored);
}

TEST_CASE("gradient reaches theta through both sampler paths") {
  const Vocabulary vocab;
  Rng rng(8);
  Noiser<double> noiser(GruConfig{1, 6, 5, true}, vocab, rng);
  TransformerConfig tcfg = advmlm::testing::tiny_transformer();
  tcfg.max_seq_len = 14;
  TransformerEncoder<double> encoder(tcfg, vocab.size(), rng);
  const Batch batch = random_batch(vocab, 2, 12, 12, 14, rng);
  NoiserParams params{0.25, 0.1, 1.0, 1e-18};
  const Rng stream(21);
  EncoderRun<double> run;
  run.noiser_params = params;

  auto theta = noiser.parameters();
  auto phi = encoder.parameters();
  set_requires_grad(phi, false);
  zero_grad(theta);
  const auto base = run_encoder(&noiser, encoder, batch, vocab, run, stream);
  REQUIRE_FALSE(base.report.degenerate);
  base.report.total_loss.backward();

  double grad_norm = 0;
  for (auto& p : theta) {
    REQUIRE(p.tensor.has_grad());
    CHECK(p.tensor.grad().isFinite().all());
    grad_norm += p.tensor.grad().square().sum();
  }
  CHECK(grad_norm > 0);
  // Both channels of the score head carry gradient.
  const auto& head_w = noiser.score_head().weight;
  double any_col = 0, type_cols = 0;
  for (Index i = 0; i < head_w.dim(0); ++i) {
    any_col += std::abs(head_w.grad()[i * head_w.dim(1)]);
    for (Index j = 1; j < head_w.dim(1); ++j) type_cols += std::abs(head_w.grad()[i * head_w.dim(1) + j]);
  }
  CHECK(any_col > 0);
  CHECK(type_cols > 0);

  // dL/dx_tilde at the base point.
  TensorD x_leaf(base.outcome.x_tilde.shape(), base.outcome.x_tilde.value(), true);
  mlm_loss(encoder.logits(x_leaf, batch.valid), batch.tokens, base.outcome.loss_positions, base.outcome.provenance)
      .total_loss.backward();
  const TensorD g_x(x_leaf.shape(), x_leaf.grad());

  // The loss is piecewise constant in theta, so finite differences act on the
  // straight-through surrogate with every hard decision frozen:
  //   f = sum g_x * adv * (p ⊙ (x_masked_hard - x) + any_hard ⊙ (e_mask pt0 + x pt1 + pad(pt[2:])))
  const Index rows = batch.rows(), cols = batch.cols(), v = vocab.size(), content = vocab.content_size();
  const TensorD x = one_hot<double>(flatten_ids(batch.tokens), {rows, cols}, v);
  TensorD::Array delta(rows * cols * v), any_hard(rows * cols), adv_keep(rows * cols);
  for (Index i = 0; i < rows * cols; ++i) {
    const std::int32_t p = base.outcome.provenance.data()[i];
    adv_keep[i] = is_random(p) ? 0.0 : 1.0;
    any_hard[i] = is_adversarial(p) ? 1.0 : 0.0;
  }
  {
    NoGradGuard guard;
    const auto scores = noiser.scores(batch.tokens, batch.valid);
    const auto y = rss_sampler(reshape(narrow(scores, -1, 0, 1), {rows, cols}), batch.valid, params.rho_adv,
                               params.temperature, stream.fork(kStreamSubset));
    const auto p_overall = straight_through_estimator(top_k_hot(y, batch.valid, subset_sizes(batch.valid, params.rho_adv)), y);
    const auto pt = gumbel_softmax(narrow(scores, -1, 1, 2 + content), params.temperature, stream.fork(kStreamMaskType));
    const auto all_masked = straight_through(x, TensorD::ones({rows, cols}), std::optional<TensorD>(pt), vocab.mask_id(), vocab.v_idx());
    delta = all_masked.x_tilde.value() - x.value();
  }
  const TensorD delta_t({rows, cols, v}, delta), any_t({rows, cols, 1}, any_hard), keep_t({rows, cols, 1}, adv_keep);
  const TensorD mask_row = one_hot<double>({vocab.mask_id()}, {}, v);
  auto surrogate = [&] {
    const auto scores = noiser.scores(batch.tokens, batch.valid);
    const auto y = rss_sampler(reshape(narrow(scores, -1, 0, 1), {rows, cols}), batch.valid, params.rho_adv,
                               params.temperature, stream.fork(kStreamSubset));
    const auto pt = gumbel_softmax(narrow(scores, -1, 1, 2 + content), params.temperature, stream.fork(kStreamMaskType));
    const auto lin = add(add(mul(mask_row, narrow(pt, -1, 0, 1)), mul(x, narrow(pt, -1, 1, 1))),
                         concat<double>({TensorD::zeros({rows, cols, vocab.v_idx()}), narrow(pt, -1, 2, content)}, -1));
    const auto xt = add(mul(reshape(y, {rows, cols, 1}), delta_t), mul(any_t, lin));
    return sum(mul(mul(xt, keep_t), g_x));
  };

  // Five coordinates spread across the noiser parameters.
  NoGradGuard guard;
  int checked = 0;
  double worst = 0;
  for (std::size_t k = 0; k < theta.size() && checked < 5; k += std::max<std::size_t>(1, theta.size() / 5)) {
    auto& t = theta[k].tensor;
    Index j = 0;
    t.grad().abs().maxCoeff(&j);
    const double orig = t.value()[j], eps = 1e-5;
    t.mutable_value()[j] = orig + eps;
    const double up = surrogate().item();
    t.mutable_value()[j] = orig - eps;
    const double down = surrogate().item();
    t.mutable_value()[j] = orig;
    const double numeric = (up - down) / (2 * eps);
    INFO(theta[k].name << "[" << j << "] autodiff " << t.grad()[j] << " numeric " << numeric);
    worst = std::max(worst, advmlm::testing::rel_error(t.grad()[j], numeric, 1e-6));
    ++checked;
  }
  CHECK(checked == 5);
  CHECK(worst <= 1e-2);
}
