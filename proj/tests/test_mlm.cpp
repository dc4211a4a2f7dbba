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
#include "support/gradcheck.hpp"
#include "support/op_catalog.hpp"

using namespace advmlm;
using advmlm::testing::random_tensor;
using advmlm::testing::TensorD;

namespace {

Batch uniform_batch(const Vocabulary& vocab, Index rows, Index len, Rng& rng) {
  std::vector<TokenSequence> seqs;
  for (Index r = 0; r < rows; ++r) {
    TokenSequence s;
    for (Index i = 0; i < len; ++i)
      s.push_back(vocab.v_idx() + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab.content_size()))));
    seqs.push_back(s);
  }
  return make_batch(seqs, len + 2);
}

}  // namespace

TEST_CASE("random masking rate and split") {
  const Vocabulary vocab;
  Rng rng(1);
  const Batch batch = uniform_batch(vocab, 1000, 100, rng);
  const auto out = random_mask<float>(batch.tokens, batch.valid, 0.2, vocab, Rng(2));
  const double frac = static_cast<double>(out.loss_positions.sum()) / static_cast<double>(batch.valid_count());
  CHECK(std::abs(frac - 0.2) <= 0.005);
  const auto h = histogram_of(out.provenance, out.loss_positions);
  const double n = static_cast<double>(out.loss_positions.sum());
  CHECK(std::abs(h[4] / n - 0.8) <= 0.01);
  CHECK(std::abs(h[5] / n - 0.1) <= 0.01);
  CHECK(std::abs(h[6] / n - 0.1) <= 0.01);
  CHECK(((out.loss_positions.array() != 0) <= (batch.valid.array() != 0)).all());

  const Batch small = uniform_batch(vocab, 10, 100, rng);
  CHECK(random_mask<float>(small.tokens, small.valid, 1e-9, vocab, Rng(3)).loss_positions.sum() == 0);
  CHECK_THROWS_AS(random_mask<float>(small.tokens, small.valid, 0.0, vocab, Rng(3)), ContractViolation);
}

TEST_CASE("replacement draws only content tokens") {
  const Vocabulary vocab;
  Rng rng(4);
  const Batch batch = uniform_batch(vocab, 200, 50, rng);
  const auto out = random_mask<float>(batch.tokens, batch.valid, 0.5, vocab, Rng(5));
  const Index v = vocab.size();
  for (Index i = 0; i < out.provenance.size(); ++i) {
    if (out.provenance.data()[i] != static_cast<std::int32_t>(Provenance::kRandReplace)) continue;
    Index id = 0;
    out.x_tilde.value().segment(i * v, v).maxCoeff(&id);
    CHECK(vocab.is_content(static_cast<std::int32_t>(id)));
  }
}

TEST_CASE("perfect logits give near-zero loss") {
  const Vocabulary vocab;
  Rng rng(6);
  const Batch batch = uniform_batch(vocab, 3, 10, rng);
  const auto outcome = random_mask<double>(batch.tokens, batch.valid, 0.5, vocab, Rng(7));
  TensorD logits = one_hot<double>(flatten_ids(batch.tokens), {3, 12}, vocab.size());
  logits = mul_scalar(logits, 100.0);
  const auto rep = mlm_loss(logits, batch.tokens, outcome.loss_positions, outcome.provenance);
  CHECK(rep.total_loss.item() < 1e-5);
  CHECK(rep.masked_accuracy == 1.0);
}

TEST_CASE("loss ignores logits outside loss positions") {
  const Vocabulary vocab;
  Rng rng(8);
  const Batch batch = uniform_batch(vocab, 4, 16, rng);
  const auto outcome = random_mask<double>(batch.tokens, batch.valid, 0.3, vocab, Rng(9));
  TensorD logits = random_tensor({4, 18, vocab.size()}, rng, -3, 3, false);
  const auto a = mlm_loss(logits, batch.tokens, outcome.loss_positions, outcome.provenance);
  for (Index i = 0; i < 4 * 18; ++i)
    if (!outcome.loss_positions.data()[i])
      for (Index v = 0; v < vocab.size(); ++v) logits.mutable_value()[i * vocab.size() + v] = rng.uniform(-50, 50);
  const auto b = mlm_loss(logits, batch.tokens, outcome.loss_positions, outcome.provenance);
  CHECK(a.total_loss.item() == b.total_loss.item());

  // Mean over scored positions.
  double total = 0;
  for (Index i = 0; i < 4 * 18; ++i)
    if (outcome.loss_positions.data()[i]) total += a.per_position_nll.value()[i];
  CHECK(a.total_loss.item() == doctest::Approx(total / static_cast<double>(a.scored_count)));
}

TEST_CASE("degenerate batch") {
  const Vocabulary vocab;
  Rng rng(10);
  const Batch batch = uniform_batch(vocab, 2, 5, rng);
  NoiseOutcome<double> none;
  none.x_tilde = one_hot<double>(flatten_ids(batch.tokens), {2, 7}, vocab.size());
  none.loss_positions = IntMatrix::Zero(2, 7);
  none.provenance = IntMatrix::Zero(2, 7);
  TransformerConfig cfg = advmlm::testing::tiny_transformer();
  TransformerEncoder<double> enc(cfg, vocab.size(), rng);
  EncoderRun<double> run;
  run.mode = MaskingMode::kProvided;
  run.provided = &none;
  const auto res = run_encoder<double>(nullptr, enc, batch, vocab, run, Rng(0));
  CHECK(res.report.degenerate);
  CHECK(res.report.scored_count == 0);
  CHECK(res.report.total_loss.item() == 0.0);
}

TEST_CASE("random logits: non-negative loss and chance accuracy") {
  const Vocabulary vocab;
  Rng rng(11);
  const Batch batch = uniform_batch(vocab, 100, 100, rng);
  IntMatrix all = batch.valid;
  const auto rep = mlm_loss(random_tensor({100, 102, vocab.size()}, rng, -1, 1, false), batch.tokens, all,
                            IntMatrix::Zero(100, 102));
  CHECK(rep.scored_count == 10000);
  CHECK((rep.per_position_nll.value() >= 0).all());
  CHECK(std::abs(rep.masked_accuracy - 1.0 / vocab.content_size()) <= 0.02);
}

TEST_CASE("loss gradient in phi passes finite differences") {
  for (const auto& c : advmlm::testing::composite_cases()) {
    if (c.name != "run_encoder_loss") continue;
    Rng rng(12);
    const auto res = c.run(rng);
    CHECK(res.max_rel_error <= 1e-3);
    CHECK(res.checked > 0);
  }
}

TEST_CASE("constant noiser scores mask like uniform budgeted random masking") {
  const Vocabulary vocab;
  Rng rng(13);
  Noiser<float> noiser(GruConfig{1, 8, 8, true}, vocab, rng);
  auto params = noiser.parameters();
  for (auto& p : params)
    if (p.name == "noiser.score_head.weight") p.tensor.mutable_value().setZero();
  const Index len = 20, rows = 500;
  std::vector<double> freq(static_cast<std::size_t>(len), 0.0);
  const int batches = 20;
  for (int b = 0; b < batches; ++b) {
    const Batch batch = uniform_batch(vocab, rows, len, rng);
    NoGradGuard guard;
    const auto out = run_noiser(noiser, batch.tokens, batch.valid, NoiserParams{0.1, 0.1, 1.0, 1e-18}, vocab,
                                Rng(static_cast<std::uint64_t>(b)));
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < len; ++c) freq[static_cast<std::size_t>(c)] += is_adversarial(out.provenance(r, c + 1));
  }
  // Budget round(20 * 0.1) = 2 of 20 positions.
  for (double f : freq) CHECK(std::abs(f / (rows * batches) - 0.1) <= 0.02);
}
