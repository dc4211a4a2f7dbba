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

// Masked-language-model objective: random masking, reconstruction loss and
// the encoder pass over a noised batch.

#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "advmlm/corpus.hpp"
#include "advmlm/nn.hpp"
#include "advmlm/noiser.hpp"
#include "advmlm/ops.hpp"

namespace advmlm {

/// Classical random masking: every valid position is masked with probability
/// `rate`; masked positions split 80/10/10 into [MASK] / keep / replacement by
/// a uniformly drawn content token.
template <class S>
NoiseOutcome<S> random_mask(const IntMatrix& tokens, const IntMatrix& valid, double rate, const Vocabulary& vocab,
                            const Rng& rng) {
  require(rate > 0.0 && rate < 1.0, "random_mask: rate must lie in (0, 1)");
  NoiseOutcome<S> out;
  out.provenance = IntMatrix::Zero(tokens.rows(), tokens.cols());
  const IntMatrix none = IntMatrix::Zero(tokens.rows(), tokens.cols());
  const IntMatrix noised = draw_random_masks(tokens, valid, none, rate, vocab, rng.fork(kStreamRandom), out.provenance);
  out.x_tilde = one_hot<S>(flatten_ids(noised), {tokens.rows(), tokens.cols()}, vocab.size());
  out.loss_positions = (out.provenance != 0).template cast<std::int32_t>();
  return out;
}

template <class S>
struct LossReport {
  Tensor<S> total_loss;        // scalar; mean NLL over loss positions
  Tensor<S> per_position_nll;  // [B, T]; zero off the loss positions
  double masked_accuracy = 0.0;
  Index scored_count = 0;
  bool degenerate = false;     // no position was scored
  // Diagnostics split by who chose the position. NaN when the group is empty.
  double adv_loss = std::numeric_limits<double>::quiet_NaN();
  double rand_loss = std::numeric_limits<double>::quiet_NaN();
  Index adv_count = 0;
  Index rand_count = 0;
  MaskTypeHistogram histogram{};
};

/// Cross-entropy against the original tokens at loss positions only.
template <class S>
LossReport<S> mlm_loss(const Tensor<S>& logits, const IntMatrix& tokens, const IntMatrix& loss_positions,
                       const IntMatrix& provenance) {
  const Index rows = tokens.rows(), cols = tokens.cols();
  require(logits.rank() == 3 && logits.dim(0) == rows && logits.dim(1) == cols, "mlm_loss: logits/batch mismatch");
  const Index vocab = logits.dim(2);
  std::vector<Index> targets(static_cast<std::size_t>(rows * cols), -1);
  LossReport<S> rep;
  for (Index i = 0; i < rows * cols; ++i) {
    if (loss_positions.data()[i]) {
      targets[static_cast<std::size_t>(i)] = tokens.data()[i];
      ++rep.scored_count;
    }
  }
  rep.per_position_nll = cross_entropy(logits, targets);
  rep.histogram = histogram_of(provenance, loss_positions);
  if (rep.scored_count == 0) {
    rep.degenerate = true;
    rep.total_loss = Tensor<S>::scalar(S(0));
    return rep;
  }
  rep.total_loss = mul_scalar(sum(rep.per_position_nll), S(1) / static_cast<S>(rep.scored_count));

  const auto& nll = rep.per_position_nll.value();
  const auto& lv = logits.value();
  Index correct = 0;
  double adv_sum = 0, rand_sum = 0;
  for (Index i = 0; i < rows * cols; ++i) {
    if (!loss_positions.data()[i]) continue;
    Index best = 0;
    lv.segment(i * vocab, vocab).maxCoeff(&best);
    if (best == tokens.data()[i]) ++correct;
    const std::int32_t p = provenance.data()[i];
    if (is_adversarial(p)) {
      adv_sum += static_cast<double>(nll[i]);
      ++rep.adv_count;
    } else if (is_random(p)) {
      rand_sum += static_cast<double>(nll[i]);
      ++rep.rand_count;
    }
  }
  rep.masked_accuracy = static_cast<double>(correct) / static_cast<double>(rep.scored_count);
  if (rep.adv_count) rep.adv_loss = adv_sum / static_cast<double>(rep.adv_count);
  if (rep.rand_count) rep.rand_loss = rand_sum / static_cast<double>(rep.rand_count);
  return rep;
}

enum class MaskingMode {
  kAdversarial,  // adversarial noiser plus the random floor
  kRandomOnly,   // classical random masking, noiser unused
  kProvided,     // caller supplies the NoiseOutcome
};

template <class S>
struct EncoderRun {
  MaskingMode mode = MaskingMode::kAdversarial;
  NoiserParams noiser_params;
  double random_rate = 0.20;               // kRandomOnly
  const NoiseOutcome<S>* provided = nullptr;  // kProvided
  bool noiser_grad = true;                 // record the graph through the noiser
  Rng* dropout_rng = nullptr;              // encoder dropout; null disables it
};

template <class S>
struct EncoderResult {
  LossReport<S> report;
  NoiseOutcome<S> outcome;
};

/// Noises the batch, runs the encoder on x_tilde and scores reconstruction of
/// the original tokens.
template <class S>
EncoderResult<S> run_encoder(const Noiser<S>* noiser, const TransformerEncoder<S>& encoder, const Batch& batch,
                             const Vocabulary& vocab, const EncoderRun<S>& run, const Rng& rng) {
  EncoderResult<S> res;
  switch (run.mode) {
    case MaskingMode::kAdversarial: {
      require(noiser != nullptr, "run_encoder: adversarial masking needs a noiser");
      if (run.noiser_grad) {
        res.outcome = run_noiser(*noiser, batch.tokens, batch.valid, run.noiser_params, vocab, rng);
      } else {
        NoGradGuard guard;
        res.outcome = run_noiser(*noiser, batch.tokens, batch.valid, run.noiser_params, vocab, rng);
      }
      break;
    }
    case MaskingMode::kRandomOnly:
      res.outcome = random_mask<S>(batch.tokens, batch.valid, run.random_rate, vocab, rng);
      break;
    case MaskingMode::kProvided:
      require(run.provided != nullptr, "run_encoder: provided mode needs an outcome");
      res.outcome = *run.provided;
      break;
  }
  const Tensor<S> logits = encoder.logits(res.outcome.x_tilde, batch.valid, run.dropout_rng);
  res.report = mlm_loss(logits, batch.tokens, res.outcome.loss_positions, res.outcome.provenance);
  return res;
}

}  // namespace advmlm
