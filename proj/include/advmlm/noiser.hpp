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

// The adversarial masker: a GRU scorer whose any-mask and mask-options scores
// drive the budgeted subset sampler and the straight-through masker, plus the
// random-masking floor composed on top of it.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advmlm/corpus.hpp"
#include "advmlm/nn.hpp"
#include "advmlm/ops.hpp"
#include "advmlm/rng.hpp"
#include "advmlm/sampling.hpp"

namespace advmlm {

/// Why a position is (or is not) scored by the MLM loss.
enum class Provenance : std::int32_t {
  kNone = 0,
  kAdvMask,
  kAdvKeep,
  kAdvReplace,
  kRandMask,
  kRandKeep,
  kRandReplace,
};

inline constexpr std::size_t kNumProvenance = 7;

inline constexpr std::array<std::string_view, kNumProvenance> kProvenanceNames = {
    "none", "adv_mask", "adv_keep", "adv_replace", "rand_mask", "rand_keep", "rand_replace"};

inline bool is_adversarial(std::int32_t p) {
  return p >= static_cast<std::int32_t>(Provenance::kAdvMask) && p <= static_cast<std::int32_t>(Provenance::kAdvReplace);
}
inline bool is_random(std::int32_t p) { return p >= static_cast<std::int32_t>(Provenance::kRandMask); }

/// Counts per provenance tag, indexed by Provenance. The kNone slot is unused.
using MaskTypeHistogram = std::array<std::int64_t, kNumProvenance>;

template <class S>
struct NoiseOutcome {
  Tensor<S> x_tilde;          // [B, T, V]
  IntMatrix loss_positions;   // [B, T], 1 where the MLM loss scores the position
  IntMatrix provenance;       // [B, T], Provenance values
  Tensor<S> any_mask_prob;    // [B, T] relaxed subset weights; undefined for random-only noise
};

/// Adds every loss position's tag across `outcomes`.
template <class S>
MaskTypeHistogram mask_type_histogram(const std::vector<NoiseOutcome<S>>& outcomes) {
  MaskTypeHistogram h{};
  for (const auto& o : outcomes)
    for (Index i = 0; i < o.provenance.size(); ++i)
      if (o.loss_positions.data()[i]) ++h[static_cast<std::size_t>(o.provenance.data()[i])];
  return h;
}

inline MaskTypeHistogram histogram_of(const IntMatrix& provenance, const IntMatrix& loss_positions) {
  MaskTypeHistogram h{};
  for (Index i = 0; i < provenance.size(); ++i)
    if (loss_positions.data()[i]) ++h[static_cast<std::size_t>(provenance.data()[i])];
  return h;
}

struct NoiserParams {
  double rho_adv = 0.10;
  double rho_rand = 0.10;
  double temperature = 1.0;
  double epsilon = 1e-18;

  void validate() const {
    require(rho_adv > 0.0 && rho_adv < 1.0, "NoiserParams: rho_adv must lie in (0, 1)");
    require(rho_rand >= 0.0 && rho_rand < 1.0 - rho_adv, "NoiserParams: rho_rand must lie in [0, 1 - rho_adv)");
    require(temperature > 0.0, "NoiserParams: temperature must be positive");
  }
};

/// Sub-stream keys used inside one noising call.
inline constexpr std::uint64_t kStreamSubset = 11;
inline constexpr std::uint64_t kStreamMaskType = 12;
inline constexpr std::uint64_t kStreamRandom = 13;

/// Draws 80/10/10 random masking into `out` at valid, not yet masked
/// positions, each independently with probability `rate`. Positions touched
/// here are tagged kRand*. Returns the hard one-hot row ids they take.
inline IntMatrix draw_random_masks(const IntMatrix& tokens, const IntMatrix& valid, const IntMatrix& already,
                                   double rate, const Vocabulary& vocab, const Rng& rng, IntMatrix& provenance) {
  IntMatrix noised = tokens;
  for (Index r = 0; r < tokens.rows(); ++r) {
    Rng row = rng.fork(static_cast<std::uint64_t>(r));
    for (Index c = 0; c < tokens.cols(); ++c) {
      if (!valid(r, c) || already(r, c)) continue;
      // Three draws per candidate keep the stream layout independent of outcomes.
      const double u_mask = row.uniform();
      const double u_kind = row.uniform();
      const auto replacement =
          static_cast<std::int32_t>(vocab.v_idx() + static_cast<std::int32_t>(row.below(static_cast<std::uint64_t>(vocab.content_size()))));
      if (u_mask >= rate) continue;
      if (u_kind < 0.8) {
        noised(r, c) = vocab.mask_id();
        provenance(r, c) = static_cast<std::int32_t>(Provenance::kRandMask);
      } else if (u_kind < 0.9) {
        provenance(r, c) = static_cast<std::int32_t>(Provenance::kRandKeep);
      } else {
        noised(r, c) = replacement;
        provenance(r, c) = static_cast<std::int32_t>(Provenance::kRandReplace);
      }
    }
  }
  return noised;
}

/// The sequence scorer. Emits per position one any-mask score followed by
/// 2 + C mask-options scores ([MASK], keep-original, one per content token).
template <class S>
class Noiser {
 public:
  Noiser() = default;
  Noiser(const GruConfig& cfg, const Vocabulary& vocab, Rng& rng)
      : vocab_size_(vocab.size()),
        content_size_(vocab.content_size()),
        token_table_(uniform_parameter<S>({vocab.size(), cfg.embed_dim}, vocab.size(), rng)),
        gru_(cfg, rng),
        score_head_(cfg.output_dim(), 3 + vocab.content_size(), rng) {}

  Index score_channels() const { return 3 + content_size_; }
  Index mask_option_channels() const { return 2 + content_size_; }
  const Gru<S>& gru() const { return gru_; }
  const Linear<S>& score_head() const { return score_head_; }

  /// ids[B, T], valid[B, T] -> s[B, T, 3 + C]
  Tensor<S> scores(const IntMatrix& ids, const IntMatrix& valid) const {
    return score_head_(gru_(embed_ids(ids, token_table_), valid));
  }

  ParameterList<S> parameters() const {
    ParameterList<S> out;
    out.push_back({"noiser.token_table", token_table_});
    gru_.collect("noiser.gru", out);
    score_head_.collect("noiser.score_head", out);
    return out;
  }

 private:
  Index vocab_size_ = 0;
  Index content_size_ = 0;
  Tensor<S> token_table_;
  Gru<S> gru_;
  Linear<S> score_head_;
};

/// Full noising pass given precomputed scores s[B, T, 3 + C].
///
///   y = rss_sampler(s[..., 0], valid, rho_adv, t)
///   p_overall = st(top_k_hot(y), y)
///   p_type = gumbel_softmax(s[..., 1:], t)
///   x_tilde = straight_through(one_hot(x), p_overall, p_type)
///
/// followed by the random floor: each remaining valid position is masked with
/// probability rho_rand / (1 - rho_adv) using the 80/10/10 rule.
template <class S>
NoiseOutcome<S> noise_from_scores(const Tensor<S>& s, const IntMatrix& tokens, const IntMatrix& valid,
                                  const NoiserParams& params, const Vocabulary& vocab, const Rng& rng) {
  params.validate();
  const Index rows = tokens.rows(), cols = tokens.cols(), content = vocab.content_size();
  require(s.shape() == Shape({rows, cols, 3 + content}), "run_noiser: score tensor " + shape_str(s.shape()) +
                                                             " does not match batch and vocabulary");
  const Tensor<S> any_scores = reshape(narrow(s, -1, 0, 1), {rows, cols});
  const Tensor<S> y = rss_sampler(any_scores, valid, params.rho_adv, params.temperature, rng.fork(kStreamSubset),
                                  params.epsilon);
  const Tensor<S> hard = top_k_hot(y, valid, subset_sizes(valid, params.rho_adv));
  const Tensor<S> p_overall = straight_through_estimator(hard, y);
  const Tensor<S> p_type = gumbel_softmax(narrow(s, -1, 1, 2 + content), params.temperature, rng.fork(kStreamMaskType));
  const Tensor<S> x = one_hot<S>(flatten_ids(tokens), {rows, cols}, vocab.size());
  StraightThroughResult<S> st = straight_through(x, p_overall, std::optional<Tensor<S>>(p_type), vocab.mask_id(), vocab.v_idx());

  NoiseOutcome<S> out;
  out.any_mask_prob = y;
  out.provenance = IntMatrix::Zero(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      if (!st.masked(r, c)) continue;
      switch (static_cast<MaskKind>(st.kind(r, c))) {
        case MaskKind::kMask:
          out.provenance(r, c) = static_cast<std::int32_t>(Provenance::kAdvMask);
          break;
        case MaskKind::kKeep:
          out.provenance(r, c) = static_cast<std::int32_t>(Provenance::kAdvKeep);
          break;
        default:
          out.provenance(r, c) = static_cast<std::int32_t>(Provenance::kAdvReplace);
          break;
      }
    }
  }

  if (params.rho_rand > 0.0) {
    const double rate = params.rho_rand / (1.0 - params.rho_adv);
    const IntMatrix before = out.provenance;
    const IntMatrix noised = draw_random_masks(tokens, valid, st.masked, rate, vocab, rng.fork(kStreamRandom), out.provenance);
    typename Tensor<S>::Array keep_adv(rows * cols);
    std::vector<Index> rand_ids;
    bool any = false;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) {
        const bool rnd = out.provenance(r, c) != before(r, c);
        any = any || rnd;
        keep_adv[r * cols + c] = rnd ? S(0) : S(1);
      }
    if (any) {
      const Tensor<S> keep = Tensor<S>({rows, cols, 1}, keep_adv);
      const Tensor<S> rand_rows = mul(one_hot<S>(flatten_ids(noised), {rows, cols}, vocab.size()), S(1) - keep);
      out.x_tilde = add(mul(st.x_tilde, keep), rand_rows);
    } else {
      out.x_tilde = st.x_tilde;
    }
  } else {
    out.x_tilde = st.x_tilde;
  }
  out.loss_positions = (out.provenance != 0).template cast<std::int32_t>();
  return out;
}

/// Scores the batch with the noiser and noises it.
template <class S>
NoiseOutcome<S> run_noiser(const Noiser<S>& noiser, const IntMatrix& tokens, const IntMatrix& valid,
                           const NoiserParams& params, const Vocabulary& vocab, const Rng& rng) {
  return noise_from_scores(noiser.scores(tokens, valid), tokens, valid, params, vocab, rng);
}

}  // namespace advmlm
