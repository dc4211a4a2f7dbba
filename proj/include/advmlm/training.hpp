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

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advmlm/config.hpp"
#include "advmlm/mlm.hpp"

namespace advmlm {

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay: weights shrink by lr * weight_decay
/// directly, outside the moment estimates.
template <class S>
class AdamW {
 public:
  using Array = typename Tensor<S>::Array;

  AdamW() = default;
  AdamW(const ParameterList<S>& params, AdamWOptions options) : options_(options) {
    for (const auto& p : params) {
      m_.push_back(Array::Zero(p.tensor.size()));
      v_.push_back(Array::Zero(p.tensor.size()));
    }
  }

  const AdamWOptions& options() const { return options_; }
  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) {
    require(t >= 0, "adamw: step count must be non-negative");
    t_ = t;
  }
  std::vector<Array>& first_moments() { return m_; }
  std::vector<Array>& second_moments() { return v_; }
  const std::vector<Array>& first_moments() const { return m_; }
  const std::vector<Array>& second_moments() const { return v_; }

  /// One update from explicit gradients. Every gradient is checked before any
  /// weight moves; a non-finite entry raises NumericFault and leaves the
  /// parameters and moments untouched.
  void apply(ParameterList<S>& params, const std::vector<Array>& grads) {
    require(params.size() == m_.size() && grads.size() == params.size(), "adamw: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(grads[i].size() == params[i].tensor.size() && m_[i].size() == grads[i].size(),
              "adamw: gradient shape mismatch for " + params[i].name);
      if (!grads[i].allFinite()) throw NumericFault("adamw: non-finite gradient for " + params[i].name);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(options_.beta1), b2 = static_cast<S>(options_.beta2);
    const S decay = static_cast<S>(1.0 - options_.lr * options_.weight_decay);
    const S lr = static_cast<S>(options_.lr), eps = static_cast<S>(options_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Array& p = params[i].tensor.mutable_value();
      const Array& g = grads[i];
      if (options_.weight_decay != 0.0) p *= decay;
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
      p -= lr * (m_[i] / static_cast<S>(bc1)) / ((v_[i] / static_cast<S>(bc2)).sqrt() + eps);
    }
  }

  /// Uses each parameter's accumulated gradient, scaled by `sign`; -1 ascends.
  void step(ParameterList<S>& params, S sign = S(1)) {
    std::vector<Array> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(sign * p.tensor.grad_or_zero());
    apply(params, grads);
  }

 private:
  AdamWOptions options_;
  std::int64_t t_ = 0;
  std::vector<Array> m_;
  std::vector<Array> v_;
};

/// Training runs in single precision; the gradient checks use double.
using Real = float;

enum class Phase : std::uint8_t { kNoising = 0, kEncoding = 1 };

std::string_view phase_name(Phase p);

/// RNG stream keys derived from the run seed.
inline constexpr std::uint64_t kStreamInit = 101;
inline constexpr std::uint64_t kStreamCorpus = 102;
inline constexpr std::uint64_t kStreamSplit = 103;
inline constexpr std::uint64_t kStreamEpoch = 104;
inline constexpr std::uint64_t kStreamStep = 105;
inline constexpr std::uint64_t kStreamProbe = 106;

struct TrainState {
  RunConfig config;
  Vocabulary vocab;
  Noiser<Real> noiser;
  TransformerEncoder<Real> encoder;
  AdamW<Real> noiser_opt;
  AdamW<Real> encoder_opt;
  std::int64_t step = 1;  // the loop counter i; the next step to run
  Phase mode = Phase::kNoising;
  // Early-stop bookkeeping.
  double best_probe = std::numeric_limits<double>::infinity();
  std::int64_t stale_probes = 0;
  bool stopped = false;

  ParameterList<Real> theta() const { return noiser.parameters(); }
  ParameterList<Real> phi() const { return encoder.parameters(); }
};

/// Fresh models and optimizers from the config seed. Validates `cfg`
/// without touching the filesystem.
TrainState init_state(const RunConfig& cfg);

struct TrainingData {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> probe;  // held out; empty when probing is off
};

/// Loads or synthesizes the corpus and holds out the probe split. Throws
/// CorpusError when no training sequence remains.
TrainingData prepare_data(const RunConfig& cfg, const Vocabulary& vocab);

/// Frames sequences at width min(max_seq_len, longest + 2).
Batch frame_batch(const std::vector<TokenSequence>& seqs, Index max_seq_len);

/// get_batch(i): sequential epochs over the training split, reshuffled per
/// epoch from the seed. A pure function of (seed, i).
class BatchStream {
 public:
  BatchStream(const std::vector<TokenSequence>& seqs, Index batch_size, Index max_seq_len, std::uint64_t seed);

  Batch get(std::int64_t i);
  std::int64_t batches_per_epoch() const { return per_epoch_; }

 private:
  const std::vector<TokenSequence>* seqs_;
  Index batch_size_;
  Index max_seq_len_;
  Rng rng_;
  std::int64_t per_epoch_;
  std::int64_t cached_epoch_ = -1;
  std::vector<std::size_t> order_;
};

struct StepMetrics {
  std::int64_t step = 0;
  Phase mode = Phase::kNoising;
  bool updated = false;  // false for degenerate batches
  double mlm_loss = 0.0;
  double masked_accuracy = 0.0;
  double adv_loss = std::numeric_limits<double>::quiet_NaN();
  double rand_loss = std::numeric_limits<double>::quiet_NaN();
  Index scored = 0;
  Index adv_count = 0;
  Index rand_count = 0;
  Index valid_tokens = 0;
  MaskTypeHistogram histogram{};
  double temperature = 1.0;
  std::optional<double> probe_loss;
  std::optional<double> wall_time_s;
};

inline constexpr std::string_view kMetricsSchema = "advmlm.metrics/1";

/// One metrics record as a single JSON line without the newline.
std::string to_ndjson(const StepMetrics& m);

/// Masking stream of the step about to run (state.step). A step's masks are
/// a pure function of the seed, the step and, for the adversary, theta.
Rng step_noise_rng(const TrainState& state);

/// Masking settings of the step about to run: the adversary at the annealed
/// temperature, or random masking at baseline_rate for baseline runs.
EncoderRun<Real> step_masking(const TrainState& state);

/// Noiser step: ascends the MLM loss in theta. The encoder weights are left
/// bitwise unchanged.
StepMetrics update_noiser(TrainState& state, const Batch& batch);

/// Encoder step: descends the MLM loss in phi. The noiser samples without
/// recording a graph; theta is left bitwise unchanged.
StepMetrics update_encoder(TrainState& state, const Batch& batch);

/// Random masking rate of the held-out probe.
double probe_rate(const RunConfig& cfg);

std::vector<Batch> probe_batches(const TrainingData& data, const RunConfig& cfg);

/// Mean NLL over the probe's masked positions. Masks are fixed by the seed so
/// successive calls see the same corruption; dropout is off.
double probe_loss(const TrainState& state, const std::vector<Batch>& batches);

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  /// Called after every checkpoint_interval-th step; state.step is the next step.
  std::function<void(const TrainState&)> on_checkpoint;
};

/// The alternating loop. Runs from state.step through config.max_steps, or
/// until early stopping fires.
void train(TrainState& state, const TrainingData& data, const TrainHooks& hooks = {});

}  // namespace advmlm
