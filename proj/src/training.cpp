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

#include "advmlm/training.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "json.hpp"

namespace advmlm {

namespace {

/// Switches requires_grad off for a parameter set and restores it on exit.
class FrozenScope {
 public:
  explicit FrozenScope(ParameterList<Real> params) : params_(std::move(params)) { set_requires_grad(params_, false); }
  ~FrozenScope() { set_requires_grad(params_, true); }
  FrozenScope(const FrozenScope&) = delete;
  FrozenScope& operator=(const FrozenScope&) = delete;

 private:
  ParameterList<Real> params_;
};

Rng step_rng(const TrainState& s) {
  return Rng(static_cast<std::uint64_t>(s.config.seed)).fork(kStreamStep, static_cast<std::uint64_t>(s.step));
}

StepMetrics summarize(const TrainState& s, Phase mode, const LossReport<Real>& rep, const Batch& batch) {
  StepMetrics m;
  m.step = s.step;
  m.mode = mode;
  m.mlm_loss = static_cast<double>(rep.total_loss.item());
  m.masked_accuracy = rep.masked_accuracy;
  m.adv_loss = rep.adv_loss;
  m.rand_loss = rep.rand_loss;
  m.scored = rep.scored_count;
  m.adv_count = rep.adv_count;
  m.rand_count = rep.rand_count;
  m.valid_tokens = batch.valid_count();
  m.histogram = rep.histogram;
  m.temperature = s.config.temperature_at(s.step);
  return m;
}

}  // namespace

EncoderRun<Real> step_masking(const TrainState& s) {
  EncoderRun<Real> run;
  if (s.config.train_mode() == TrainMode::kBaseline) {
    run.mode = MaskingMode::kRandomOnly;
    run.random_rate = s.config.baseline_rate;
  } else {
    run.mode = MaskingMode::kAdversarial;
    run.noiser_params = s.config.noiser_params(s.step);
  }
  return run;
}

Rng step_noise_rng(const TrainState& state) { return step_rng(state).fork(1); }

std::string_view phase_name(Phase p) { return p == Phase::kNoising ? "noising" : "encoding"; }

TrainState init_state(const RunConfig& cfg) {
  validate(cfg, false);
  TrainState s;
  s.config = cfg;
  s.vocab = Vocabulary(cfg.alphabet);
  const Rng init = Rng(static_cast<std::uint64_t>(cfg.seed)).fork(kStreamInit);
  Rng noiser_rng = init.fork(1), encoder_rng = init.fork(2);
  s.noiser = Noiser<Real>(cfg.noiser_config(), s.vocab, noiser_rng);
  s.encoder = TransformerEncoder<Real>(cfg.encoder_config(), s.vocab.size(), encoder_rng);
  s.noiser_opt = AdamW<Real>(s.theta(), {cfg.effective_noiser_lr(), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps});
  s.encoder_opt = AdamW<Real>(s.phi(), {cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps});
  const bool encoder_first = cfg.train_mode() == TrainMode::kBaseline || cfg.warmup_encoder_steps > 0;
  s.mode = encoder_first ? Phase::kEncoding : Phase::kNoising;
  return s;
}

TrainingData prepare_data(const RunConfig& cfg, const Vocabulary& vocab) {
  const auto seed = static_cast<std::uint64_t>(cfg.seed);
  const std::vector<std::string> raw = cfg.corpus_path.empty()
                                           ? synth_corpus(cfg.synth_spec(), vocab, Rng(seed).fork(kStreamCorpus))
                                           : load_corpus(cfg.corpus_path, cfg.format()).sequences;
  if (raw.empty()) throw CorpusError("corpus is empty; refusing to start");

  std::vector<std::size_t> order(raw.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split = Rng(seed).fork(kStreamSplit);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split.below(i)]);

  const auto held = static_cast<std::size_t>(cfg.probe_interval > 0 ? cfg.probe_size : 0);
  if (held >= raw.size())
    throw CorpusError("corpus has " + std::to_string(raw.size()) + " sequences; the probe split needs " +
                      std::to_string(held) + " plus at least one for training");
  TrainingData data;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < held ? data.probe : data.train).push_back(vocab.encode(raw[order[i]]));
  return data;
}

Batch frame_batch(const std::vector<TokenSequence>& seqs, Index max_seq_len) {
  Index longest = 0;
  for (const auto& s : seqs) longest = std::max(longest, static_cast<Index>(s.size()));
  return make_batch(seqs, std::min(max_seq_len, longest + 2));
}

BatchStream::BatchStream(const std::vector<TokenSequence>& seqs, Index batch_size, Index max_seq_len,
                         std::uint64_t seed)
    : seqs_(&seqs), batch_size_(batch_size), max_seq_len_(max_seq_len), rng_(seed) {
  require(!seqs.empty(), "batch stream: no sequences");
  require(batch_size > 0, "batch stream: batch_size must be positive");
  per_epoch_ = (static_cast<std::int64_t>(seqs.size()) + batch_size - 1) / batch_size;
}

Batch BatchStream::get(std::int64_t i) {
  require(i >= 1, "batch stream: steps count from 1");
  const std::int64_t epoch = (i - 1) / per_epoch_, slot = (i - 1) % per_epoch_;
  if (epoch != cached_epoch_) {
    order_.resize(seqs_->size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng shuffle = rng_.fork(kStreamEpoch, static_cast<std::uint64_t>(epoch));
    for (std::size_t k = order_.size(); k > 1; --k) std::swap(order_[k - 1], order_[shuffle.below(k)]);
    cached_epoch_ = epoch;
  }
  const auto begin = static_cast<std::size_t>(slot * batch_size_);
  const auto end = std::min(order_.size(), begin + static_cast<std::size_t>(batch_size_));
  std::vector<TokenSequence> rows;
  for (std::size_t k = begin; k < end; ++k) rows.push_back((*seqs_)[order_[k]]);
  return frame_batch(rows, max_seq_len_);
}

std::string to_ndjson(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["schema"] = kMetricsSchema;
  j["step"] = m.step;
  j["mode"] = phase_name(m.mode);
  j["updated"] = m.updated;
  j["mlm_loss"] = m.mlm_loss;
  j["masked_accuracy"] = m.masked_accuracy;
  j["masked_fraction"] = m.valid_tokens ? static_cast<double>(m.scored) / static_cast<double>(m.valid_tokens) : 0.0;
  j["adv_loss"] = m.adv_loss;
  j["rand_loss"] = m.rand_loss;
  j["scored"] = m.scored;
  j["adv_count"] = m.adv_count;
  j["rand_count"] = m.rand_count;
  j["valid_tokens"] = m.valid_tokens;
  nlohmann::ordered_json hist;
  for (std::size_t k = 1; k < kNumProvenance; ++k) hist[std::string(kProvenanceNames[k])] = m.histogram[k];
  j["hist"] = hist;
  j["temperature"] = m.temperature;
  j["probe_loss"] = m.probe_loss ? nlohmann::ordered_json(*m.probe_loss) : nlohmann::ordered_json(nullptr);
  if (m.wall_time_s) j["wall_time_s"] = *m.wall_time_s;
  return j.dump();
}

StepMetrics update_noiser(TrainState& state, const Batch& batch) {
  require(state.config.train_mode() == TrainMode::kAdversarial, "update_noiser: baseline runs have no adversary");
  require(state.mode == Phase::kNoising, "update_noiser: called while mode is encoding");
  FrozenScope frozen(state.phi());
  auto theta = state.theta();
  zero_grad(theta);

  const Rng rng = step_rng(state);
  Rng dropout_rng = rng.fork(2);
  EncoderRun<Real> run = step_masking(state);
  run.noiser_grad = true;
  run.dropout_rng = state.config.encoder_dropout > 0 ? &dropout_rng : nullptr;
  const auto res = run_encoder(&state.noiser, state.encoder, batch, state.vocab, run, step_noise_rng(state));
  StepMetrics m = summarize(state, Phase::kNoising, res.report, batch);
  if (!res.report.degenerate) {
    if (res.report.total_loss.requires_grad()) res.report.total_loss.backward();
    state.noiser_opt.step(theta, Real(-1));
    m.updated = true;
  }
  zero_grad(theta);
  return m;
}

StepMetrics update_encoder(TrainState& state, const Batch& batch) {
  require(state.mode == Phase::kEncoding, "update_encoder: called while mode is noising");
  auto phi = state.phi();
  zero_grad(phi);

  const Rng rng = step_rng(state);
  Rng dropout_rng = rng.fork(2);
  EncoderRun<Real> run = step_masking(state);
  run.noiser_grad = false;
  run.dropout_rng = state.config.encoder_dropout > 0 ? &dropout_rng : nullptr;
  const auto res = run_encoder(&state.noiser, state.encoder, batch, state.vocab, run, step_noise_rng(state));
  StepMetrics m = summarize(state, Phase::kEncoding, res.report, batch);
  if (!res.report.degenerate) {
    res.report.total_loss.backward();
    state.encoder_opt.step(phi);
    m.updated = true;
  }
  zero_grad(phi);
  return m;
}

double probe_rate(const RunConfig& cfg) {
  return cfg.train_mode() == TrainMode::kBaseline ? cfg.baseline_rate : cfg.rho_adv + cfg.rho_rand;
}

std::vector<Batch> probe_batches(const TrainingData& data, const RunConfig& cfg) {
  std::vector<Batch> out;
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t i = 0; i < data.probe.size(); i += b) {
    const std::vector<TokenSequence> rows(data.probe.begin() + static_cast<std::ptrdiff_t>(i),
                                          data.probe.begin() + static_cast<std::ptrdiff_t>(std::min(i + b, data.probe.size())));
    out.push_back(frame_batch(rows, cfg.max_seq_len));
  }
  return out;
}

double probe_loss(const TrainState& state, const std::vector<Batch>& batches) {
  NoGradGuard guard;
  const Rng base = Rng(static_cast<std::uint64_t>(state.config.seed)).fork(kStreamProbe);
  const double rate = probe_rate(state.config);
  double total = 0;
  Index scored = 0;
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const Batch& b = batches[k];
    const auto outcome = random_mask<Real>(b.tokens, b.valid, rate, state.vocab, base.fork(k));
    const auto rep = mlm_loss(state.encoder.logits(outcome.x_tilde, b.valid), b.tokens, outcome.loss_positions,
                              outcome.provenance);
    total += static_cast<double>(rep.total_loss.item()) * static_cast<double>(rep.scored_count);
    scored += rep.scored_count;
  }
  return scored ? total / static_cast<double>(scored) : std::numeric_limits<double>::quiet_NaN();
}

void train(TrainState& state, const TrainingData& data, const TrainHooks& hooks) {
  const RunConfig& cfg = state.config;
  BatchStream stream(data.train, cfg.batch_size, cfg.max_seq_len, static_cast<std::uint64_t>(cfg.seed));
  const std::vector<Batch> probe = cfg.probe_interval > 0 ? probe_batches(data, cfg) : std::vector<Batch>{};
  const bool baseline = cfg.train_mode() == TrainMode::kBaseline;
  const std::int64_t warmup = cfg.warmup_encoder_steps;
  const auto start = std::chrono::steady_clock::now();

  while (state.step <= cfg.max_steps && !state.stopped) {
    const std::int64_t i = state.step;
    const Batch batch = stream.get(i);
    StepMetrics m;
    if (baseline) {
      state.mode = Phase::kEncoding;
      m = update_encoder(state, batch);
    } else if (i <= warmup) {
      state.mode = Phase::kEncoding;
      m = update_encoder(state, batch);
      if (i == warmup) state.mode = Phase::kNoising;
    } else if (state.mode == Phase::kNoising) {
      m = update_noiser(state, batch);
      if ((i - warmup) % cfg.n_noiser == 0) state.mode = Phase::kEncoding;
    } else {
      m = update_encoder(state, batch);
      if ((i - warmup) % cfg.n_encoder == 0) state.mode = Phase::kNoising;
    }

    if (!probe.empty() && i % cfg.probe_interval == 0) {
      const double loss = probe_loss(state, probe);
      m.probe_loss = loss;
      if (loss < state.best_probe - cfg.early_stop_min_delta) {
        state.best_probe = loss;
        state.stale_probes = 0;
      } else {
        ++state.stale_probes;
      }
      if (cfg.early_stop_patience > 0 && state.stale_probes >= cfg.early_stop_patience) state.stopped = true;
    }
    if (cfg.record_wall_time)
      m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (hooks.on_step) hooks.on_step(m);
    ++state.step;
    if (cfg.checkpoint_interval > 0 && i % cfg.checkpoint_interval == 0 && hooks.on_checkpoint)
      hooks.on_checkpoint(state);
  }
}

}  // namespace advmlm
