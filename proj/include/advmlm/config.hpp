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

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "advmlm/corpus.hpp"
#include "advmlm/nn.hpp"
#include "advmlm/noiser.hpp"

namespace advmlm {

/// Invalid configuration text or values. Messages carry a line number when
/// the problem can be located in the source text.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainMode { kAdversarial, kBaseline };

/// Everything a run depends on. Serialized as one flat JSON object whose keys
/// are the member names below.
struct RunConfig {
  std::int64_t seed = 1;

  // Data. An empty corpus_path selects the synthetic generator.
  std::string corpus_path;
  std::string corpus_format = "fasta";
  std::string alphabet = "ACDEFGHIKLMNPQRSTVWYXBZUO";
  std::string synth_kind = "markov";
  std::int64_t synth_num_sequences = 2000;
  std::int64_t synth_min_len = 16;
  std::int64_t synth_max_len = 32;
  std::int64_t synth_markov_order = 1;
  std::int64_t synth_markov_branching = 3;
  std::string synth_template = "u[0:12] s2[12:25]";

  // Noiser.
  std::int64_t noiser_layers = 3;
  std::int64_t noiser_embed_dim = 128;
  std::int64_t noiser_hidden_dim = 64;
  bool noiser_bidirectional = true;

  // Encoder.
  std::int64_t encoder_layers = 4;
  std::int64_t encoder_heads = 4;
  std::int64_t encoder_model_dim = 128;
  std::int64_t encoder_ff_dim = 512;
  std::int64_t max_seq_len = 256;
  double encoder_dropout = 0.1;

  // Masking.
  std::string mode = "adversarial";
  double rho_adv = 0.10;
  double rho_rand = 0.10;
  double baseline_rate = 0.20;
  double temperature = 1.0;
  double temperature_final = 1.0;
  std::int64_t anneal_steps = 0;
  double epsilon = 1e-18;

  // Optimizers. A negative noiser_lr reuses lr.
  double lr = 1e-4;
  double noiser_lr = -1.0;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // Schedule.
  std::int64_t n_noiser = 10;
  std::int64_t n_encoder = 10;
  std::int64_t warmup_encoder_steps = 0;
  std::int64_t batch_size = 32;
  std::int64_t max_steps = 1000;
  std::int64_t checkpoint_interval = 500;
  std::int64_t probe_interval = 100;
  std::int64_t probe_size = 128;
  std::int64_t early_stop_patience = 0;
  double early_stop_min_delta = 1e-4;

  // Run control.
  std::string output_dir;
  bool record_wall_time = true;

  TrainMode train_mode() const { return mode == "baseline" ? TrainMode::kBaseline : TrainMode::kAdversarial; }
  double effective_noiser_lr() const { return noiser_lr < 0 ? lr : noiser_lr; }
  /// Linear anneal from temperature to temperature_final over anneal_steps.
  double temperature_at(std::int64_t step) const;

  GruConfig noiser_config() const;
  TransformerConfig encoder_config() const;
  NoiserParams noiser_params(std::int64_t step) const;
  SynthSpec synth_spec() const;
  CorpusFormat format() const;
};

/// Parses a flat JSON object. Unknown keys, wrong value types and syntax
/// errors raise ConfigError with the offending line.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

/// Applies one `key=value` override, typed by the key.
void apply_override(RunConfig& cfg, std::string_view assignment);

/// Range and consistency checks. With `check_paths`, referenced files must exist.
void validate(const RunConfig& cfg, bool check_paths = true);

/// Sorted keys, two-space indent, trailing newline. Stable across runs.
std::string canonical_text(const RunConfig& cfg);

/// SHA-256 over the canonical text of the keys that shape the model and the
/// data. Run-control keys (max_steps, checkpoint_interval, output_dir,
/// early_stop_patience, record_wall_time) are left out so a run can be
/// resumed with a longer horizon.
std::string fingerprint(const RunConfig& cfg);

bool is_run_control_key(std::string_view key);

}  // namespace advmlm
