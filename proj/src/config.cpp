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

#include "advmlm/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <variant>
#include <vector>

#include "advmlm/hash.hpp"
#include "json.hpp"

namespace advmlm {

namespace {

using Json = nlohmann::json;
using Member = std::variant<std::int64_t RunConfig::*, double RunConfig::*, bool RunConfig::*,
                            std::string RunConfig::*>;

struct Field {
  std::string_view name;
  Member member;
  bool run_control = false;
};

#define ADVMLM_FIELD(name) Field{#name, &RunConfig::name}
#define ADVMLM_CONTROL(name) Field{#name, &RunConfig::name, true}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      ADVMLM_FIELD(seed),
      ADVMLM_FIELD(corpus_path),
      ADVMLM_FIELD(corpus_format),
      ADVMLM_FIELD(alphabet),
      ADVMLM_FIELD(synth_kind),
      ADVMLM_FIELD(synth_num_sequences),
      ADVMLM_FIELD(synth_min_len),
      ADVMLM_FIELD(synth_max_len),
      ADVMLM_FIELD(synth_markov_order),
      ADVMLM_FIELD(synth_markov_branching),
      ADVMLM_FIELD(synth_template),
      ADVMLM_FIELD(noiser_layers),
      ADVMLM_FIELD(noiser_embed_dim),
      ADVMLM_FIELD(noiser_hidden_dim),
      ADVMLM_FIELD(noiser_bidirectional),
      ADVMLM_FIELD(encoder_layers),
      ADVMLM_FIELD(encoder_heads),
      ADVMLM_FIELD(encoder_model_dim),
      ADVMLM_FIELD(encoder_ff_dim),
      ADVMLM_FIELD(max_seq_len),
      ADVMLM_FIELD(encoder_dropout),
      ADVMLM_FIELD(mode),
      ADVMLM_FIELD(rho_adv),
      ADVMLM_FIELD(rho_rand),
      ADVMLM_FIELD(baseline_rate),
      ADVMLM_FIELD(temperature),
      ADVMLM_FIELD(temperature_final),
      ADVMLM_FIELD(anneal_steps),
      ADVMLM_FIELD(epsilon),
      ADVMLM_FIELD(lr),
      ADVMLM_FIELD(noiser_lr),
      ADVMLM_FIELD(weight_decay),
      ADVMLM_FIELD(beta1),
      ADVMLM_FIELD(beta2),
      ADVMLM_FIELD(adam_eps),
      ADVMLM_FIELD(n_noiser),
      ADVMLM_FIELD(n_encoder),
      ADVMLM_FIELD(warmup_encoder_steps),
      ADVMLM_FIELD(batch_size),
      ADVMLM_CONTROL(max_steps),
      ADVMLM_CONTROL(checkpoint_interval),
      ADVMLM_FIELD(probe_interval),
      ADVMLM_FIELD(probe_size),
      ADVMLM_CONTROL(early_stop_patience),
      ADVMLM_FIELD(early_stop_min_delta),
      ADVMLM_CONTROL(output_dir),
      ADVMLM_CONTROL(record_wall_time),
  };
  return table;
}

#undef ADVMLM_FIELD
#undef ADVMLM_CONTROL

const Field* find_field(std::string_view name) {
  for (const auto& f : fields())
    if (f.name == name) return &f;
  return nullptr;
}

/// 1-based line of byte offset `pos` in `text`.
std::size_t line_of(std::string_view text, std::size_t pos) {
  pos = std::min(pos, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

/// Line of the first occurrence of `"key"` used as an object key.
std::size_t line_of_key(std::string_view text, std::string_view key) {
  const std::string quoted = "\"" + std::string(key) + "\"";
  std::size_t pos = 0;
  while ((pos = text.find(quoted, pos)) != std::string_view::npos) {
    std::size_t after = pos + quoted.size();
    while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
    if (after < text.size() && text[after] == ':') return line_of(text, pos);
    pos = after;
  }
  return 0;
}

std::string at_line(std::size_t line) { return line ? "line " + std::to_string(line) + ": " : ""; }

void assign_json(RunConfig& cfg, const Field& f, const Json& v, std::string_view text) {
  const auto fail = [&](std::string_view expected) {
    throw ConfigError(at_line(line_of_key(text, f.name)) + "key '" + std::string(f.name) + "' expects " +
                      std::string(expected) + ", got " + v.type_name());
  };
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::int64_t>) {
          if (!v.is_number_integer()) fail("an integer");
          cfg.*member = v.get<std::int64_t>();
        } else if constexpr (std::is_same_v<T, double>) {
          if (!v.is_number()) fail("a number");
          cfg.*member = v.get<double>();
        } else if constexpr (std::is_same_v<T, bool>) {
          if (!v.is_boolean()) fail("true or false");
          cfg.*member = v.get<bool>();
        } else {
          if (!v.is_string()) fail("a string");
          cfg.*member = v.get<std::string>();
        }
      },
      f.member);
}

Json to_json(const RunConfig& cfg, bool include_run_control) {
  Json out = Json::object();
  for (const auto& f : fields()) {
    if (f.run_control && !include_run_control) continue;
    std::visit([&](auto member) { out[std::string(f.name)] = cfg.*member; }, f.member);
  }
  return out;
}

void check(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

}  // namespace

double RunConfig::temperature_at(std::int64_t step) const {
  if (anneal_steps <= 0) return temperature;
  const double frac = std::min(1.0, static_cast<double>(std::max<std::int64_t>(step - 1, 0)) /
                                        static_cast<double>(anneal_steps));
  return temperature + (temperature_final - temperature) * frac;
}

GruConfig RunConfig::noiser_config() const {
  return GruConfig{static_cast<int>(noiser_layers), noiser_embed_dim, noiser_hidden_dim, noiser_bidirectional};
}

TransformerConfig RunConfig::encoder_config() const {
  TransformerConfig c;
  c.num_layers = static_cast<int>(encoder_layers);
  c.num_heads = static_cast<int>(encoder_heads);
  c.model_dim = encoder_model_dim;
  c.ff_dim = encoder_ff_dim;
  c.max_seq_len = max_seq_len;
  c.dropout_rate = encoder_dropout;
  return c;
}

NoiserParams RunConfig::noiser_params(std::int64_t step) const {
  return NoiserParams{rho_adv, rho_rand, temperature_at(step), epsilon};
}

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s;
  s.kind = parse_synth_kind(synth_kind);
  s.num_sequences = static_cast<std::size_t>(synth_num_sequences);
  s.min_len = static_cast<int>(synth_min_len);
  s.max_len = static_cast<int>(synth_max_len);
  s.markov_order = static_cast<int>(synth_markov_order);
  s.markov_branching = static_cast<int>(synth_markov_branching);
  s.template_pattern = synth_template;
  return s;
}

CorpusFormat RunConfig::format() const { return parse_corpus_format(corpus_format); }

RunConfig parse_config(std::string_view text) {
  Json doc;
  try {
    doc = Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    // e.byte is 1-based and points just past the offending character.
    const std::size_t byte = e.byte > 0 ? e.byte - 1 : 0;
    std::string what = e.what();
    if (const auto p = what.find("syntax error"); p != std::string::npos) what = what.substr(p);
    throw ConfigError(at_line(line_of(text, byte)) + what);
  }
  if (!doc.is_object()) throw ConfigError("line 1: configuration must be a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : doc.items()) {
    const Field* f = find_field(key);
    if (!f) throw ConfigError(at_line(line_of_key(text, key)) + "unknown key '" + key + "'");
    assign_json(cfg, *f, value, text);
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("--set expects key=value, got '" + std::string(assignment) + "'");
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  const Field* f = find_field(key);
  if (!f) throw ConfigError("--set: unknown key '" + key + "'");
  const auto bad = [&](std::string_view expected) {
    throw ConfigError("--set " + key + ": expected " + std::string(expected) + ", got '" + value + "'");
  };
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, std::int64_t>) {
          std::int64_t v = 0;
          const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
          if (ec != std::errc() || ptr != value.data() + value.size()) bad("an integer");
          cfg.*member = v;
        } else if constexpr (std::is_same_v<T, double>) {
          double v = 0;
          const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
          if (ec != std::errc() || ptr != value.data() + value.size()) bad("a number");
          cfg.*member = v;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (value == "true") {
            cfg.*member = true;
          } else if (value == "false") {
            cfg.*member = false;
          } else {
            bad("true or false");
          }
        } else {
          cfg.*member = value;
        }
      },
      f->member);
}

void validate(const RunConfig& c, bool check_paths) {
  check(c.seed >= 0, "seed must be non-negative");
  check(c.mode == "adversarial" || c.mode == "baseline", "mode must be 'adversarial' or 'baseline', got '" + c.mode + "'");
  try {
    (void)c.format();
    const Vocabulary vocab(c.alphabet);
    if (c.corpus_path.empty()) c.synth_spec().validate(vocab.content_size());
  } catch (const CorpusError& e) {
    throw ConfigError(e.what());
  }
  if (check_paths && !c.corpus_path.empty())
    check(std::filesystem::is_regular_file(c.corpus_path), "corpus file not found: '" + c.corpus_path + "'");

  check(c.noiser_layers > 0 && c.noiser_embed_dim > 0 && c.noiser_hidden_dim > 0, "noiser dimensions must be positive");
  check(c.encoder_layers > 0 && c.encoder_heads > 0 && c.encoder_model_dim > 0 && c.encoder_ff_dim > 0,
        "encoder dimensions must be positive");
  check(c.encoder_model_dim % c.encoder_heads == 0, "encoder_model_dim must be divisible by encoder_heads");
  check(c.max_seq_len >= 3, "max_seq_len must be at least 3");
  check(c.encoder_dropout >= 0 && c.encoder_dropout < 1, "encoder_dropout must lie in [0, 1)");

  check(c.rho_adv > 0 && c.rho_adv < 1, "rho_adv must lie in (0, 1)");
  check(c.rho_rand >= 0, "rho_rand must be non-negative");
  check(c.rho_adv + c.rho_rand <= 0.5, "rho_adv + rho_rand must not exceed 0.5");
  check(c.baseline_rate > 0 && c.baseline_rate < 1, "baseline_rate must lie in (0, 1)");
  check(c.temperature > 0 && c.temperature_final > 0, "temperatures must be positive");
  check(c.anneal_steps >= 0, "anneal_steps must be non-negative");
  check(c.epsilon > 0 && c.epsilon < 1e-3, "epsilon must lie in (0, 1e-3)");

  check(c.lr > 0, "lr must be positive");
  check(c.weight_decay >= 0, "weight_decay must be non-negative");
  check(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1, "beta1 and beta2 must lie in [0, 1)");
  check(c.adam_eps > 0, "adam_eps must be positive");

  check(c.n_noiser > 0 && c.n_encoder > 0, "n_noiser and n_encoder must be positive");
  check(c.warmup_encoder_steps >= 0, "warmup_encoder_steps must be non-negative");
  check(c.batch_size > 0, "batch_size must be positive");
  check(c.max_steps >= 0, "max_steps must be non-negative");
  check(c.checkpoint_interval >= 0, "checkpoint_interval must be non-negative");
  check(c.probe_interval >= 0 && c.probe_size >= 0, "probe_interval and probe_size must be non-negative");
  check(c.early_stop_patience >= 0, "early_stop_patience must be non-negative");
  check(c.early_stop_patience == 0 || (c.probe_interval > 0 && c.probe_size > 0),
        "early stopping needs probe_interval and probe_size");
}

std::string canonical_text(const RunConfig& cfg) { return to_json(cfg, true).dump(2) + "\n"; }

std::string fingerprint(const RunConfig& cfg) { return to_hex(sha256(to_json(cfg, false).dump())); }

bool is_run_control_key(std::string_view key) {
  const Field* f = find_field(key);
  return f && f->run_control;
}

}  // namespace advmlm
