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

#include "advmlm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advmlm/checkpoint.hpp"
#include "advmlm/hash.hpp"
#include "json.hpp"

namespace advmlm {

namespace fs = std::filesystem;
using OrderedJson = nlohmann::ordered_json;

namespace {

struct TrainOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string resume_dir;
  bool force = false;
};

struct InspectOptions {
  std::string checkpoint;
  std::string config_path;
  std::vector<std::string> sets;
  std::string corpus;
  std::string format;
  std::string masking = "both";
  std::string split = "probe";
  std::string records;
  std::int64_t max_batches = 0;
  std::int64_t limit = 8;
  std::int64_t seed = 0;
};

constexpr const char* kConfigFile = "config.json";
constexpr const char* kMetricsFile = "metrics.ndjson";
constexpr const char* kManifestFile = "MANIFEST";
constexpr const char* kCheckpointDir = "checkpoints";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
}

/// One "<sha256>  <relative path>" line per artifact, sorted by path.
void write_manifest(const fs::path& dir) {
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string r = fs::relative(e.path(), dir).generic_string();
    if (r == kManifestFile || r.ends_with(".tmp")) continue;
    rel.push_back(r);
  }
  std::sort(rel.begin(), rel.end());
  std::string text;
  for (const auto& r : rel) text += to_hex(sha256(read_file(dir / r))) + "  " + r + "\n";
  write_file(dir / kManifestFile, text);
}

/// Keeps metrics records for steps before `next_step`.
void truncate_metrics(const fs::path& path, std::int64_t next_step) {
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.contains("step")) break;  // a torn final line
    if (rec["step"].get<std::int64_t>() >= next_step) break;
    kept += line + "\n";
  }
  in.close();
  write_file(path, kept);
}

fs::path default_output_dir(const RunConfig& cfg) {
  const char* root = std::getenv("ADVMLM_OUTPUT_ROOT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / (cfg.mode + "-" + fingerprint(cfg).substr(0, 12));
}

/// Removes the artifacts a previous run left behind; other files stay.
void clear_run_artifacts(const fs::path& dir) {
  for (const char* name : {kConfigFile, kMetricsFile, kManifestFile}) fs::remove(dir / name);
  fs::remove_all(dir / kCheckpointDir);
}

int cmd_train(const TrainOptions& o, bool baseline, std::ostream& out) {
  fs::path dir;
  RunConfig cfg;
  TrainState state;
  if (!o.resume_dir.empty()) {
    dir = o.resume_dir;
    if (!fs::is_regular_file(dir / kConfigFile))
      throw ConfigError("cannot resume: '" + (dir / kConfigFile).string() + "' not found");
    cfg = load_config((dir / kConfigFile).string());
    for (const auto& s : o.sets) {
      const std::string key = s.substr(0, s.find('='));
      if (!is_run_control_key(key))
        throw ConfigError("--set " + key + ": cannot change on resume; it is part of the config fingerprint");
      apply_override(cfg, s);
    }
    if (baseline != (cfg.train_mode() == TrainMode::kBaseline))
      throw ConfigError("cannot resume a " + cfg.mode + " run with the " + (baseline ? "baseline" : "pretrain") +
                        " command");
    validate(cfg);
    const auto ckpt = latest_checkpoint(dir / kCheckpointDir);
    if (!ckpt) throw ConfigError("cannot resume: no checkpoint in '" + (dir / kCheckpointDir).string() + "'");
    state = load_checkpoint(*ckpt, fingerprint(cfg));
    state.config = cfg;
    truncate_metrics(dir / kMetricsFile, state.step);
    write_file(dir / kConfigFile, canonical_text(cfg));
  } else {
    if (o.config_path.empty()) throw ConfigError("--config is required unless --resume is given");
    cfg = load_config(o.config_path);
    for (const auto& s : o.sets) apply_override(cfg, s);
    if (baseline) cfg.mode = "baseline";
    if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
    validate(cfg);
    dir = cfg.output_dir.empty() ? default_output_dir(cfg) : fs::path(cfg.output_dir);
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      if (!o.force)
        throw ConfigError("output directory '" + dir.string() + "' is not empty; pass --resume or --force");
      clear_run_artifacts(dir);
    }
    fs::create_directories(dir / kCheckpointDir);
    write_file(dir / kConfigFile, canonical_text(cfg));
    write_file(dir / kMetricsFile, "");
    state = init_state(cfg);
  }
  fs::create_directories(dir / kCheckpointDir);

  const TrainingData data = prepare_data(state.config, state.vocab);
  const std::int64_t first = state.step;
  std::ofstream metrics(dir / kMetricsFile, std::ios::app);
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) { metrics << to_ndjson(m) << '\n' << std::flush; };
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_checkpoint(s, dir / kCheckpointDir / checkpoint_name(s.step - 1));
    write_manifest(dir);
  };
  train(state, data, hooks);
  metrics.close();
  // Always leave a checkpoint for the final step, including step 0.
  const fs::path final_ckpt = dir / kCheckpointDir / checkpoint_name(state.step - 1);
  if (!fs::exists(final_ckpt)) save_checkpoint(state, final_ckpt);
  write_manifest(dir);
  out << cfg.mode << ": steps " << first << ".." << state.step - 1 << (state.stopped ? " (early stop)" : "")
      << "; output in " << dir.string() << "\n";
  return kExitOk;
}

/// Checkpoint plus optional config check shared by eval and inspect-masks.
TrainState open_checkpoint(const InspectOptions& o) {
  std::optional<std::string> expected;
  if (!o.config_path.empty()) {
    RunConfig cfg = load_config(o.config_path);
    for (const auto& s : o.sets) apply_override(cfg, s);
    validate(cfg, false);
    expected = fingerprint(cfg);
  } else if (!o.sets.empty()) {
    throw ConfigError("--set needs --config");
  }
  return load_checkpoint(o.checkpoint, expected);
}

std::vector<TokenSequence> eval_sequences(const InspectOptions& o, const TrainState& s) {
  if (!o.corpus.empty()) {
    const std::string fmt = o.format.empty() ? s.config.corpus_format : o.format;
    const auto loaded = load_corpus(o.corpus, parse_corpus_format(fmt));
    std::vector<TokenSequence> seqs;
    for (const auto& q : loaded.sequences) seqs.push_back(s.vocab.encode(q));
    return seqs;
  }
  TrainingData data = prepare_data(s.config, s.vocab);
  if (o.split != "probe" && o.split != "train") throw ConfigError("--split must be probe or train");
  return o.split == "probe" && !data.probe.empty() ? data.probe : data.train;
}

std::vector<Batch> chunk(const std::vector<TokenSequence>& seqs, const RunConfig& cfg, std::int64_t max_batches) {
  std::vector<Batch> out;
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t i = 0; i < seqs.size(); i += b) {
    if (max_batches > 0 && static_cast<std::int64_t>(out.size()) >= max_batches) break;
    const std::vector<TokenSequence> rows(seqs.begin() + static_cast<std::ptrdiff_t>(i),
                                          seqs.begin() + static_cast<std::ptrdiff_t>(std::min(i + b, seqs.size())));
    out.push_back(frame_batch(rows, cfg.max_seq_len));
  }
  return out;
}

struct Accumulator {
  double loss = 0, adv = 0, rand = 0;
  double correct = 0;
  Index scored = 0, adv_n = 0, rand_n = 0;
  MaskTypeHistogram hist{};

  void add(const LossReport<Real>& r) {
    loss += static_cast<double>(r.total_loss.item()) * static_cast<double>(r.scored_count);
    correct += r.masked_accuracy * static_cast<double>(r.scored_count);
    scored += r.scored_count;
    if (r.adv_count) adv += r.adv_loss * static_cast<double>(r.adv_count), adv_n += r.adv_count;
    if (r.rand_count) rand += r.rand_loss * static_cast<double>(r.rand_count), rand_n += r.rand_count;
    for (std::size_t k = 0; k < kNumProvenance; ++k) hist[k] += r.histogram[k];
  }
  static OrderedJson mean(double total, Index n) {
    return n ? OrderedJson(total / static_cast<double>(n)) : OrderedJson(nullptr);
  }
  OrderedJson report(bool with_split) const {
    OrderedJson j;
    j["loss"] = mean(loss, scored);
    j["masked_accuracy"] = mean(correct, scored);
    j["scored"] = scored;
    if (with_split) {
      j["adv_loss"] = mean(adv, adv_n);
      j["rand_loss"] = mean(rand, rand_n);
    }
    OrderedJson h;
    for (std::size_t k = 1; k < kNumProvenance; ++k) h[std::string(kProvenanceNames[k])] = hist[k];
    j["hist"] = h;
    return j;
  }
};

void require_adversary(const TrainState& s) {
  if (s.config.train_mode() == TrainMode::kBaseline)
    throw ConfigError("checkpoint comes from a baseline run and has no trained adversary");
}

int cmd_eval(const InspectOptions& o, std::ostream& out) {
  if (o.masking != "random" && o.masking != "adversarial" && o.masking != "both")
    throw ConfigError("--masking must be random, adversarial or both");
  const TrainState s = open_checkpoint(o);
  const bool do_random = o.masking != "adversarial", do_adv = o.masking != "random";
  if (do_adv) require_adversary(s);
  const auto seqs = eval_sequences(o, s);
  const auto batches = chunk(seqs, s.config, o.max_batches);

  NoGradGuard guard;
  Accumulator rnd, adv;
  const Rng base(static_cast<std::uint64_t>(o.seed));
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const Batch& b = batches[k];
    const Rng rng = base.fork(k);
    if (do_random) {
      const auto outcome = random_mask<Real>(b.tokens, b.valid, probe_rate(s.config), s.vocab, rng.fork(1));
      rnd.add(mlm_loss(s.encoder.logits(outcome.x_tilde, b.valid), b.tokens, outcome.loss_positions, outcome.provenance));
    }
    if (do_adv) {
      const auto outcome = run_noiser(s.noiser, b.tokens, b.valid, s.config.noiser_params(s.step), s.vocab, rng.fork(2));
      adv.add(mlm_loss(s.encoder.logits(outcome.x_tilde, b.valid), b.tokens, outcome.loss_positions, outcome.provenance));
    }
  }

  OrderedJson j;
  j["schema"] = "advmlm.eval/1";
  j["checkpoint"] = o.checkpoint;
  j["fingerprint"] = fingerprint(s.config);
  j["step"] = s.step - 1;
  j["sequences"] = seqs.size();
  j["batches"] = batches.size();
  if (do_random) j["random"] = rnd.report(false);
  if (do_adv) j["adversarial"] = adv.report(true);
  if (do_random && do_adv && rnd.scored && adv.adv_n) {
    const double r = rnd.loss / static_cast<double>(rnd.scored);
    const double a = adv.adv / static_cast<double>(adv.adv_n);
    j["gap"] = {{"absolute", a - r}, {"relative", (a - r) / r}};
  }
  out << j.dump(2) << "\n";
  return kExitOk;
}

char decision_code(std::int32_t p) {
  static constexpr char kCodes[kNumProvenance] = {'.', 'M', 'K', 'R', 'm', 'k', 'r'};
  return kCodes[static_cast<std::size_t>(p)];
}

int cmd_inspect(const InspectOptions& o, std::ostream& out) {
  const TrainState s = open_checkpoint(o);
  require_adversary(s);
  std::vector<TokenSequence> seqs = eval_sequences(o, s);
  if (o.corpus.empty() && o.limit > 0 && static_cast<std::int64_t>(seqs.size()) > o.limit)
    seqs.resize(static_cast<std::size_t>(o.limit));
  const auto batches = chunk(seqs, s.config, 0);

  std::ofstream records;
  if (!o.records.empty()) {
    records.open(o.records, std::ios::trunc);
    if (!records) throw std::runtime_error("cannot write '" + o.records + "'");
  }
  out << "# any-mask probability per position; decisions: . none, M/K/R adversary mask/keep/replace, "
         "m/k/r random floor\n";
  NoGradGuard guard;
  const Rng base(static_cast<std::uint64_t>(o.seed));
  const Index v = s.vocab.size();
  std::size_t index = 0;
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const Batch& b = batches[k];
    const auto outcome = run_noiser(s.noiser, b.tokens, b.valid, s.config.noiser_params(s.step), s.vocab, base.fork(k));
    const auto& prob = outcome.any_mask_prob.value();
    const auto& xt = outcome.x_tilde.value();
    for (Index r = 0; r < b.rows(); ++r, ++index) {
      const Index len = b.seq_lens[static_cast<std::size_t>(r)];
      OrderedJson rec;
      rec["schema"] = "advmlm.masks/1";
      rec["index"] = index;
      rec["length"] = len;
      std::string seq;
      OrderedJson probs = OrderedJson::array(), decisions = OrderedJson::array(), repl = OrderedJson::array();
      std::ostringstream tok_row, p_row, d_row;
      tok_row << "tok ";
      p_row << "p   ";
      d_row << "dec ";
      for (Index c = 1; c <= len; ++c) {
        const Index flat = r * b.cols() + c;
        const std::int32_t id = b.tokens(r, c);
        const std::string t = s.vocab.token_of(id);
        seq += t.size() == 1 ? t : "?";
        const double p = std::clamp(static_cast<double>(prob[flat]), 0.0, 1.0);
        const std::int32_t prov = outcome.provenance(r, c);
        probs.push_back(p);
        decisions.push_back(kProvenanceNames[static_cast<std::size_t>(prov)]);
        if (prov == static_cast<std::int32_t>(Provenance::kAdvReplace) ||
            prov == static_cast<std::int32_t>(Provenance::kRandReplace)) {
          Index best = 0;
          xt.segment(flat * v, v).maxCoeff(&best);
          repl.push_back(s.vocab.token_of(static_cast<std::int32_t>(best)));
        } else {
          repl.push_back(nullptr);
        }
        tok_row << std::setw(5) << t;
        p_row << std::setw(5) << std::fixed << std::setprecision(2) << p;
        d_row << std::setw(5) << decision_code(prov);
      }
      rec["sequence"] = seq;
      rec["any_mask_prob"] = probs;
      rec["decision"] = decisions;
      rec["replacement"] = repl;
      out << "seq " << index << " len " << len << "\n" << tok_row.str() << "\n" << p_row.str() << "\n"
          << d_row.str() << "\n\n";
      if (records.is_open()) records << rec.dump() << '\n';
    }
  }
  return kExitOk;
}

void add_inspect_options(CLI::App* cmd, InspectOptions& o) {
  cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  cmd->add_option("--config", o.config_path, "Config whose fingerprint the checkpoint must match");
  cmd->add_option("--set", o.sets, "Override a config key (key=value), repeatable");
  cmd->add_option("--corpus", o.corpus, "Sequences to use instead of the run's own data");
  cmd->add_option("--format", o.format, "Format of --corpus: fasta or lines");
  cmd->add_option("--split", o.split, "Run data split when --corpus is absent: probe or train");
  cmd->add_option("--seed", o.seed, "Seed for masking draws");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial masking for masked-language-model pre-training", "advmlm"};
  app.require_subcommand(1);

  TrainOptions train_opts;
  auto add_train = [&](const char* name, const char* help) {
    CLI::App* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", train_opts.config_path, "Run config (flat JSON)");
    cmd->add_option("--set", train_opts.sets, "Override a config key (key=value), repeatable");
    cmd->add_option("--out", train_opts.out_dir, "Output directory");
    cmd->add_option("--resume", train_opts.resume_dir, "Continue the run in this directory");
    cmd->add_flag("--force", train_opts.force, "Reuse a non-empty output directory");
    return cmd;
  };
  CLI::App* pretrain = add_train("pretrain", "Adversarial pre-training");
  CLI::App* baseline = add_train("baseline", "Random-masking baseline at the same total rate");

  InspectOptions eval_opts, inspect_opts;
  CLI::App* eval = app.add_subcommand("eval", "Frozen-parameter evaluation of a checkpoint");
  add_inspect_options(eval, eval_opts);
  eval->add_option("--masking", eval_opts.masking, "random, adversarial or both");
  eval->add_option("--max-batches", eval_opts.max_batches, "Evaluate at most this many batches (0: all)");
  CLI::App* inspect = app.add_subcommand("inspect-masks", "Per-position masking report");
  add_inspect_options(inspect, inspect_opts);
  inspect->add_option("--limit", inspect_opts.limit, "Sequences taken from the run data (ignored with --corpus)");
  inspect->add_option("--records", inspect_opts.records, "Write NDJSON records to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (pretrain->parsed()) return cmd_train(train_opts, false, out);
    if (baseline->parsed()) return cmd_train(train_opts, true, out);
    if (eval->parsed()) return cmd_eval(eval_opts, out);
    if (inspect->parsed()) return cmd_inspect(inspect_opts, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const CorpusError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "fatal: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace advmlm
