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

// Vocabulary, corpus ingestion, synthetic corpora and padded batches.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advmlm/rng.hpp"
#include "advmlm/types.hpp"

namespace advmlm {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TokenSequence = std::vector<std::int32_t>;

/// Control tokens occupy ids 0..4; each alphabet character gets one id from
/// v_idx() upward in alphabet order.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kMask = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kUnk = 4;
  static constexpr std::int32_t kNumControl = 5;
  /// 20 standard amino acids plus X, B, Z, U, O.
  static constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWYXBZUO";

  explicit Vocabulary(std::string alphabet = std::string(kAminoAcids));

  const std::string& alphabet() const { return alphabet_; }
  std::int32_t size() const { return kNumControl + content_size(); }
  std::int32_t v_idx() const { return kNumControl; }
  std::int32_t mask_id() const { return kMask; }
  std::int32_t content_size() const { return static_cast<std::int32_t>(alphabet_.size()); }

  /// Id of an (uppercased) character, [UNK] when outside the alphabet.
  std::int32_t id_of(char c) const;
  std::string token_of(std::int32_t id) const;
  bool is_content(std::int32_t id) const { return id >= v_idx() && id < size(); }

  TokenSequence encode(std::string_view s) const;
  std::string decode(const TokenSequence& ids) const;

 private:
  std::string alphabet_;
  std::int32_t lookup_[256];
};

enum class CorpusFormat { kFasta, kLines };

CorpusFormat parse_corpus_format(std::string_view name);

struct LoadedCorpus {
  std::vector<std::string> sequences;
  std::size_t dropped_empty = 0;
};

/// Parses FASTA (multi-line records) or one-sequence-per-line text. CRLF and
/// LF endings are equivalent; sequences are uppercased.
LoadedCorpus parse_corpus(std::string_view text, CorpusFormat format);

/// Reads and parses a corpus file. Throws CorpusError when the file cannot be
/// read or holds no usable sequence.
LoadedCorpus load_corpus(const std::filesystem::path& path, CorpusFormat format);

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

enum class SynthKind { kUniform, kMarkov, kTemplate };

SynthKind parse_synth_kind(std::string_view name);

/// One position of a repeating template, over content indices [lo, hi).
/// Free slots draw uniformly; successor slots take the successor (mod range)
/// of the token `offset` positions earlier.
struct TemplateSlot {
  bool successor = false;
  int offset = 0;
  int lo = 0;
  int hi = 0;
};

/// Grammar: whitespace-separated slots, each `u[lo:hi]` or `s<offset>[lo:hi]`.
/// "u[0:25] s1[0:25]" makes x[i+1] = succ(x[i]) for every even i.
std::vector<TemplateSlot> parse_template(std::string_view pattern, int content_size);

struct SynthSpec {
  SynthKind kind = SynthKind::kUniform;
  std::size_t num_sequences = 1000;
  int min_len = 16;
  int max_len = 32;
  int markov_order = 1;
  int markov_branching = 3;
  /// Explicit order-1 transition matrix over content indices; generated from
  /// the seed when empty.
  std::vector<std::vector<double>> transitions;
  std::string template_pattern = "u[0:12] s2[12:25]";

  void validate(int content_size) const;
};

/// Row-stochastic table with content_size^order rows; row index is the
/// base-content_size number formed by the last `order` tokens.
std::vector<std::vector<double>> markov_transitions(const SynthSpec& spec, int content_size, const Rng& rng);

std::vector<std::string> synth_corpus(const SynthSpec& spec, const Vocabulary& vocab, const Rng& rng);

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// Padded token matrix. Rows are [CLS] content [SEP] [PAD]...; `valid` marks
/// content positions only.
struct Batch {
  IntMatrix tokens;
  IntMatrix valid;
  std::vector<Index> seq_lens;
  std::size_t truncated = 0;

  Index rows() const { return tokens.rows(); }
  Index cols() const { return tokens.cols(); }
  Index valid_count() const { return static_cast<Index>(valid.sum()); }
};

/// Frames and pads every sequence to width max_len. Content beyond
/// max_len - 2 tokens is cut; `truncated` counts the cut sequences.
Batch make_batch(const std::vector<TokenSequence>& sequences, Index max_len);

}  // namespace advmlm
