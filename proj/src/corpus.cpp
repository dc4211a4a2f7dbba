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

#include "advmlm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace advmlm {

Vocabulary::Vocabulary(std::string alphabet) : alphabet_(std::move(alphabet)) {
  if (alphabet_.empty()) throw CorpusError("vocabulary: alphabet is empty");
  std::fill(std::begin(lookup_), std::end(lookup_), kUnk);
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    const auto c = static_cast<unsigned char>(alphabet_[i]);
    if (!std::isupper(c)) throw CorpusError(std::string("vocabulary: alphabet character '") + alphabet_[i] +
                                            "' is not an uppercase letter");
    if (lookup_[c] != kUnk) throw CorpusError(std::string("vocabulary: duplicate character '") + alphabet_[i] + "'");
    lookup_[c] = kNumControl + static_cast<std::int32_t>(i);
  }
}

std::int32_t Vocabulary::id_of(char c) const {
  return lookup_[static_cast<unsigned char>(std::toupper(static_cast<unsigned char>(c)))];
}

std::string Vocabulary::token_of(std::int32_t id) const {
  switch (id) {
    case kPad:
      return "[PAD]";
    case kMask:
      return "[MASK]";
    case kCls:
      return "[CLS]";
    case kSep:
      return "[SEP]";
    case kUnk:
      return "[UNK]";
    default:
      break;
  }
  if (!is_content(id)) throw CorpusError("vocabulary: id " + std::to_string(id) + " out of range");
  return std::string(1, alphabet_[static_cast<std::size_t>(id - kNumControl)]);
}

TokenSequence Vocabulary::encode(std::string_view s) const {
  TokenSequence out;
  out.reserve(s.size());
  for (char c : s) out.push_back(id_of(c));
  return out;
}

std::string Vocabulary::decode(const TokenSequence& ids) const {
  std::string out;
  for (auto id : ids) out += token_of(id);
  return out;
}

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "fasta") return CorpusFormat::kFasta;
  if (name == "lines") return CorpusFormat::kLines;
  throw CorpusError("unknown corpus format '" + std::string(name) + "' (expected fasta or lines)");
}

namespace {

std::string normalize_line(std::string_view line) {
  std::string out;
  out.reserve(line.size());
  for (char c : line) {
    if (c == '\r' || std::isspace(static_cast<unsigned char>(c))) continue;
    out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  }
  return out;
}

}  // namespace

LoadedCorpus parse_corpus(std::string_view text, CorpusFormat format) {
  LoadedCorpus out;
  std::string current;
  bool in_record = false;
  auto flush = [&] {
    if (current.empty()) {
      ++out.dropped_empty;
    } else {
      out.sequences.push_back(std::move(current));
    }
    current.clear();
  };

  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view raw = text.substr(pos, end - pos);
    pos = end + 1;
    if (format == CorpusFormat::kFasta) {
      if (!raw.empty() && raw.front() == '>') {
        if (in_record) flush();
        in_record = true;
        continue;
      }
      const std::string line = normalize_line(raw);
      if (line.empty()) continue;
      if (!in_record) throw CorpusError("fasta: sequence data before the first '>' header");
      current += line;
    } else {
      const std::string line = normalize_line(raw);
      if (line.empty()) {
        // A trailing newline is not an empty record.
        if (pos <= text.size()) ++out.dropped_empty;
        continue;
      }
      out.sequences.push_back(line);
    }
    if (end == text.size()) break;
  }
  if (format == CorpusFormat::kFasta && in_record) flush();
  return out;
}

LoadedCorpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot read corpus file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  LoadedCorpus corpus = parse_corpus(buf.str(), format);
  if (corpus.sequences.empty()) throw CorpusError("corpus file '" + path.string() + "' holds no usable sequences");
  return corpus;
}

SynthKind parse_synth_kind(std::string_view name) {
  if (name == "uniform") return SynthKind::kUniform;
  if (name == "markov") return SynthKind::kMarkov;
  if (name == "template") return SynthKind::kTemplate;
  throw CorpusError("unknown synthetic generator '" + std::string(name) + "' (expected uniform, markov or template)");
}

namespace {

int parse_int(std::string_view s, std::string_view what) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw CorpusError("template: bad integer '" + std::string(s) + "' in " + std::string(what));
  return v;
}

}  // namespace

std::vector<TemplateSlot> parse_template(std::string_view pattern, int content_size) {
  std::vector<TemplateSlot> slots;
  std::istringstream is{std::string(pattern)};
  std::string tok;
  while (is >> tok) {
    TemplateSlot slot;
    const auto open = tok.find('['), colon = tok.find(':'), close = tok.find(']');
    if (open == std::string::npos || colon == std::string::npos || close != tok.size() - 1 || colon < open)
      throw CorpusError("template: malformed slot '" + tok + "'");
    const std::string head = tok.substr(0, open);
    if (head == "u") {
      slot.successor = false;
    } else if (head.size() > 1 && head[0] == 's') {
      slot.successor = true;
      slot.offset = parse_int(std::string_view(head).substr(1), tok);
      if (slot.offset <= 0) throw CorpusError("template: successor offset must be positive in '" + tok + "'");
    } else {
      throw CorpusError("template: slot kind must be 'u' or 's<offset>' in '" + tok + "'");
    }
    slot.lo = parse_int(std::string_view(tok).substr(open + 1, colon - open - 1), tok);
    slot.hi = parse_int(std::string_view(tok).substr(colon + 1, close - colon - 1), tok);
    if (slot.lo < 0 || slot.hi > content_size || slot.lo >= slot.hi)
      throw CorpusError("template: range of '" + tok + "' must satisfy 0 <= lo < hi <= " + std::to_string(content_size));
    slots.push_back(slot);
  }
  if (slots.empty()) throw CorpusError("template: pattern has no slots");
  return slots;
}

void SynthSpec::validate(int content_size) const {
  if (num_sequences == 0) throw CorpusError("synth: num_sequences must be positive");
  if (min_len <= 0 || max_len < min_len) throw CorpusError("synth: need 0 < min_len <= max_len");
  switch (kind) {
    case SynthKind::kMarkov:
      if (markov_order < 1 || markov_order > 3) throw CorpusError("synth: markov_order must lie in [1, 3]");
      if (markov_branching < 1 || markov_branching > content_size)
        throw CorpusError("synth: markov_branching must lie in [1, alphabet size]");
      if (!transitions.empty()) {
        if (markov_order != 1) throw CorpusError("synth: explicit transitions require markov_order 1");
        if (static_cast<int>(transitions.size()) != content_size)
          throw CorpusError("synth: transition matrix must be square over the alphabet");
        for (const auto& row : transitions) {
          if (static_cast<int>(row.size()) != content_size)
            throw CorpusError("synth: transition matrix must be square over the alphabet");
          double total = 0;
          for (double p : row) {
            if (p < 0) throw CorpusError("synth: negative transition probability");
            total += p;
          }
          if (std::abs(total - 1.0) > 1e-9) throw CorpusError("synth: transition rows must sum to 1");
        }
      }
      break;
    case SynthKind::kTemplate:
      parse_template(template_pattern, content_size);
      break;
    case SynthKind::kUniform:
      break;
  }
}

std::vector<std::vector<double>> markov_transitions(const SynthSpec& spec, int content_size, const Rng& rng) {
  if (!spec.transitions.empty()) return spec.transitions;
  Rng table_rng = rng.fork(0x7AB1E);
  std::size_t rows = 1;
  for (int i = 0; i < spec.markov_order; ++i) rows *= static_cast<std::size_t>(content_size);
  std::vector<std::vector<double>> table(rows, std::vector<double>(static_cast<std::size_t>(content_size), 0.0));
  std::vector<int> symbols(static_cast<std::size_t>(content_size));
  for (auto& row : table) {
    for (int i = 0; i < content_size; ++i) symbols[static_cast<std::size_t>(i)] = i;
    // Partial Fisher-Yates to pick `branching` distinct successors.
    double total = 0;
    std::vector<double> weights;
    for (int k = 0; k < spec.markov_branching; ++k) {
      const auto j = static_cast<std::size_t>(k) + table_rng.below(static_cast<std::uint64_t>(content_size - k));
      std::swap(symbols[static_cast<std::size_t>(k)], symbols[j]);
      weights.push_back(0.2 + table_rng.uniform());
      total += weights.back();
    }
    for (int k = 0; k < spec.markov_branching; ++k)
      row[static_cast<std::size_t>(symbols[static_cast<std::size_t>(k)])] = weights[static_cast<std::size_t>(k)] / total;
  }
  return table;
}

namespace {

int draw_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding leaves u above the last partial sum; take the last non-zero entry.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0) return static_cast<int>(i);
  return 0;
}

}  // namespace

std::vector<std::string> synth_corpus(const SynthSpec& spec, const Vocabulary& vocab, const Rng& rng) {
  const int c = vocab.content_size();
  spec.validate(c);
  std::vector<std::vector<double>> table;
  std::vector<TemplateSlot> slots;
  if (spec.kind == SynthKind::kMarkov) table = markov_transitions(spec, c, rng);
  if (spec.kind == SynthKind::kTemplate) slots = parse_template(spec.template_pattern, c);

  const std::string& alphabet = vocab.alphabet();
  std::vector<std::string> out;
  out.reserve(spec.num_sequences);
  for (std::size_t n = 0; n < spec.num_sequences; ++n) {
    Rng r = rng.fork(1, n);
    const int len = spec.min_len + static_cast<int>(r.below(static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
    std::vector<int> seq(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
      int v = 0;
      switch (spec.kind) {
        case SynthKind::kUniform:
          v = static_cast<int>(r.below(static_cast<std::uint64_t>(c)));
          break;
        case SynthKind::kMarkov: {
          if (i < spec.markov_order) {
            v = static_cast<int>(r.below(static_cast<std::uint64_t>(c)));
          } else {
            std::size_t ctx = 0;
            for (int k = spec.markov_order; k >= 1; --k)
              ctx = ctx * static_cast<std::size_t>(c) + static_cast<std::size_t>(seq[static_cast<std::size_t>(i - k)]);
            v = draw_categorical(table[ctx], r);
          }
          break;
        }
        case SynthKind::kTemplate: {
          const TemplateSlot& s = slots[static_cast<std::size_t>(i) % slots.size()];
          const int width = s.hi - s.lo;
          const int prev = s.successor && i >= s.offset ? seq[static_cast<std::size_t>(i - s.offset)] : -1;
          if (prev >= s.lo && prev < s.hi) {
            v = s.lo + (prev - s.lo + 1) % width;
          } else {
            v = s.lo + static_cast<int>(r.below(static_cast<std::uint64_t>(width)));
          }
          break;
        }
      }
      seq[static_cast<std::size_t>(i)] = v;
    }
    std::string s;
    s.reserve(seq.size());
    for (int v : seq) s.push_back(alphabet[static_cast<std::size_t>(v)]);
    out.push_back(std::move(s));
  }
  return out;
}

Batch make_batch(const std::vector<TokenSequence>& sequences, Index max_len) {
  if (max_len < 3) throw CorpusError("make_batch: max_len must leave room for [CLS] and [SEP]");
  const Index rows = static_cast<Index>(sequences.size());
  Batch b;
  b.tokens = IntMatrix::Constant(rows, max_len, Vocabulary::kPad);
  b.valid = IntMatrix::Zero(rows, max_len);
  b.seq_lens.resize(sequences.size());
  for (Index r = 0; r < rows; ++r) {
    const auto& seq = sequences[static_cast<std::size_t>(r)];
    Index len = static_cast<Index>(seq.size());
    if (len > max_len - 2) {
      len = max_len - 2;
      ++b.truncated;
    }
    b.tokens(r, 0) = Vocabulary::kCls;
    for (Index i = 0; i < len; ++i) {
      b.tokens(r, i + 1) = seq[static_cast<std::size_t>(i)];
      b.valid(r, i + 1) = 1;
    }
    b.tokens(r, len + 1) = Vocabulary::kSep;
    b.seq_lens[static_cast<std::size_t>(r)] = len;
  }
  return b;
}

}  // namespace advmlm
