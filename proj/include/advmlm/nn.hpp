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

// Network building blocks: linear maps, a masked multi-layer GRU, a pre-norm
// transformer encoder and the MLM output head.
//
// Every weight and bias starts uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
// Layer-norm gains start at 1 and offsets at 0.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "advmlm/ops.hpp"
#include "advmlm/rng.hpp"
#include "advmlm/tensor.hpp"
#include "advmlm/types.hpp"

namespace advmlm {

template <class S>
struct NamedParameter {
  std::string name;
  Tensor<S> tensor;
};

template <class S>
using ParameterList = std::vector<NamedParameter<S>>;

template <class S>
void set_requires_grad(ParameterList<S>& params, bool on) {
  for (auto& p : params) p.tensor.set_requires_grad(on);
}

template <class S>
void zero_grad(ParameterList<S>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <class S>
Tensor<S> uniform_parameter(Shape shape, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  const Index n = numel(shape);
  typename Tensor<S>::Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = static_cast<S>(rng.uniform(-bound, bound));
  return Tensor<S>(std::move(shape), std::move(a), true);
}

template <class S>
class Linear {
 public:
  Linear() = default;
  Linear(Index in, Index out, Rng& rng)
      : weight(uniform_parameter<S>({in, out}, in, rng)), bias(uniform_parameter<S>({out}, in, rng)) {}

  /// x[..., in] -> [..., out]
  Tensor<S> operator()(const Tensor<S>& x) const { return add(matmul(x, weight), bias); }

  void collect(const std::string& prefix, ParameterList<S>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }

  Tensor<S> weight;
  Tensor<S> bias;
};

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Hard path: rows of `table` selected by token id.
template <class S>
Tensor<S> embed_ids(const IntMatrix& ids, const Tensor<S>& table) {
  return embedding_lookup(table, flatten_ids(ids), Shape{ids.rows(), ids.cols()});
}

/// Soft path: x[..., V] * table[V, d]. Rows of x must be distributions.
template <class S>
Tensor<S> embed_soft(const Tensor<S>& x, const Tensor<S>& table) {
  require(x.dim(-1) == table.dim(0), "embed_soft: last dim " + std::to_string(x.dim(-1)) +
                                         " != vocabulary size " + std::to_string(table.dim(0)));
  const Index v = x.dim(-1);
  const auto& xv = x.value();
  for (Index r = 0; r < x.size() / v; ++r) {
    const S row_sum = xv.segment(r * v, v).sum();
    require(std::abs(static_cast<double>(row_sum) - 1.0) <= 1e-4, "embed_soft: input row does not sum to 1");
  }
  return matmul(x, table);
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

struct GruConfig {
  int num_layers = 3;
  Index embed_dim = 128;
  Index hidden_dim = 64;
  bool bidirectional = true;

  void validate() const {
    require(num_layers > 0 && embed_dim > 0 && hidden_dim > 0, "GruConfig: dimensions must be positive");
  }
  Index output_dim() const { return hidden_dim * (bidirectional ? 2 : 1); }
};

/// Weights of one GRU direction in one layer. Gate blocks are ordered
/// [reset | update | candidate] along the 3H axis.
template <class S>
struct GruCellWeights {
  Tensor<S> w_ih;  // [in, 3H]
  Tensor<S> b_ih;  // [3H]
  Tensor<S> w_hh;  // [H, 3H]
  Tensor<S> b_hh;  // [3H]

  GruCellWeights() = default;
  GruCellWeights(Index in, Index hidden, Rng& rng)
      : w_ih(uniform_parameter<S>({in, 3 * hidden}, in, rng)),
        b_ih(uniform_parameter<S>({3 * hidden}, in, rng)),
        w_hh(uniform_parameter<S>({hidden, 3 * hidden}, hidden, rng)),
        b_hh(uniform_parameter<S>({3 * hidden}, hidden, rng)) {}

  Index hidden() const { return w_hh.dim(0); }

  void collect(const std::string& prefix, ParameterList<S>& out) const {
    out.push_back({prefix + ".w_ih", w_ih});
    out.push_back({prefix + ".b_ih", b_ih});
    out.push_back({prefix + ".w_hh", w_hh});
    out.push_back({prefix + ".b_hh", b_hh});
  }
};

/// One recurrence step given the precomputed input projection x*W_ih + b_ih.
///   r = sigmoid(xr + hr), z = sigmoid(xz + hz), n = tanh(xn + r * hn)
///   h' = (1 - z) * n + z * h
template <class S>
Tensor<S> gru_step(const Tensor<S>& x_proj, const Tensor<S>& h, const GruCellWeights<S>& w) {
  const Index hd = w.hidden();
  const Tensor<S> h_proj = add(matmul(h, w.w_hh), w.b_hh);
  const Tensor<S> r = sigmoid(add(narrow(x_proj, -1, 0, hd), narrow(h_proj, -1, 0, hd)));
  const Tensor<S> z = sigmoid(add(narrow(x_proj, -1, hd, hd), narrow(h_proj, -1, hd, hd)));
  const Tensor<S> n = tanh(add(narrow(x_proj, -1, 2 * hd, hd), mul(r, narrow(h_proj, -1, 2 * hd, hd))));
  return add(n, mul(z, sub(h, n)));
}

/// GRU cell applied to raw input x[B, in] and state h[B, H].
template <class S>
Tensor<S> gru_cell(const Tensor<S>& x, const Tensor<S>& h, const GruCellWeights<S>& w) {
  return gru_step(add(matmul(x, w.w_ih), w.b_ih), h, w);
}

/// Multi-layer (optionally bidirectional) GRU over padded batches.
///
/// At an invalid position the state is carried unchanged and the output is
/// zero. Padding sits on the right, so the reverse direction starts from a
/// zero state at the last valid token.
template <class S>
class Gru {
 public:
  Gru() = default;
  Gru(const GruConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    Index in = cfg.embed_dim;
    for (int l = 0; l < cfg.num_layers; ++l) {
      forward_.emplace_back(in, cfg.hidden_dim, rng);
      if (cfg.bidirectional) backward_.emplace_back(in, cfg.hidden_dim, rng);
      in = cfg.output_dim();
    }
  }

  const GruConfig& config() const { return cfg_; }
  const GruCellWeights<S>& forward_weights(int layer) const { return forward_[static_cast<std::size_t>(layer)]; }
  const GruCellWeights<S>& backward_weights(int layer) const { return backward_[static_cast<std::size_t>(layer)]; }

  /// x[B, T, embed_dim], valid[B, T] -> [B, T, output_dim]
  Tensor<S> operator()(const Tensor<S>& x, const IntMatrix& valid) const {
    require(x.rank() == 3 && x.dim(0) == valid.rows() && x.dim(1) == valid.cols(),
            "gru: input " + shape_str(x.shape()) + " does not match mask");
    require(((valid == 0) || (valid == 1)).all(), "gru: mask entries must be 0 or 1");
    const Index batch = x.dim(0), steps = x.dim(1);
    std::vector<Tensor<S>> step_masks;
    step_masks.reserve(static_cast<std::size_t>(steps));
    for (Index t = 0; t < steps; ++t) {
      typename Tensor<S>::Array m(batch);
      for (Index b = 0; b < batch; ++b) m[b] = static_cast<S>(valid(b, t));
      step_masks.emplace_back(Shape{batch, 1}, std::move(m));
    }
    Tensor<S> layer_in = x;
    for (int l = 0; l < cfg_.num_layers; ++l) {
      std::vector<Tensor<S>> dirs{run_direction(layer_in, step_masks, forward_[static_cast<std::size_t>(l)], false)};
      if (cfg_.bidirectional)
        dirs.push_back(run_direction(layer_in, step_masks, backward_[static_cast<std::size_t>(l)], true));
      layer_in = dirs.size() == 1 ? dirs.front() : concat(dirs, -1);
    }
    return layer_in;
  }

  void collect(const std::string& prefix, ParameterList<S>& out) const {
    for (std::size_t l = 0; l < forward_.size(); ++l) {
      forward_[l].collect(prefix + ".l" + std::to_string(l) + ".fwd", out);
      if (cfg_.bidirectional) backward_[l].collect(prefix + ".l" + std::to_string(l) + ".bwd", out);
    }
  }

 private:
  static Tensor<S> run_direction(const Tensor<S>& x, const std::vector<Tensor<S>>& masks,
                                 const GruCellWeights<S>& w, bool reverse) {
    const Index batch = x.dim(0), steps = x.dim(1), hd = w.hidden();
    const Tensor<S> x_proj = add(matmul(x, w.w_ih), w.b_ih);  // [B, T, 3H]
    Tensor<S> h = Tensor<S>::zeros({batch, hd});
    std::vector<Tensor<S>> outputs(static_cast<std::size_t>(steps));
    for (Index k = 0; k < steps; ++k) {
      const Index t = reverse ? steps - 1 - k : k;
      const Tensor<S>& m = masks[static_cast<std::size_t>(t)];
      if ((m.value() == S(0)).all()) {
        outputs[static_cast<std::size_t>(t)] = Tensor<S>::zeros({batch, hd});
        continue;
      }
      const Tensor<S> cand = gru_step(select(x_proj, 1, t), h, w);
      h = add(h, mul(m, sub(cand, h)));
      outputs[static_cast<std::size_t>(t)] = mul(m, h);
    }
    return stack(outputs, 1);
  }

  GruConfig cfg_;
  std::vector<GruCellWeights<S>> forward_;
  std::vector<GruCellWeights<S>> backward_;
};

// ---------------------------------------------------------------------------
// Transformer encoder
// ---------------------------------------------------------------------------

struct TransformerConfig {
  int num_layers = 4;
  int num_heads = 4;
  Index model_dim = 128;
  Index ff_dim = 512;
  Index max_seq_len = 256;
  double dropout_rate = 0.1;

  void validate() const {
    require(num_layers > 0 && num_heads > 0 && model_dim > 0 && ff_dim > 0 && max_seq_len > 0,
            "TransformerConfig: dimensions must be positive");
    require(model_dim % num_heads == 0, "TransformerConfig: model_dim must be divisible by num_heads");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "TransformerConfig: dropout_rate must lie in [0, 1)");
  }
};

template <class S>
struct EncoderBlock {
  Tensor<S> ln1_gain, ln1_bias;
  Linear<S> qkv;
  Linear<S> attn_out;
  Tensor<S> ln2_gain, ln2_bias;
  Linear<S> ff_in;
  Linear<S> ff_out;

  EncoderBlock() = default;
  EncoderBlock(const TransformerConfig& cfg, Rng& rng)
      : ln1_gain(Tensor<S>::ones({cfg.model_dim}, true)),
        ln1_bias(Tensor<S>::zeros({cfg.model_dim}, true)),
        qkv(cfg.model_dim, 3 * cfg.model_dim, rng),
        attn_out(cfg.model_dim, cfg.model_dim, rng),
        ln2_gain(Tensor<S>::ones({cfg.model_dim}, true)),
        ln2_bias(Tensor<S>::zeros({cfg.model_dim}, true)),
        ff_in(cfg.model_dim, cfg.ff_dim, rng),
        ff_out(cfg.ff_dim, cfg.model_dim, rng) {}

  void collect(const std::string& prefix, ParameterList<S>& out) const {
    out.push_back({prefix + ".ln1.gain", ln1_gain});
    out.push_back({prefix + ".ln1.bias", ln1_bias});
    qkv.collect(prefix + ".qkv", out);
    attn_out.collect(prefix + ".attn_out", out);
    out.push_back({prefix + ".ln2.gain", ln2_gain});
    out.push_back({prefix + ".ln2.bias", ln2_bias});
    ff_in.collect(prefix + ".ff_in", out);
    ff_out.collect(prefix + ".ff_out", out);
  }
};

/// Multi-head self-attention; keys at positions with key_keep == 0 get
/// exactly zero weight. x[B, T, d], key_keep[B, 1, 1, T].
template <class S>
Tensor<S> self_attention(const Tensor<S>& x, const Tensor<S>& key_keep, const Linear<S>& qkv,
                         const Linear<S>& out, int heads) {
  const Index batch = x.dim(0), steps = x.dim(1), d = x.dim(2), hd = d / heads;
  const Tensor<S> proj = qkv(x);
  auto split_heads = [&](Index offset) {
    return permute(reshape(narrow(proj, -1, offset, d), {batch, steps, heads, hd}), {0, 2, 1, 3});
  };
  const Tensor<S> q = split_heads(0), k = split_heads(d), v = split_heads(2 * d);
  const Tensor<S> scores = mul_scalar(matmul(q, transpose(k)), S(1) / std::sqrt(static_cast<S>(hd)));
  const Tensor<S> weights = masked_softmax(scores, key_keep);
  const Tensor<S> ctx = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {batch, steps, d});
  return out(ctx);
}

/// Pre-norm encoder block: x + Attn(LN(x)), then h + FF(LN(h)).
template <class S>
Tensor<S> encoder_block(const Tensor<S>& x, const Tensor<S>& key_keep, const EncoderBlock<S>& blk, int heads,
                        double dropout_rate, Rng* dropout_rng) {
  Tensor<S> a = self_attention(layer_norm(x, blk.ln1_gain, blk.ln1_bias), key_keep, blk.qkv, blk.attn_out, heads);
  if (dropout_rng) a = dropout(a, dropout_rate, *dropout_rng);
  const Tensor<S> h = add(x, a);
  Tensor<S> f = blk.ff_out(relu(blk.ff_in(layer_norm(h, blk.ln2_gain, blk.ln2_bias))));
  if (dropout_rng) f = dropout(f, dropout_rate, *dropout_rng);
  return add(h, f);
}

/// The pre-training encoder: soft token embedding, learned positions,
/// transformer blocks and a vocabulary-sized output head.
template <class S>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(const TransformerConfig& cfg, Index vocab_size, Rng& rng)
      : cfg_((cfg.validate(), cfg)),
        token_table_(uniform_parameter<S>({vocab_size, cfg.model_dim}, vocab_size, rng)),
        positions_(uniform_parameter<S>({cfg.max_seq_len, cfg.model_dim}, cfg.max_seq_len, rng)) {
    for (int l = 0; l < cfg.num_layers; ++l) blocks_.emplace_back(cfg, rng);
    head_ = Linear<S>(cfg.model_dim, vocab_size, rng);
  }

  const TransformerConfig& config() const { return cfg_; }
  Index vocab_size() const { return token_table_.dim(0); }
  const Tensor<S>& token_table() const { return token_table_; }
  const std::vector<EncoderBlock<S>>& blocks() const { return blocks_; }
  const Linear<S>& head() const { return head_; }

  /// x_soft[B, T, V] -> [B, T, d] including positional terms.
  Tensor<S> embed(const Tensor<S>& x_soft) const {
    const Index steps = x_soft.dim(1);
    require(steps <= cfg_.max_seq_len, "transformer: sequence length " + std::to_string(steps) +
                                           " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    return add(embed_soft(x_soft, token_table_), narrow(positions_, 0, 0, steps));
  }

  /// Runs the blocks. Dropout is applied only when `dropout_rng` is non-null.
  Tensor<S> forward(const Tensor<S>& x_embedded, const IntMatrix& valid, Rng* dropout_rng = nullptr) const {
    require(x_embedded.rank() == 3 && x_embedded.dim(0) == valid.rows() && x_embedded.dim(1) == valid.cols(),
            "transformer: input " + shape_str(x_embedded.shape()) + " does not match mask");
    require(x_embedded.dim(1) <= cfg_.max_seq_len, "transformer: sequence longer than max_seq_len");
    const Tensor<S> key_keep = mask_tensor<S>(valid, {valid.rows(), 1, 1, valid.cols()});
    Tensor<S> h = x_embedded;
    for (const auto& blk : blocks_) h = encoder_block(h, key_keep, blk, cfg_.num_heads, cfg_.dropout_rate, dropout_rng);
    return h;
  }

  /// h[B, T, d] -> unnormalized logits [B, T, V] over the whole vocabulary.
  Tensor<S> mlm_head(const Tensor<S>& h) const { return head_(h); }

  Tensor<S> logits(const Tensor<S>& x_soft, const IntMatrix& valid, Rng* dropout_rng = nullptr) const {
    return mlm_head(forward(embed(x_soft), valid, dropout_rng));
  }

  ParameterList<S> parameters() const {
    ParameterList<S> out;
    out.push_back({"encoder.token_table", token_table_});
    out.push_back({"encoder.positions", positions_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("encoder.block" + std::to_string(l), out);
    head_.collect("encoder.head", out);
    return out;
  }

 private:
  TransformerConfig cfg_;
  Tensor<S> token_table_;
  Tensor<S> positions_;
  std::vector<EncoderBlock<S>> blocks_;
  Linear<S> head_;
};

}  // namespace advmlm
