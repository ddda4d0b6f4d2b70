#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "delib/rng.hpp"
#include "delib/tensor.hpp"

namespace delib {

/// Per-forward context: training toggles dropout, rng drives the masks.
struct FwdCtx {
  bool training = false;
  Rng* rng = nullptr;
};

inline Tensor maybe_dropout(const Tensor& x, double rate, const FwdCtx& ctx) {
  if (!ctx.training || rate == 0.0) return x;
  return dropout(x, rate, *ctx.rng);
}

inline std::vector<int> iota_ids(std::size_t n, int start = 0) {
  std::vector<int> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = start + static_cast<int>(i);
  return ids;
}

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParameterStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
         Rng& rng) {
    w = ps.add(prefix + ".w", init_uniform_fanin({in, out}, in, rng));
    b = ps.add(prefix + ".b", Tensor::zeros({out}));
  }
  Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }
};

struct LayerNormParams {
  Tensor gain, bias;
  double eps = 1e-5;
  LayerNormParams() = default;
  LayerNormParams(ParameterStore& ps, const std::string& prefix, std::size_t dim) {
    gain = ps.add(prefix + ".gain", Tensor::full({dim}, 1.0));
    bias = ps.add(prefix + ".bias", Tensor::zeros({dim}));
  }
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

struct Embedding {
  Tensor table;
  Embedding() = default;
  Embedding(ParameterStore& ps, const std::string& prefix, std::size_t vocab, std::size_t dim,
            Rng& rng) {
    table = ps.add(prefix + ".table", init_normal({vocab, dim}, 0.02, rng));
  }
  Tensor forward(const std::vector<int>& ids) const { return gather_rows(table, ids); }
  std::size_t capacity() const { return table.rows(); }
};

/// Additive attention mask: 0 where attention is allowed, -1e30 where not.
/// Finite sentinel keeps the NaN/Inf guard intact.
constexpr double kMaskedScore = -1e30;

inline Tensor attention_mask(std::size_t rows, std::size_t cols, bool causal,
                             const std::vector<bool>* key_valid) {
  std::vector<double> m(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const bool blocked = (causal && j > i) || (key_valid && !(*key_valid)[j]);
      if (blocked) m[i * cols + j] = kMaskedScore;
    }
  }
  return Tensor({rows, cols}, std::move(m));
}

struct MultiHeadAttention {
  std::size_t dim = 0, heads = 1, head_dim = 0;
  double attn_dropout = 0.0;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& ps, const std::string& prefix, std::size_t dim_,
                     std::size_t heads_, double attn_dropout_, Rng& rng)
      : dim(dim_), heads(heads_), head_dim(dim_ / heads_), attn_dropout(attn_dropout_) {
    if (dim % heads != 0) {
      throw UsageError("attention dim " + std::to_string(dim) + " not divisible by " +
                       std::to_string(heads) + " heads");
    }
    wq = Linear(ps, prefix + ".wq", dim, dim, rng);
    wk = Linear(ps, prefix + ".wk", dim, dim, rng);
    wv = Linear(ps, prefix + ".wv", dim, dim, rng);
    wo = Linear(ps, prefix + ".wo", dim, dim, rng);
  }

  Tensor forward(const Tensor& query_in, const Tensor& kv_in, const FwdCtx& ctx,
                 bool causal = false, const std::vector<bool>* key_valid = nullptr) const {
    const Tensor q = wq.forward(query_in);
    const Tensor k = wk.forward(kv_in);
    const Tensor v = wv.forward(kv_in);
    Tensor mask;
    if (causal || key_valid) {
      mask = attention_mask(q.rows(), k.rows(), causal, key_valid);
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Tensor merged;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(q, h * head_dim, head_dim);
      Tensor kh = slice_cols(k, h * head_dim, head_dim);
      Tensor vh = slice_cols(v, h * head_dim, head_dim);
      Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
      if (mask.defined()) scores = add(scores, mask);
      Tensor probs = softmax(scores, -1);
      probs = maybe_dropout(probs, attn_dropout, ctx);
      Tensor oh = matmul(probs, vh);
      merged = h == 0 ? oh : concat_cols(merged, oh);
    }
    return wo.forward(merged);
  }
};

struct FeedForward {
  Linear up, down;
  double hidden_dropout = 0.0;
  FeedForward() = default;
  FeedForward(ParameterStore& ps, const std::string& prefix, std::size_t dim, std::size_t ffn_dim,
              double hidden_dropout_, Rng& rng)
      : hidden_dropout(hidden_dropout_) {
    up = Linear(ps, prefix + ".up", dim, ffn_dim, rng);
    down = Linear(ps, prefix + ".down", ffn_dim, dim, rng);
  }
  Tensor forward(const Tensor& x, const FwdCtx& ctx) const {
    return down.forward(maybe_dropout(relu(up.forward(x)), hidden_dropout, ctx));
  }
};

/// Pre-norm self-attention encoder block.
struct TransformerEncoderLayer {
  LayerNormParams ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ffn;
  double residual_dropout = 0.0;

  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(ParameterStore& ps, const std::string& prefix, std::size_t dim,
                          std::size_t heads, std::size_t ffn_dim, double dropout_rate,
                          double attn_dropout, Rng& rng)
      : residual_dropout(dropout_rate) {
    ln1 = LayerNormParams(ps, prefix + ".ln1", dim);
    ln2 = LayerNormParams(ps, prefix + ".ln2", dim);
    attn = MultiHeadAttention(ps, prefix + ".attn", dim, heads, attn_dropout, rng);
    ffn = FeedForward(ps, prefix + ".ffn", dim, ffn_dim, dropout_rate, rng);
  }

  Tensor forward(const Tensor& x, const FwdCtx& ctx,
                 const std::vector<bool>* key_valid = nullptr) const {
    Tensor h1 = ln1.forward(x);
    Tensor y = add(x, maybe_dropout(attn.forward(h1, h1, ctx, false, key_valid), residual_dropout,
                                    ctx));
    Tensor h2 = ln2.forward(y);
    return add(y, maybe_dropout(ffn.forward(h2, ctx), residual_dropout, ctx));
  }
};

/// Pre-norm decoder block: self-attention, cross-attention to a memory
/// sequence, feed-forward.
struct TransformerDecoderLayer {
  LayerNormParams ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
  double residual_dropout = 0.0;

  TransformerDecoderLayer() = default;
  TransformerDecoderLayer(ParameterStore& ps, const std::string& prefix, std::size_t dim,
                          std::size_t heads, std::size_t ffn_dim, double dropout_rate,
                          double attn_dropout, Rng& rng)
      : residual_dropout(dropout_rate) {
    ln1 = LayerNormParams(ps, prefix + ".ln1", dim);
    ln2 = LayerNormParams(ps, prefix + ".ln2", dim);
    ln3 = LayerNormParams(ps, prefix + ".ln3", dim);
    self_attn = MultiHeadAttention(ps, prefix + ".self", dim, heads, attn_dropout, rng);
    cross_attn = MultiHeadAttention(ps, prefix + ".cross", dim, heads, attn_dropout, rng);
    ffn = FeedForward(ps, prefix + ".ffn", dim, ffn_dim, dropout_rate, rng);
  }

  Tensor forward(const Tensor& x, const Tensor& memory, const FwdCtx& ctx, bool causal) const {
    Tensor h1 = ln1.forward(x);
    Tensor y = add(x, maybe_dropout(self_attn.forward(h1, h1, ctx, causal), residual_dropout, ctx));
    Tensor h2 = ln2.forward(y);
    y = add(y, maybe_dropout(cross_attn.forward(h2, memory, ctx), residual_dropout, ctx));
    Tensor h3 = ln3.forward(y);
    return add(y, maybe_dropout(ffn.forward(h3, ctx), residual_dropout, ctx));
  }
};

}  // namespace delib
