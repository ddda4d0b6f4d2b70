#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "delib/checkpoint.hpp"
#include "delib/corpus.hpp"
#include "delib/ctc.hpp"
#include "delib/nn.hpp"
#include "delib/tensor.hpp"
#include "delib/vocab.hpp"

namespace delib {

enum class DecodeMode { ctc, mask_predict, autoregressive };

inline std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::ctc: return "ctc";
    case DecodeMode::mask_predict: return "mask_predict";
    case DecodeMode::autoregressive: return "autoregressive";
  }
  return "ctc";
}

inline DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "ctc") return DecodeMode::ctc;
  if (s == "mask_predict") return DecodeMode::mask_predict;
  if (s == "autoregressive") return DecodeMode::autoregressive;
  throw UsageError("unknown decoder mode '" + s + "'");
}

struct ModelConfig {
  DecodeMode mode = DecodeMode::ctc;
  std::size_t first_pass_dim = 48;  // channel embedding width D
  std::size_t hidden_dim = 64;      // model width D'
  std::size_t num_pool_layers = 3;
  std::size_t num_dec_layers = 1;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  double dropout = 0.1;       // encoder/residual dropout
  double attn_dropout = 0.1;  // attention-probability dropout (decoder side)
  double alpha = 2.0;         // fuzzy length scale, > 1 in ctc mode
  std::size_t l_max = 32;            // length classifier classes (lengths 1..l_max)
  std::size_t pos_capacity = 48;     // decoder positional capacity
  std::size_t text_pos_capacity = 24;
  std::uint64_t init_seed = 1;

  void validate() const {
    if (hidden_dim == 0 || hidden_dim % num_heads != 0) {
      throw UsageError("hidden_dim must be a positive multiple of num_heads");
    }
    if (first_pass_dim == 0 || first_pass_dim % num_heads != 0) {
      throw UsageError("first_pass_dim must be a positive multiple of num_heads");
    }
    if (dropout < 0 || dropout >= 1 || attn_dropout < 0 || attn_dropout >= 1) {
      throw UsageError("dropout rates must lie in [0, 1)");
    }
    if (mode == DecodeMode::ctc && alpha <= 1.0) {
      throw UsageError("ctc mode requires fuzzy length scale alpha > 1");
    }
    if (l_max < 1 || pos_capacity < 1 || text_pos_capacity < 1) {
      throw UsageError("capacities must be >= 1");
    }
  }

  Json to_json() const {
    return Json{{"mode", to_string(mode)},
                {"first_pass_dim", first_pass_dim},
                {"hidden_dim", hidden_dim},
                {"num_pool_layers", num_pool_layers},
                {"num_dec_layers", num_dec_layers},
                {"num_heads", num_heads},
                {"ffn_dim", ffn_dim},
                {"dropout", dropout},
                {"attn_dropout", attn_dropout},
                {"alpha", alpha},
                {"l_max", l_max},
                {"pos_capacity", pos_capacity},
                {"text_pos_capacity", text_pos_capacity},
                {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const Json& j) {
    ModelConfig c;
    c.mode = decode_mode_from_string(j.value("mode", "ctc"));
    c.first_pass_dim = j.value("first_pass_dim", c.first_pass_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.num_pool_layers = j.value("num_pool_layers", c.num_pool_layers);
    c.num_dec_layers = j.value("num_dec_layers", c.num_dec_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.dropout = j.value("dropout", c.dropout);
    c.attn_dropout = j.value("attn_dropout", c.attn_dropout);
    c.alpha = j.value("alpha", c.alpha);
    c.l_max = j.value("l_max", c.l_max);
    c.pos_capacity = j.value("pos_capacity", c.pos_capacity);
    c.text_pos_capacity = j.value("text_pos_capacity", c.text_pos_capacity);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.validate();
    return c;
  }
};

/// Interface between the (simulated) first pass and the deliberation encoder.
struct FirstPassOutput {
  std::vector<int> text_tokens;  // length T
  Tensor emb_text;               // [T x D]
  Tensor emb_aud;                // [A x D]
  bool had_asr_error = false;
};

struct PooledEncoding {
  Tensor emb_pool;  // [T x D']
  std::size_t text_len = 0;
};

struct LengthPrediction {
  Tensor class_log_probs;  // [1 x L_max]
  int predicted = 1;       // argmax class, interpreted as a length
  int fuzzy_len = 1;       // ceil(alpha * predicted), clamped and capped
  bool capped = false;     // fuzzy_len hit the decoder positional capacity
};

/// Simulated first pass: the text channel embeds the (possibly corrupted)
/// hypothesis; the audio channel embeds gold-transcript units through a
/// separate table plus one self-attention layer, standing in for acoustic
/// frames. Learned positions are added to both channels here, before fusion.
struct FirstPassEmbedder {
  Embedding text_embed, audio_embed, text_pos, audio_pos;
  TransformerEncoderLayer audio_ctx;

  FirstPassEmbedder() = default;
  FirstPassEmbedder(ParameterStore& ps, const ModelConfig& cfg, std::size_t vocab_size,
                    Rng& rng) {
    const std::size_t d = cfg.first_pass_dim;
    text_embed = Embedding(ps, "first_pass.text_embed", vocab_size, d, rng);
    audio_embed = Embedding(ps, "first_pass.audio_embed", vocab_size, d, rng);
    text_pos = Embedding(ps, "first_pass.text_pos", cfg.text_pos_capacity, d, rng);
    audio_pos = Embedding(ps, "first_pass.audio_pos", cfg.text_pos_capacity, d, rng);
    audio_ctx = TransformerEncoderLayer(ps, "first_pass.audio_ctx", d, cfg.num_heads,
                                        2 * d, cfg.dropout, cfg.attn_dropout, rng);
  }

  Tensor embed_text(const std::vector<int>& hyp_ids, const FwdCtx& ctx) const {
    (void)ctx;
    if (hyp_ids.size() > text_pos.capacity()) {
      throw UsageError("text sequence of " + std::to_string(hyp_ids.size()) +
                       " exceeds positional capacity " + std::to_string(text_pos.capacity()));
    }
    return add(text_embed.forward(hyp_ids), text_pos.forward(iota_ids(hyp_ids.size())));
  }

  FirstPassOutput embed(const std::vector<int>& hyp_ids, const std::vector<int>& gold_ids,
                        bool had_asr_error, const FwdCtx& ctx) const {
    std::vector<int> text_ids = hyp_ids.empty() ? std::vector<int>{Vocabulary::kUnk} : hyp_ids;
    if (gold_ids.empty()) throw UsageError("audio channel requires at least one unit");
    if (gold_ids.size() > audio_pos.capacity()) {
      throw UsageError("audio sequence of " + std::to_string(gold_ids.size()) +
                       " exceeds positional capacity " + std::to_string(audio_pos.capacity()));
    }
    FirstPassOutput fp;
    fp.text_tokens = text_ids;
    fp.emb_text = embed_text(text_ids, ctx);
    Tensor aud = add(audio_embed.forward(gold_ids), audio_pos.forward(iota_ids(gold_ids.size())));
    fp.emb_aud = audio_ctx.forward(aud, ctx);
    fp.had_asr_error = had_asr_error;
    return fp;
  }
};

/// Second-pass deliberation encoder: cross-attention fusion of the text
/// channel over the audio channel, stack, linear projection, then
/// self-attention pooling layers. Output keeps exactly T rows.
struct FusionEncoder {
  Linear text_adapter, audio_adapter;  // D -> D' per channel
  MultiHeadAttention cross;
  Linear fuse_proj;  // 2D' -> D'
  std::vector<TransformerEncoderLayer> pool;
  LayerNormParams final_ln;
  double residual_dropout = 0.0;

  FusionEncoder() = default;
  FusionEncoder(ParameterStore& ps, const ModelConfig& cfg, Rng& rng)
      : residual_dropout(cfg.dropout) {
    const std::size_t d = cfg.first_pass_dim, h = cfg.hidden_dim;
    text_adapter = Linear(ps, "encoder.text_adapter", d, h, rng);
    audio_adapter = Linear(ps, "encoder.audio_adapter", d, h, rng);
    cross = MultiHeadAttention(ps, "encoder.cross", h, cfg.num_heads, cfg.attn_dropout, rng);
    fuse_proj = Linear(ps, "encoder.fuse_proj", 2 * h, h, rng);
    for (std::size_t i = 0; i < cfg.num_pool_layers; ++i) {
      pool.emplace_back(ps, "encoder.pool" + std::to_string(i), h, cfg.num_heads, cfg.ffn_dim,
                        cfg.dropout, cfg.attn_dropout, rng);
    }
    final_ln = LayerNormParams(ps, "encoder.final_ln", h);
  }

  PooledEncoding fuse(const FirstPassOutput& fp, const FwdCtx& ctx,
                      const std::vector<bool>* text_valid = nullptr) const {
    if (fp.emb_text.cols() != fp.emb_aud.cols()) {
      throw DimensionError("channel width mismatch: text " + shape_str(fp.emb_text.shape()) +
                           " vs audio " + shape_str(fp.emb_aud.shape()));
    }
    Tensor text = text_adapter.forward(fp.emb_text);
    Tensor audio = audio_adapter.forward(fp.emb_aud);
    Tensor attn = cross.forward(text, audio, ctx);           // [T x D']
    Tensor stacked = concat_cols(text, attn);                // [T x 2D']
    Tensor fused = fuse_proj.forward(stacked);               // [T x D']
    fused = maybe_dropout(fused, residual_dropout, ctx);
    for (const auto& layer : pool) fused = layer.forward(fused, ctx, text_valid);
    return PooledEncoding{final_ln.forward(fused), fp.emb_text.rows()};
  }
};

/// Length classifier over {1..L_max} with the fuzzy scale applied on top.
struct LengthPredictor {
  Linear proj;
  double alpha = 2.0;
  std::size_t l_max = 32;
  std::size_t pos_capacity = 48;

  LengthPredictor() = default;
  LengthPredictor(ParameterStore& ps, const ModelConfig& cfg, Rng& rng)
      : alpha(cfg.alpha), l_max(cfg.l_max), pos_capacity(cfg.pos_capacity) {
    proj = Linear(ps, "length_head.proj", cfg.hidden_dim, cfg.l_max, rng);
  }

  Tensor class_log_probs(const PooledEncoding& enc) const {
    return log_softmax_rows(proj.forward(mean_rows(enc.emb_pool)));
  }

  int fuzzy_scale(int predicted, bool* capped) const {
    long l = static_cast<long>(std::ceil(alpha * static_cast<double>(predicted)));
    const long hi = static_cast<long>(l_max) * static_cast<long>(std::ceil(alpha));
    l = std::max(1L, std::min(l, hi));
    bool cap = false;
    if (l > static_cast<long>(pos_capacity)) {
      l = static_cast<long>(pos_capacity);
      cap = true;
    }
    if (capped) *capped = cap;
    return static_cast<int>(l);
  }

  LengthPrediction predict(const PooledEncoding& enc) const {
    LengthPrediction out;
    out.class_log_probs = class_log_probs(enc);
    std::size_t best = 0;
    for (std::size_t j = 1; j < l_max; ++j) {
      if (out.class_log_probs.at(0, j) > out.class_log_probs.at(0, best)) best = j;
    }
    out.predicted = static_cast<int>(best) + 1;
    out.fuzzy_len = fuzzy_scale(out.predicted, &out.capped);
    return out;
  }
};

/// Non-autoregressive decoder over MASK slots: a dedicated learned embedding
/// shared across positions, distinguished only by positional embeddings.
/// Inference always runs the full positional capacity (static shape) and
/// reads the first l rows, so decode cost does not depend on l.
struct NarDecoder {
  Tensor mask_embed;  // [1 x D']
  Embedding pos;
  std::vector<TransformerDecoderLayer> layers;
  LayerNormParams final_ln;
  Linear out_proj;
  std::size_t capacity = 0;

  NarDecoder() = default;
  NarDecoder(ParameterStore& ps, const ModelConfig& cfg, std::size_t vocab_size, Rng& rng)
      : capacity(cfg.pos_capacity) {
    const std::size_t h = cfg.hidden_dim;
    mask_embed = ps.add("nar.mask_embed", init_normal({1, h}, 0.02, rng));
    pos = Embedding(ps, "nar.pos", cfg.pos_capacity, h, rng);
    for (std::size_t i = 0; i < cfg.num_dec_layers; ++i) {
      layers.emplace_back(ps, "nar.layer" + std::to_string(i), h, cfg.num_heads, cfg.ffn_dim,
                          cfg.dropout, cfg.attn_dropout, rng);
    }
    final_ln = LayerNormParams(ps, "nar.final_ln", h);
    out_proj = Linear(ps, "nar.out_proj", h, vocab_size, rng);
  }

  /// Logits over the full static slot block. The decoder always computes its
  /// whole positional capacity so the same attention pattern backs training
  /// and inference, and decode cost is independent of the readout width.
  Tensor forward_full(const Tensor& memory, const FwdCtx& ctx) const {
    Tensor x = add(gather_rows(mask_embed, std::vector<int>(capacity, 0)),
                   pos.forward(iota_ids(capacity)));
    for (const auto& layer : layers) x = layer.forward(x, memory, ctx, /*causal=*/false);
    return out_proj.forward(final_ln.forward(x));
  }

  /// Static forward, reading the first `read_rows` positions.
  Tensor forward_read(const Tensor& memory, std::size_t read_rows, const FwdCtx& ctx) const {
    if (read_rows < 1 || read_rows > capacity) {
      throw UsageError("nar decoder: reading " + std::to_string(read_rows) +
                       " rows outside [1, " + std::to_string(capacity) + "]");
    }
    Tensor full = forward_full(memory, ctx);
    return read_rows == capacity ? full : slice_rows(full, 0, read_rows);
  }

  Tensor infer_logits(const Tensor& memory, std::size_t l) const {
    FwdCtx ctx;  // eval
    return forward_read(memory, l, ctx);
  }
};

/// Left-to-right decoder; each emitted token costs one full forward over the
/// current prefix (no state caching), which is the latency profile under study.
struct ArDecoder {
  Embedding tok_embed, pos;
  std::vector<TransformerDecoderLayer> layers;
  LayerNormParams final_ln;
  Linear out_proj;
  std::size_t capacity = 0;

  ArDecoder() = default;
  ArDecoder(ParameterStore& ps, const ModelConfig& cfg, std::size_t vocab_size, Rng& rng)
      : capacity(cfg.pos_capacity) {
    const std::size_t h = cfg.hidden_dim;
    tok_embed = Embedding(ps, "ar.tok_embed", vocab_size, h, rng);
    pos = Embedding(ps, "ar.pos", cfg.pos_capacity, h, rng);
    for (std::size_t i = 0; i < cfg.num_dec_layers; ++i) {
      layers.emplace_back(ps, "ar.layer" + std::to_string(i), h, cfg.num_heads, cfg.ffn_dim,
                          cfg.dropout, cfg.attn_dropout, rng);
    }
    final_ln = LayerNormParams(ps, "ar.final_ln", h);
    out_proj = Linear(ps, "ar.out_proj", h, vocab_size, rng);
  }

  Tensor forward(const Tensor& memory, const std::vector<int>& input_ids,
                 const FwdCtx& ctx) const {
    if (input_ids.empty() || input_ids.size() > capacity) {
      throw UsageError("ar decoder: prefix length " + std::to_string(input_ids.size()) +
                       " outside [1, " + std::to_string(capacity) + "]");
    }
    Tensor x = add(tok_embed.forward(input_ids), pos.forward(iota_ids(input_ids.size())));
    for (const auto& layer : layers) x = layer.forward(x, memory, ctx, /*causal=*/true);
    return out_proj.forward(final_ln.forward(x));
  }
};

struct ArDecodeResult {
  std::vector<int> tokens;
  std::size_t invocations = 0;
};

/// The full second-pass model for one decoding mode.
class SluModel {
 public:
  ModelConfig cfg;
  Vocabulary vocab;
  ParameterStore params;
  FirstPassEmbedder first_pass;
  FusionEncoder encoder;
  LengthPredictor length_head;
  NarDecoder nar;
  ArDecoder ar;

  SluModel(ModelConfig config, Vocabulary vocabulary)
      : cfg(std::move(config)), vocab(std::move(vocabulary)) {
    cfg.validate();
    Rng rng(derive_seed(cfg.init_seed, 0x1417ULL));
    first_pass = FirstPassEmbedder(params, cfg, vocab.size(), rng);
    encoder = FusionEncoder(params, cfg, rng);
    if (cfg.mode == DecodeMode::autoregressive) {
      ar = ArDecoder(params, cfg, vocab.size(), rng);
    } else {
      length_head = LengthPredictor(params, cfg, rng);
      nar = NarDecoder(params, cfg, vocab.size(), rng);
    }
  }

  FirstPassOutput embed_first_pass(const Words& hyp_words, const Words& gold_words,
                                   bool had_asr_error, const FwdCtx& ctx) const {
    return first_pass.embed(vocab.encode(hyp_words), vocab.encode(gold_words), had_asr_error,
                            ctx);
  }

  FirstPassOutput embed_first_pass(const Example& ex, const FwdCtx& ctx) const {
    return embed_first_pass(ex.hyp_words, ex.gold_words, ex.had_asr_error, ctx);
  }

  PooledEncoding encode(const FirstPassOutput& fp, const FwdCtx& ctx) const {
    return encoder.fuse(fp, ctx);
  }

  PooledEncoding encode_example(const Example& ex, const FwdCtx& ctx) const {
    return encode(embed_first_pass(ex, ctx), ctx);
  }

  // -- inference ------------------------------------------------------------

  LengthPrediction predict_length(const PooledEncoding& enc) const {
    NoGradGuard ng;
    return length_head.predict(enc);
  }

  CtcOutput decode_ctc(const PooledEncoding& enc, const LengthPrediction& lp) const {
    NoGradGuard ng;
    Tensor logits = nar.infer_logits(enc.emb_pool, static_cast<std::size_t>(lp.fuzzy_len));
    return greedy_decode(logits, Vocabulary::kBlank);
  }

  /// Emits exactly lp.predicted tokens by per-position argmax over the
  /// blank-free vocabulary.
  std::vector<int> decode_mask_predict(const PooledEncoding& enc,
                                       const LengthPrediction& lp) const {
    NoGradGuard ng;
    const std::size_t n = std::min<std::size_t>(
        std::max(1, lp.predicted), nar.capacity);
    Tensor logits = nar.infer_logits(enc.emb_pool, n);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 1;  // skip blank column
      for (std::size_t j = 2; j < vocab.size(); ++j) {
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      }
      out[i] = static_cast<int>(best);
    }
    return out;
  }

  /// Greedy left-to-right decode, one full prefix forward per emitted token.
  ArDecodeResult decode_autoregressive(const PooledEncoding& enc, std::size_t max_len) const {
    NoGradGuard ng;
    if (max_len < 1) throw UsageError("decode_autoregressive: max_len must be >= 1");
    max_len = std::min(max_len, ar.capacity - 1);
    ArDecodeResult res;
    std::vector<int> prefix{Vocabulary::kBos};
    FwdCtx ctx;
    while (res.tokens.size() < max_len) {
      Tensor logits = ar.forward(enc.emb_pool, prefix, ctx);
      ++res.invocations;
      const std::size_t last = logits.rows() - 1;
      std::size_t best = 0;
      for (std::size_t j = 1; j < vocab.size(); ++j) {
        if (logits.at(last, j) > logits.at(last, best)) best = j;
      }
      if (static_cast<int>(best) == Vocabulary::kEos) break;
      res.tokens.push_back(static_cast<int>(best));
      prefix.push_back(static_cast<int>(best));
    }
    return res;
  }

  /// Forced-length variant for the latency study: emits exactly n tokens and
  /// performs exactly n+1 decoder invocations.
  ArDecodeResult decode_autoregressive_forced(const PooledEncoding& enc, std::size_t n,
                                              int fill_token) const {
    NoGradGuard ng;
    if (n + 1 > ar.capacity) {
      throw UsageError("forced decode of " + std::to_string(n) + " exceeds capacity");
    }
    ArDecodeResult res;
    std::vector<int> prefix{Vocabulary::kBos};
    FwdCtx ctx;
    for (std::size_t i = 0; i <= n; ++i) {
      Tensor logits = ar.forward(enc.emb_pool, prefix, ctx);
      ++res.invocations;
      if (i < n) {
        res.tokens.push_back(fill_token);
        prefix.push_back(fill_token);
      }
    }
    return res;
  }

  /// Mode-appropriate prediction for evaluation.
  std::vector<int> predict_parse(const Example& ex) const {
    NoGradGuard ng;
    FwdCtx ctx;
    PooledEncoding enc = encode_example(ex, ctx);
    switch (cfg.mode) {
      case DecodeMode::ctc:
        return decode_ctc(enc, predict_length(enc)).collapsed;
      case DecodeMode::mask_predict:
        return decode_mask_predict(enc, predict_length(enc));
      case DecodeMode::autoregressive:
        return decode_autoregressive(enc, ar.capacity - 1).tokens;
    }
    return {};
  }

  // -- persistence ------------------------------------------------------------

  void save(const std::string& path) const {
    Json meta = {{"format", 1},
                 {"config", cfg.to_json()},
                 {"vocab", {{"tokens", vocab.tokens()}, {"ontology_count", vocab.ontology_count()}}}};
    save_checkpoint(path, meta.dump(), params);
  }

  static SluModel load(const std::string& path) {
    CheckpointData data = load_checkpoint(path);
    Json meta;
    try {
      meta = Json::parse(data.meta_json);
    } catch (const Json::exception& e) {
      throw UsageError("checkpoint '" + path + "': bad metadata: " + e.what());
    }
    ModelConfig cfg = ModelConfig::from_json(meta.at("config"));
    Vocabulary vocab(meta.at("vocab").at("tokens").get<std::vector<std::string>>(),
                     meta.at("vocab").at("ontology_count").get<std::size_t>());
    SluModel model(cfg, vocab);
    restore_parameters(data, model.params);
    return model;
  }
};

}  // namespace delib
