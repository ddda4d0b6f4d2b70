#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "delib/model.hpp"

using namespace delib;

namespace {

ModelConfig tiny_config(DecodeMode mode) {
  ModelConfig cfg;
  cfg.mode = mode;
  cfg.first_pass_dim = 8;
  cfg.hidden_dim = 8;
  cfg.num_pool_layers = 1;
  cfg.num_dec_layers = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.dropout = 0.0;
  cfg.attn_dropout = 0.0;
  cfg.l_max = 12;
  cfg.pos_capacity = 14;
  cfg.text_pos_capacity = 12;
  return cfg;
}

Vocabulary toy_vocab() {
  return Vocabulary({"[IN:X", "[SL:Y", "]"}, {"call", "john", "jake", "jon", "now", "today"});
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Example toy_example() {
  Example ex;
  ex.gold_words = {"call", "john", "now"};
  ex.hyp_words = {"call", "jon", "now"};
  ex.parse = {"[IN:X", "[SL:Y", "john", "]", "]"};
  ex.had_asr_error = true;
  return ex;
}

}  // namespace

TEST_CASE("fusion keeps exactly T rows for any channel lengths") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  Rng rng(3);
  for (std::size_t t : {1, 2, 5, 9}) {
    for (std::size_t a : {1, 3, 7}) {
      FirstPassOutput fp;
      fp.text_tokens = std::vector<int>(t, 4);
      fp.emb_text = random_tensor({t, 8}, rng);
      fp.emb_aud = random_tensor({a, 8}, rng);
      PooledEncoding enc = model.encode(fp, ctx);
      CHECK(enc.emb_pool.rows() == t);
      CHECK(enc.emb_pool.cols() == 8);
    }
  }
}

TEST_CASE("fusion rejects channel width mismatch naming both shapes") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  Rng rng(4);
  FirstPassOutput fp;
  fp.emb_text = random_tensor({2, 8}, rng);
  fp.emb_aud = random_tensor({3, 4}, rng);
  CHECK_THROWS_WITH_AS(model.encode(fp, ctx), doctest::Contains("[3x4]"), DimensionError);
}

TEST_CASE("zero embeddings with zeroed weights give a bias-determined constant row") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  // zero every weight matrix but keep layer-norm gains
  for (auto& p : model.params.all()) {
    if (p.name.find(".gain") != std::string::npos) continue;
    for (auto& v : p.tensor.data()) v = 0.0;
  }
  FwdCtx ctx;
  FirstPassOutput fp;
  fp.emb_text = Tensor::zeros({2, 8});
  fp.emb_aud = Tensor::zeros({3, 8});
  PooledEncoding enc = model.encode(fp, ctx);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(enc.emb_pool.at(0, j) == enc.emb_pool.at(1, j));
    CHECK(std::isfinite(enc.emb_pool.at(0, j)));
  }
}

TEST_CASE("fusion output is invariant to audio frame permutation") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  Rng rng(7);
  FirstPassOutput fp;
  fp.emb_text = random_tensor({3, 8}, rng);
  fp.emb_aud = random_tensor({5, 8}, rng);
  PooledEncoding base = model.encode(fp, ctx);

  // rotate the audio rows
  std::vector<double> rot(5 * 8);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 8; ++j) rot[i * 8 + j] = fp.emb_aud.at((i + 2) % 5, j);
  }
  FirstPassOutput fp2 = fp;
  fp2.emb_aud = Tensor({5, 8}, std::move(rot));
  PooledEncoding perm = model.encode(fp2, ctx);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(perm.emb_pool.at(i, j) == doctest::Approx(base.emb_pool.at(i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("outputs at real text positions are invariant to padding") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  Rng rng(8);
  FirstPassOutput fp;
  fp.emb_text = random_tensor({3, 8}, rng);
  fp.emb_aud = random_tensor({4, 8}, rng);
  PooledEncoding base = model.encoder.fuse(fp, ctx);

  std::vector<double> padded = fp.emb_text.data();
  padded.resize(6 * 8);
  for (std::size_t i = 3 * 8; i < 6 * 8; ++i) padded[i] = rng.uniform(-5, 5);
  FirstPassOutput fp_pad = fp;
  fp_pad.emb_text = Tensor({6, 8}, std::move(padded));
  std::vector<bool> valid{true, true, true, false, false, false};
  PooledEncoding with_pad = model.encoder.fuse(fp_pad, ctx, &valid);
  REQUIRE(with_pad.emb_pool.rows() == 6);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(with_pad.emb_pool.at(i, j) == doctest::Approx(base.emb_pool.at(i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("full fusion path gradient check") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  Rng rng(9);
  Tensor emb_text = model.params.add("test.emb_text", random_tensor({3, 8}, rng));
  Tensor emb_aud = model.params.add("test.emb_aud", random_tensor({4, 8}, rng));
  Tensor w = random_tensor({8, 1}, rng);
  FwdCtx ctx;
  auto f = [&] {
    FirstPassOutput fp;
    fp.emb_text = emb_text;
    fp.emb_aud = emb_aud;
    return sum_all(matmul(model.encoder.fuse(fp, ctx).emb_pool, w));
  };
  GradCheckOptions opts;
  opts.samples_per_param = 24;
  double err = grad_check(f, model.params, opts);
  CHECK(err < 1e-3);
}

TEST_CASE("fuzzy length scaling: ceil, clamp, and capacity cap") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  auto& lh = model.length_head;

  lh.alpha = 2.0;
  bool capped = false;
  CHECK(lh.fuzzy_scale(7, &capped) == 14);
  CHECK_FALSE(capped);
  CHECK(lh.fuzzy_scale(1, nullptr) == 2);

  lh.alpha = 1.3;
  CHECK(lh.fuzzy_scale(5, nullptr) == 7);  // ceil(6.5)

  lh.alpha = 2.0;
  CHECK(lh.fuzzy_scale(12, &capped) == 14);  // capacity 14 bites
  CHECK(capped);
}

TEST_CASE("predict_length returns argmax class interpreted as a length") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  PooledEncoding enc = model.encode_example(toy_example(), ctx);
  LengthPrediction lp = model.predict_length(enc);
  CHECK(lp.predicted >= 1);
  CHECK(lp.predicted <= 12);
  CHECK(lp.fuzzy_len >= lp.predicted);
  CHECK(lp.class_log_probs.cols() == 12);
  double total = 0.0;
  for (std::size_t j = 0; j < 12; ++j) total += std::exp(lp.class_log_probs.at(0, j));
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("untrained ctc decode: contract checks and determinism") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  PooledEncoding enc = model.encode_example(toy_example(), ctx);
  LengthPrediction lp;
  lp.predicted = 5;
  lp.fuzzy_len = 10;
  CtcOutput out = model.decode_ctc(enc, lp);
  CHECK(out.raw_tokens.size() == 10);
  CHECK(out.collapsed.size() <= 10);
  for (int t : out.collapsed) CHECK(t != Vocabulary::kBlank);

  CtcOutput again = model.decode_ctc(enc, lp);
  CHECK(again.raw_tokens == out.raw_tokens);
  CHECK(again.collapsed == out.collapsed);
}

TEST_CASE("static-shape readout: ctc output is a prefix-read of capacity slots") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  PooledEncoding enc = model.encode_example(toy_example(), ctx);
  Tensor full = model.nar.infer_logits(enc.emb_pool, model.nar.capacity);
  Tensor firstk = model.nar.infer_logits(enc.emb_pool, 6);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < model.vocab.size(); ++j) {
      CHECK(firstk.at(i, j) == full.at(i, j));
    }
  }
}

TEST_CASE("mask-predict emits exactly the predicted length, blank-free") {
  SluModel model(tiny_config(DecodeMode::mask_predict), toy_vocab());
  FwdCtx ctx;
  PooledEncoding enc = model.encode_example(toy_example(), ctx);
  for (int n : {1, 3, 7}) {
    LengthPrediction lp;
    lp.predicted = n;
    lp.fuzzy_len = n;
    auto out = model.decode_mask_predict(enc, lp);
    CHECK(out.size() == static_cast<std::size_t>(n));
    for (int t : out) CHECK(t != Vocabulary::kBlank);
  }
}

TEST_CASE("autoregressive decode: eos-biased params emit nothing") {
  SluModel model(tiny_config(DecodeMode::autoregressive), toy_vocab());
  model.params.get("ar.out_proj.b").data()[Vocabulary::kEos] = 50.0;
  FwdCtx ctx;
  PooledEncoding enc = model.encode_example(toy_example(), ctx);
  auto res = model.decode_autoregressive(enc, 10);
  CHECK(res.tokens.empty());
  CHECK(res.invocations == 1);
}

TEST_CASE("forced-length decode costs exactly n+1 invocations") {
  SluModel model(tiny_config(DecodeMode::autoregressive), toy_vocab());
  FwdCtx ctx;
  PooledEncoding enc = model.encode_example(toy_example(), ctx);
  for (std::size_t n : {1u, 4u, 9u}) {
    auto res = model.decode_autoregressive_forced(enc, n, model.vocab.require("call"));
    CHECK(res.invocations == n + 1);
    CHECK(res.tokens.size() == n);
  }
}

TEST_CASE("embed_first_pass shape contract and channel separation") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  Example ex = toy_example();
  FirstPassOutput fp = model.embed_first_pass(ex, ctx);
  CHECK(fp.emb_text.rows() == ex.hyp_words.size());
  CHECK(fp.emb_aud.rows() == ex.gold_words.size());
  CHECK(fp.had_asr_error);

  // hyp == gold: the two channels encode the same word sequence through
  // different tables, so the embeddings still differ
  Example clean = ex;
  clean.hyp_words = clean.gold_words;
  clean.had_asr_error = false;
  FirstPassOutput fpc = model.embed_first_pass(clean, ctx);
  CHECK(fpc.emb_text.rows() == fpc.emb_aud.rows());
  bool differ = false;
  for (std::size_t i = 0; i < fpc.emb_text.numel(); ++i) {
    differ |= std::fabs(fpc.emb_text.data()[i] - fpc.emb_aud.data()[i]) > 1e-9;
  }
  CHECK(differ);
}

TEST_CASE("corrupting one word changes emb_text at exactly that position") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  Tensor base = model.first_pass.embed_text(model.vocab.encode({"call", "john", "now"}), ctx);
  Tensor corrupt = model.first_pass.embed_text(model.vocab.encode({"call", "jon", "now"}), ctx);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(base.at(0, j) == corrupt.at(0, j));
    CHECK(base.at(2, j) == corrupt.at(2, j));
  }
  bool changed = false;
  for (std::size_t j = 0; j < 8; ++j) changed |= base.at(1, j) != corrupt.at(1, j);
  CHECK(changed);
}

TEST_CASE("text capacity overflow raises a clear error") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  FwdCtx ctx;
  std::vector<int> too_long(13, 4);
  CHECK_THROWS_AS(model.first_pass.embed(too_long, {4}, false, ctx), UsageError);
}

TEST_CASE("checkpoint round-trips bit-exactly and reproduces predictions") {
  SluModel model(tiny_config(DecodeMode::ctc), toy_vocab());
  Example ex = toy_example();
  auto before = model.predict_parse(ex);

  const auto path = std::filesystem::temp_directory_path() / "delib_model_test.ckpt";
  model.save(path.string());
  SluModel loaded = SluModel::load(path.string());

  REQUIRE(loaded.params.all().size() == model.params.all().size());
  for (std::size_t i = 0; i < model.params.all().size(); ++i) {
    const auto& a = model.params.all()[i];
    const auto& b = loaded.params.all()[i];
    CHECK(a.name == b.name);
    CHECK(a.tensor.data() == b.tensor.data());  // bit-exact
  }
  CHECK(loaded.cfg.alpha == model.cfg.alpha);
  CHECK(loaded.vocab.tokens() == model.vocab.tokens());
  CHECK(loaded.predict_parse(ex) == before);
  std::filesystem::remove(path);
}

TEST_CASE("ctc mode requires alpha > 1") {
  ModelConfig cfg = tiny_config(DecodeMode::ctc);
  cfg.alpha = 1.0;
  CHECK_THROWS_AS(SluModel(cfg, toy_vocab()), UsageError);
  cfg.mode = DecodeMode::mask_predict;
  CHECK_NOTHROW(SluModel(cfg, toy_vocab()));
}
