#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "delib/training.hpp"

using namespace delib;

namespace {

ModelConfig small_config(DecodeMode mode) {
  ModelConfig cfg;
  cfg.mode = mode;
  cfg.first_pass_dim = 16;
  cfg.hidden_dim = 16;
  cfg.num_pool_layers = 1;
  cfg.num_dec_layers = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.dropout = 0.0;
  cfg.attn_dropout = 0.0;
  cfg.l_max = 16;
  cfg.pos_capacity = 32;
  cfg.text_pos_capacity = 16;
  return cfg;
}

TrainConfig small_train(DecodeMode mode, std::size_t epochs, double peak_lr) {
  TrainConfig tc;
  tc.model = small_config(mode);
  tc.noise = NoiseSpec{0.0, 0.0, NoiseMeta::none, 0};
  tc.loss.label_smoothing_eps = 0.05;
  tc.schedule = ScheduleSpec{1, static_cast<double>(epochs), 0, peak_lr, peak_lr * 0.1};
  tc.epochs = epochs;
  tc.batch_size = 8;
  tc.seed = 5;
  return tc;
}

Dataset tiny_dataset(std::size_t n, std::uint64_t seed) {
  auto spec = default_grammar_spec();
  auto ds = generate(spec, n, seed);
  for (auto& ex : ds.examples) ex.split = "train";
  // carve out a small eval slice
  for (std::size_t i = 0; i < ds.examples.size(); i += 5) ds.examples[i].split = "valid";
  return ds;
}

}  // namespace

TEST_CASE("tri-stage schedule boundary values") {
  ScheduleSpec s{10, 40, 95, 0.00085, 1e-5};
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(5, s) == doctest::Approx(0.000425));
  for (double e : {10.0, 25.0, 50.0}) CHECK(lr_at(e, s) == 0.00085);
  CHECK(std::fabs(lr_at(145, s) - 1e-5) < 1e-9);  // end of decay hits the floor
  CHECK(lr_at(1000, s) == 1e-5);                  // beyond the schedule
  // decay is monotone between hold end and floor
  double prev = lr_at(50, s);
  for (double e = 55; e < 145; e += 10) {
    const double cur = lr_at(e, s);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("combine_losses weighted sum and lambda endpoints") {
  Tensor label = Tensor::scalar(2.0);
  Tensor length = Tensor::scalar(1.0);
  LossWeights w;
  w.lambda = 0.2504;
  CHECK(combine_losses(label, length, w).item() == doctest::Approx(2.2504).epsilon(1e-15));
  w.lambda = 0.0;
  CHECK(combine_losses(label, length, w).item() == 2.0);  // bitwise
}

TEST_CASE("eps=0 smoothing reduces to plain NLL bitwise") {
  Rng rng(3);
  std::vector<double> logits(6 * 5);
  for (auto& x : logits) x = rng.uniform(-1, 1);
  Tensor lp = log_softmax_rows(Tensor({6, 5}, std::move(logits)));
  const std::vector<int> target{1, 2, 3};
  Tensor plain = ctc_loss(lp, target, 0).nll;
  Tensor smoothed = smoothed_ctc_label_loss(lp, target, 0.0);
  CHECK(smoothed.item() == plain.item());
}

TEST_CASE("uniform_kl matches the hand formula") {
  Rng rng(4);
  std::vector<double> logits(3 * 4);
  for (auto& x : logits) x = rng.uniform(-2, 2);
  Tensor lp = log_softmax_rows(Tensor({3, 4}, std::move(logits)));
  double manual = 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    double row = 0.0;
    for (std::size_t v = 0; v < 4; ++v) row -= lp.at(t, v) / 4.0;
    manual += row - std::log(4.0);
  }
  manual /= 3.0;
  CHECK(uniform_kl(lp).item() == doctest::Approx(manual).epsilon(1e-12));
  CHECK(uniform_kl(lp).item() >= 0.0);
}

TEST_CASE("zero learning rate leaves parameters bit-exact") {
  auto ds = tiny_dataset(10, 2);
  auto tc = small_train(DecodeMode::ctc, 1, 0.0);
  auto vocab = build_vocabulary(default_grammar_spec());
  SluModel model(tc.model, vocab);
  std::vector<std::vector<double>> before;
  for (const auto& p : model.params.all()) before.push_back(p.tensor.data());
  ConfusionDictionary dict;
  train(model, tc, ds, dict);
  for (std::size_t i = 0; i < model.params.all().size(); ++i) {
    CHECK(model.params.all()[i].tensor.data() == before[i]);
  }
}

TEST_CASE("zero epochs keeps the initialization") {
  auto ds = tiny_dataset(10, 2);
  auto tc = small_train(DecodeMode::ctc, 0, 1e-3);
  auto vocab = build_vocabulary(default_grammar_spec());
  SluModel model(tc.model, vocab);
  std::vector<std::vector<double>> before;
  for (const auto& p : model.params.all()) before.push_back(p.tensor.data());
  ConfusionDictionary dict;
  auto res = train(model, tc, ds, dict);
  CHECK(res.history.empty());
  for (std::size_t i = 0; i < model.params.all().size(); ++i) {
    CHECK(model.params.all()[i].tensor.data() == before[i]);
  }
}

TEST_CASE("same config and seed reproduce the metrics history exactly") {
  auto ds = tiny_dataset(24, 9);
  auto vocab = build_vocabulary(default_grammar_spec());
  ConfusionDictionary dict;
  dict.add("john", "jon", 2);
  auto tc = small_train(DecodeMode::ctc, 3, 2e-3);
  tc.noise = NoiseSpec{0.05, 0.2, NoiseMeta::sampling, 11};
  tc.model.dropout = 0.1;

  SluModel a(tc.model, vocab);
  auto ra = train(a, tc, ds, dict);
  SluModel b(tc.model, vocab);
  auto rb = train(b, tc, ds, dict);
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    CHECK(ra.history[i].train_loss == rb.history[i].train_loss);
    CHECK(ra.history[i].eval_em == rb.history[i].eval_em);
  }
  for (std::size_t i = 0; i < a.params.all().size(); ++i) {
    CHECK(a.params.all()[i].tensor.data() == b.params.all()[i].tensor.data());
  }
}

TEST_CASE("loss decreases over the first epochs of the default task") {
  auto ds = tiny_dataset(60, 21);
  auto vocab = build_vocabulary(default_grammar_spec());
  ConfusionDictionary dict;
  auto tc = small_train(DecodeMode::ctc, 6, 2e-3);
  SluModel model(tc.model, vocab);
  auto res = train(model, tc, ds, dict);
  CHECK(res.history.front().train_loss > res.history.back().train_loss);
}

TEST_CASE("joint loss gradients pass grad_check in every mode") {
  auto spec = default_grammar_spec();
  auto vocab = build_vocabulary(spec);
  auto ds = generate(spec, 4, 31);
  LossWeights w;
  w.lambda = 0.2504;
  w.label_smoothing_eps = 0.1;
  for (DecodeMode mode :
       {DecodeMode::ctc, DecodeMode::mask_predict, DecodeMode::autoregressive}) {
    SluModel model(small_config(mode), vocab);
    FwdCtx ctx;  // eval ctx: no dropout, deterministic forward for grad probes
    auto f = [&] {
      Tensor total = Tensor::scalar(0.0);
      for (const auto& ex : ds.examples) {
        auto el = example_loss(model, ex, ex.hyp_words, w, ctx);
        REQUIRE_FALSE(el.skipped);
        total = add(total, el.total);
      }
      return scale(total, 1.0 / static_cast<double>(ds.examples.size()));
    };
    GradCheckOptions opts;
    opts.samples_per_param = 6;
    opts.sample_seed = 77;
    double err = grad_check(f, model.params, opts);
    CAPTURE(to_string(mode));
    CHECK(err < 1e-3);
  }
}

TEST_CASE("infeasible fuzzy budgets are skipped and counted") {
  auto vocab = build_vocabulary(default_grammar_spec());
  auto tc = small_train(DecodeMode::ctc, 1, 1e-3);
  tc.model.alpha = 1.05;  // ceil(1.05 n) < n + repeats for nested parses
  SluModel model(tc.model, vocab);
  Dataset ds;
  for (int i = 0; i < 20; ++i) {
    Example ex;
    ex.gold_words = {"remind", "me", "to", "message", "kate", "about", "hello"};
    ex.hyp_words = ex.gold_words;
    ex.parse = split_words(
        "[IN:CREATE_REMINDER [SL:TODO [IN:SEND_MESSAGE [SL:RECIPIENT kate ] [SL:CONTENT hello ] "
        "] ] ]");
    ex.split = "train";
    ds.examples.push_back(ex);
  }
  ConfusionDictionary dict;
  auto res = train(model, tc, ds, dict);
  CHECK(res.skipped_infeasible == 20);
}

TEST_CASE("metrics CSV round-trips through the documented schema") {
  std::vector<EpochMetrics> h{{0, 1e-3, 2.5, 0.5, 0.25, 0.75}, {1, 9e-4, 1.5, 0.6, 0.3, 0.8}};
  const auto path = std::filesystem::temp_directory_path() / "delib_metrics.csv";
  save_metrics_csv(h, path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,lr,train_loss,eval_em,em_on_error_split,em_on_clean_split");
  std::string row;
  std::getline(in, row);
  CHECK(row.substr(0, 2) == "0,");
  std::filesystem::remove(path);
}

TEST_CASE("train config JSON defaults carry the documented values") {
  TrainConfig tc;
  CHECK(tc.loss.lambda == 0.2504);
  CHECK(tc.model.alpha == 2.0);
  CHECK(tc.noise.substitution_p == 0.0882);
  CHECK(tc.noise.deletion_p == 0.0026);
  CHECK(tc.schedule.peak_lr == 0.00085);
  CHECK(tc.schedule.warmup_epochs == 10);
  CHECK(tc.schedule.hold_epochs == 40);
  CHECK(tc.schedule.decay_epochs == 95);
  // round-trip
  auto j = tc.to_json();
  auto back = TrainConfig::from_json(j);
  CHECK(back.loss.lambda == tc.loss.lambda);
  CHECK(back.schedule.peak_lr == tc.schedule.peak_lr);
  CHECK(to_string(back.noise.meta) == to_string(tc.noise.meta));
}

TEST_CASE("memorization: a small model overfits a handful of examples") {
  auto spec = default_grammar_spec();
  spec.channel.substitution_rate = 0;
  spec.channel.deletion_rate = 0;
  auto ds = generate(spec, 12, 3);
  for (auto& ex : ds.examples) ex.split = "train";
  auto vocab = build_vocabulary(spec);
  auto tc = small_train(DecodeMode::ctc, 150, 3e-3);
  tc.model.first_pass_dim = 32;
  tc.model.hidden_dim = 32;
  tc.model.num_heads = 4;
  tc.model.ffn_dim = 64;
  tc.batch_size = 4;
  tc.schedule = ScheduleSpec{5, 145, 0, 3e-3, 3e-4};
  SluModel model(tc.model, vocab);
  ConfusionDictionary dict;
  train(model, tc, ds, dict, "train");
  EvalReport rep = evaluate(model, ds.split("train"));
  CHECK(rep.em_total == 1.0);
}
