#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "delib/harness.hpp"

using namespace delib;

namespace {

ModelConfig bench_config(DecodeMode mode) {
  ModelConfig cfg;
  cfg.mode = mode;
  cfg.first_pass_dim = 16;
  cfg.hidden_dim = 16;
  cfg.num_pool_layers = 1;
  cfg.num_dec_layers = mode == DecodeMode::autoregressive ? 2 : 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.dropout = 0.0;
  cfg.attn_dropout = 0.0;
  cfg.l_max = 32;
  cfg.pos_capacity = 56;
  cfg.text_pos_capacity = 16;
  return cfg;
}

Example probe_example() {
  Example ex;
  ex.gold_words = {"remind", "me", "to", "call", "john", "today"};
  ex.hyp_words = ex.gold_words;
  ex.parse = split_words("[IN:CREATE_REMINDER [SL:TODO call john ] [SL:DATETIME today ] ]");
  return ex;
}

}  // namespace

TEST_CASE("exact_match is strict sequence equality") {
  CHECK(exact_match({1, 2, 3}, {1, 2, 3}));
  CHECK_FALSE(exact_match({1, 2, 3, 4}, {1, 2, 3}));   // one extra trailing token
  CHECK_FALSE(exact_match({1, 3, 2}, {1, 2, 3}));      // same multiset, different order
  CHECK(exact_match({}, {}));
}

TEST_CASE("evaluate: oracle predictions give EM 1.0, empty predictions give 0") {
  auto ds = generate(default_grammar_spec(), 60, 5);
  auto vocab = build_vocabulary(default_grammar_spec());
  std::vector<const Example*> all;
  for (const auto& ex : ds.examples) all.push_back(&ex);

  EvalReport oracle = evaluate_with(all, vocab, [&](const Example& ex) {
    return vocab.encode(ex.parse);
  });
  CHECK(oracle.em_total == 1.0);
  CHECK(oracle.em_asr_error == 1.0);
  CHECK(oracle.em_no_asr_error == 1.0);

  EvalReport empty = evaluate_with(all, vocab, [&](const Example&) {
    return std::vector<int>{};
  });
  CHECK(empty.em_total == 0.0);
}

TEST_CASE("EvalReport weighted-mean identity holds to 1e-12") {
  auto ds = generate(default_grammar_spec(), 200, 7);
  auto vocab = build_vocabulary(default_grammar_spec());
  std::vector<const Example*> all;
  for (const auto& ex : ds.examples) all.push_back(&ex);
  // a predictor that succeeds only on clean short parses, to mix buckets
  EvalReport rep = evaluate_with(all, vocab, [&](const Example& ex) {
    if (ex.parse.size() <= 8) return vocab.encode(ex.parse);
    return std::vector<int>{};
  });
  CHECK(rep.weighted_mean_gap() < 1e-12);
  CHECK(rep.n_total == rep.n_asr_error + rep.n_no_asr_error);
}

TEST_CASE("fit_line recovers a known line and R2") {
  std::vector<double> xs{1, 2, 3, 4, 5};
  std::vector<double> ys{3, 5, 7, 9, 11};  // y = 2x + 1
  auto fit = fit_line(xs, ys);
  CHECK(fit.slope == doctest::Approx(2.0));
  CHECK(fit.intercept == doctest::Approx(1.0));
  CHECK(fit.r2 == doctest::Approx(1.0));
}

TEST_CASE("bench_latency validates its preconditions") {
  SluModel model(bench_config(DecodeMode::ctc), build_vocabulary(default_grammar_spec()));
  BenchOptions opts;
  opts.runs = 10;
  CHECK_THROWS_AS(bench_latency(model, probe_example(), opts), UsageError);
  opts.runs = 50;
  opts.warmup = 2;
  CHECK_THROWS_AS(bench_latency(model, probe_example(), opts), UsageError);
}

TEST_CASE("bench_latency on untrained checkpoints: shape of the profiles") {
  auto vocab = build_vocabulary(default_grammar_spec());
  SluModel ar(bench_config(DecodeMode::autoregressive), vocab);
  SluModel ctc(bench_config(DecodeMode::ctc), vocab);
  BenchOptions opts;
  opts.lengths = {5, 20, 40};
  opts.runs = 50;
  opts.warmup = 5;
  auto pa = bench_latency(ar, probe_example(), opts);
  auto pc = bench_latency(ctc, probe_example(), opts);
  REQUIRE(pa.buckets.size() == 3);
  REQUIRE(pc.buckets.size() == 3);
  for (const auto& b : pa.buckets) CHECK(b.runs_us.size() == 50);

  // AR cost grows with length; static NAR cost does not
  CHECK(pa.bucket_at(40).mean_us > pa.bucket_at(5).mean_us * 2);
  CHECK(pc.bucket_at(40).mean_us < pc.bucket_at(5).mean_us * 1.5);
  CHECK(pa.ar_fit.slope > 0);

  const auto path = std::filesystem::temp_directory_path() / "delib_latency.csv";
  save_latency_csv({pa, pc}, path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "mode,length,run,micros");
  std::size_t lines = 0;
  std::string row;
  while (std::getline(in, row)) ++lines;
  CHECK(lines == 2 * 3 * 50);
  std::filesystem::remove(path);
}

TEST_CASE("eval CSV schema") {
  auto ds = generate(default_grammar_spec(), 10, 9);
  auto vocab = build_vocabulary(default_grammar_spec());
  std::vector<const Example*> all;
  for (const auto& ex : ds.examples) all.push_back(&ex);
  EvalReport rep = evaluate_with(all, vocab, [&](const Example& ex) {
    return vocab.encode(ex.parse);
  });
  const auto path = std::filesystem::temp_directory_path() / "delib_eval.csv";
  save_eval_csv(rep, path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "example_id,bucket,match");
  std::filesystem::remove(path);
}

TEST_CASE("reachability bookkeeping at alpha=2 covers >= 99% of the eval set") {
  auto ds = generate(default_grammar_spec(), 2000, 11);
  auto vocab = build_vocabulary(default_grammar_spec());
  CHECK(reachable_fraction(ds, vocab, 2.0, "test") >= 0.99);
  // alpha=1.1 leaves the nested templates structurally unreachable
  CHECK(reachable_fraction(ds, vocab, 1.1, "test") < 0.9);
}

TEST_CASE("mean_em aggregates sweep rows per variant") {
  std::vector<SweepRow> rows{{"a", 1, 0.5, 0.2, 0.6},
                             {"a", 2, 0.7, 0.4, 0.8},
                             {"b", 1, 0.1, 0.0, 0.2}};
  CHECK(mean_em(rows, "a", &SweepRow::em_total) == doctest::Approx(0.6));
  CHECK(mean_em(rows, "b", &SweepRow::em_error) == doctest::Approx(0.0));
  CHECK_THROWS_AS(mean_em(rows, "zzz", &SweepRow::em_total), UsageError);
  const auto path = std::filesystem::temp_directory_path() / "delib_sweep.csv";
  save_sweep_csv(rows, path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "variant,seed,em_total,em_error,em_clean");
  std::filesystem::remove(path);
}
