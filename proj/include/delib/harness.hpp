#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "delib/eval.hpp"
#include "delib/model.hpp"
#include "delib/training.hpp"

namespace delib {

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

inline LinearFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw UsageError("fit_line: need >= 2 points");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  LinearFit fit;
  const double denom = n * sxx - sx * sx;
  fit.slope = (n * sxy - sx * sy) / denom;
  fit.intercept = (sy - fit.slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  const double mean_y = sy / n;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double pred = fit.slope * xs[i] + fit.intercept;
    ss_res += (ys[i] - pred) * (ys[i] - pred);
    ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
  }
  fit.r2 = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
  return fit;
}

struct LatencyBucket {
  std::size_t length = 0;
  double mean_us = 0.0;
  double median_us = 0.0;
  double p95_us = 0.0;
  bool inner_loop_batched = false;
  std::vector<double> runs_us;
};

struct LatencyProfile {
  std::string mode;
  std::vector<LatencyBucket> buckets;
  LinearFit ar_fit;  // slope/R^2 of mean latency vs length (AR study)

  const LatencyBucket& bucket_at(std::size_t length) const {
    for (const auto& b : buckets) {
      if (b.length == length) return b;
    }
    throw UsageError("no latency bucket for length " + std::to_string(length));
  }
};

namespace bench_detail {

inline double timer_resolution_us() {
  using clock = std::chrono::steady_clock;
  double best = 1e9;
  for (int i = 0; i < 16; ++i) {
    auto a = clock::now();
    auto b = clock::now();
    while (b == a) b = clock::now();
    best = std::min(best, std::chrono::duration<double, std::micro>(b - a).count());
  }
  return std::max(best, 1e-3);
}

template <typename F>
double time_us(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::micro>(t1 - t0).count();
}

}  // namespace bench_detail

struct BenchOptions {
  std::vector<std::size_t> lengths{5, 10, 15, 20, 25, 30, 35, 40, 45, 50};
  std::size_t runs = 50;
  std::size_t warmup = 5;
};

/// Times decoder forwards only (the pooled encoding is computed once outside
/// the timed region). AR buckets force exactly `length` emitted tokens; NAR
/// buckets pin the length module output to `length`. If the timer cannot
/// resolve a single decode, the bucket reruns with an inner loop and
/// per-iteration division, flagged in the result.
inline LatencyProfile bench_latency(const SluModel& model, const Example& probe,
                                    const BenchOptions& opts = {}) {
  if (opts.runs < 50) throw UsageError("bench_latency: at least 50 runs required");
  if (opts.warmup < 5) throw UsageError("bench_latency: at least 5 warmup iterations required");
  FwdCtx ctx;
  const PooledEncoding enc = model.encode_example(probe, ctx);
  const int fill = static_cast<int>(model.vocab.size()) - 1;
  const double min_timed_us = 200.0 * bench_detail::timer_resolution_us();

  LatencyProfile profile;
  profile.mode = to_string(model.cfg.mode);
  for (const std::size_t length : opts.lengths) {
    auto decode_once = [&] {
      switch (model.cfg.mode) {
        case DecodeMode::autoregressive: {
          auto res = model.decode_autoregressive_forced(enc, length, fill);
          (void)res;
          break;
        }
        case DecodeMode::ctc: {
          LengthPrediction lp;
          lp.predicted = static_cast<int>(length);
          lp.fuzzy_len = model.length_head.fuzzy_scale(lp.predicted, &lp.capped);
          auto out = model.decode_ctc(enc, lp);
          (void)out;
          break;
        }
        case DecodeMode::mask_predict: {
          LengthPrediction lp;
          lp.predicted = static_cast<int>(length);
          lp.fuzzy_len = lp.predicted;
          auto out = model.decode_mask_predict(enc, lp);
          (void)out;
          break;
        }
      }
    };

    for (std::size_t i = 0; i < opts.warmup; ++i) decode_once();

    LatencyBucket bucket;
    bucket.length = length;
    const double probe_us = bench_detail::time_us(decode_once);
    std::size_t inner = 1;
    if (probe_us < min_timed_us) {
      inner = static_cast<std::size_t>(std::ceil(min_timed_us / std::max(probe_us, 1e-3)));
      bucket.inner_loop_batched = true;
    }
    bucket.runs_us.reserve(opts.runs);
    for (std::size_t r = 0; r < opts.runs; ++r) {
      const double us = bench_detail::time_us([&] {
        for (std::size_t k = 0; k < inner; ++k) decode_once();
      });
      bucket.runs_us.push_back(us / static_cast<double>(inner));
    }
    std::vector<double> sorted = bucket.runs_us;
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    for (double v : sorted) total += v;
    bucket.mean_us = total / static_cast<double>(sorted.size());
    bucket.median_us = sorted[sorted.size() / 2];
    bucket.p95_us = sorted[std::min(sorted.size() - 1,
                                    static_cast<std::size_t>(sorted.size() * 95 / 100))];
    profile.buckets.push_back(std::move(bucket));
  }

  if (profile.buckets.size() >= 2) {
    std::vector<double> xs, ys;
    for (const auto& b : profile.buckets) {
      xs.push_back(static_cast<double>(b.length));
      ys.push_back(b.mean_us);
    }
    profile.ar_fit = fit_line(xs, ys);
  }
  return profile;
}

inline void save_latency_csv(const std::vector<LatencyProfile>& profiles,
                             const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  out << "mode,length,run,micros\n";
  out.precision(17);
  for (const auto& p : profiles) {
    for (const auto& b : p.buckets) {
      for (std::size_t r = 0; r < b.runs_us.size(); ++r) {
        out << p.mode << ',' << b.length << ',' << r << ',' << b.runs_us[r] << "\n";
      }
    }
  }
}

inline void save_eval_csv(const EvalReport& rep, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  out << "example_id,bucket,match\n";
  for (std::size_t i = 0; i < rep.records.size(); ++i) {
    out << i << ',' << (rep.records[i].had_asr_error ? "asr_error" : "clean") << ','
        << (rep.records[i].match ? 1 : 0) << "\n";
  }
}

// ---------------------------------------------------------------------------
// experiment runners

struct SweepRow {
  std::string variant;
  std::uint64_t seed = 0;
  double em_total = 0.0;
  double em_error = 0.0;
  double em_clean = 0.0;
};

inline void save_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  out << "variant,seed,em_total,em_error,em_clean\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.variant << ',' << r.seed << ',' << r.em_total << ',' << r.em_error << ','
        << r.em_clean << "\n";
  }
}

struct TrainedVariant {
  SluModel model;
  TrainResult result;
  EvalReport report;
};

/// Trains one model under the given config and evaluates the requested split.
inline TrainedVariant train_and_evaluate(const TrainConfig& cfg, const Dataset& data,
                                         const ConfusionDictionary& confusions,
                                         const Vocabulary& vocab,
                                         const std::string& eval_split) {
  TrainedVariant out{SluModel(cfg.model, vocab), {}, {}};
  out.result = train(out.model, cfg, data, confusions, eval_split);
  out.report = evaluate(out.model, data.split(eval_split));
  return out;
}

struct AlphaSweepRow {
  double alpha = 0.0;
  SweepRow em;
  LatencyProfile latency;
};

/// One model per alpha, identical seed/config otherwise; reports EM plus a
/// latency profile with the length module pinned per bucket.
inline std::vector<AlphaSweepRow> alpha_sweep(const TrainConfig& base, const Dataset& data,
                                              const ConfusionDictionary& confusions,
                                              const Vocabulary& vocab,
                                              const std::vector<double>& alphas,
                                              const std::string& eval_split,
                                              const BenchOptions& bench_opts) {
  if (alphas.empty()) throw UsageError("alpha_sweep: need at least one alpha");
  std::vector<AlphaSweepRow> rows;
  const auto eval_set = data.split(eval_split);
  if (eval_set.empty()) throw UsageError("alpha_sweep: empty eval split");
  for (double alpha : alphas) {
    if (alpha <= 1.0) throw UsageError("alpha_sweep: alpha must be > 1");
    TrainConfig cfg = base;
    cfg.model.alpha = alpha;
    TrainedVariant tv = train_and_evaluate(cfg, data, confusions, vocab, eval_split);
    AlphaSweepRow row;
    row.alpha = alpha;
    row.em = SweepRow{"alpha=" + std::to_string(alpha), cfg.seed, tv.report.em_total,
                      tv.report.em_asr_error, tv.report.em_no_asr_error};
    row.latency = bench_latency(tv.model, *eval_set.front(), bench_opts);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Noise-strategy ablation: {sampling, del, subs, no-noise} x seeds.
inline std::vector<SweepRow> denoise_ablation(const TrainConfig& base, const Dataset& data,
                                              const ConfusionDictionary& confusions,
                                              const Vocabulary& vocab,
                                              const std::vector<std::uint64_t>& seeds,
                                              const std::string& eval_split) {
  struct Variant {
    const char* name;
    NoiseMeta meta;
  };
  const Variant variants[] = {{"samp(del,subs)", NoiseMeta::sampling},
                              {"del", NoiseMeta::single_del},
                              {"subs", NoiseMeta::single_subs},
                              {"no_noise", NoiseMeta::none}};
  std::vector<SweepRow> rows;
  for (const auto& variant : variants) {
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.noise.meta = variant.meta;
      cfg.seed = seed;
      cfg.model.init_seed = derive_seed(seed, 0x5EED);
      TrainedVariant tv = train_and_evaluate(cfg, data, confusions, vocab, eval_split);
      rows.push_back(SweepRow{variant.name, seed, tv.report.em_total, tv.report.em_asr_error,
                              tv.report.em_no_asr_error});
    }
  }
  return rows;
}

inline double mean_em(const std::vector<SweepRow>& rows, const std::string& variant,
                      double SweepRow::*field) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.variant == variant) {
      total += r.*field;
      ++n;
    }
  }
  if (n == 0) throw UsageError("no sweep rows for variant '" + variant + "'");
  return total / static_cast<double>(n);
}

/// Feasibility bookkeeping: fraction of examples whose target is reachable
/// when the length module is perfect, i.e. required_min_length(target) <=
/// ceil(alpha * |target|).
inline double reachable_fraction(const Dataset& data, const Vocabulary& vocab, double alpha,
                                 const std::string& split) {
  const auto set = data.split(split);
  if (set.empty()) throw UsageError("reachable_fraction: empty split");
  std::size_t ok = 0;
  for (const Example* ex : set) {
    const auto target = vocab.encode(ex->parse);
    const auto l = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(target.size())));
    ok += required_min_length(target) <= l;
  }
  return static_cast<double>(ok) / static_cast<double>(set.size());
}

}  // namespace delib
