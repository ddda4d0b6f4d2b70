#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "delib/ctc.hpp"
#include "delib/eval.hpp"
#include "delib/model.hpp"
#include "delib/noising.hpp"

namespace delib {

/// Training aborted because the loss left the finite domain.
class DivergenceError : public TensorError {
 public:
  using TensorError::TensorError;
};

struct LossWeights {
  double lambda = 0.2504;          // length-loss scale
  double label_smoothing_eps = 0.1;

  void validate() const {
    if (lambda < 0) throw UsageError("lambda must be >= 0");
    if (label_smoothing_eps < 0 || label_smoothing_eps >= 0.5) {
      throw UsageError("label smoothing eps must lie in [0, 0.5)");
    }
  }
};

struct ScheduleSpec {
  double warmup_epochs = 10;
  double hold_epochs = 40;
  double decay_epochs = 95;
  double peak_lr = 0.00085;
  double floor_lr = 1e-5;

  void validate() const {
    if (warmup_epochs < 0 || hold_epochs < 0 || decay_epochs < 0) {
      throw UsageError("schedule stage lengths must be >= 0");
    }
    if (floor_lr < 0 || floor_lr > peak_lr) {
      throw UsageError("floor_lr must lie in [0, peak_lr]");
    }
  }
};

/// Tri-stage schedule: linear ramp to peak over warmup, constant hold,
/// exponential decay to floor, floor afterwards.
inline double lr_at(double epoch, const ScheduleSpec& s) {
  s.validate();
  if (epoch < 0) throw UsageError("lr_at: epoch must be >= 0");
  if (epoch < s.warmup_epochs) {
    return s.peak_lr * (epoch / s.warmup_epochs);
  }
  const double after_warmup = epoch - s.warmup_epochs;
  if (after_warmup <= s.hold_epochs || s.decay_epochs == 0) {
    return epoch <= s.warmup_epochs + s.hold_epochs ? s.peak_lr
                                                    : std::max(s.floor_lr, 0.0);
  }
  const double into_decay = after_warmup - s.hold_epochs;
  if (into_decay >= s.decay_epochs) return s.floor_lr;
  const double floor = std::max(s.floor_lr, s.peak_lr * 1e-12);
  return s.peak_lr * std::pow(floor / s.peak_lr, into_decay / s.decay_epochs);
}

/// L = L_label + lambda * L_length. The lambda=0 and eps=0 paths reduce
/// bitwise to the unweighted/unsmoothed losses.
inline Tensor combine_losses(const Tensor& label_loss, const Tensor& length_loss,
                             const LossWeights& w) {
  w.validate();
  return add(label_loss, scale(length_loss, w.lambda));
}

/// Mean over positions of KL(uniform || p_t) given log-probabilities.
inline Tensor uniform_kl(const Tensor& log_probs) {
  const double l = static_cast<double>(log_probs.rows());
  const double v = static_cast<double>(log_probs.cols());
  return add_scalar(scale(sum_all(log_probs), -1.0 / (l * v)), -std::log(v));
}

/// Label smoothing for the alignment-marginal loss: (1-eps) * CTC-NLL plus
/// eps * uniform-KL on the per-position output distributions.
inline Tensor smoothed_ctc_label_loss(const Tensor& log_probs, const std::vector<int>& target,
                                      double eps) {
  Tensor nll = ctc_loss(log_probs, target, Vocabulary::kBlank).nll;
  return add(scale(nll, 1.0 - eps), scale(uniform_kl(log_probs), eps));
}

// ---------------------------------------------------------------------------

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  std::size_t step_count = 0;
  std::vector<std::vector<double>> m, v;

  void init(const ParameterStore& params) {
    m.clear();
    v.clear();
    for (const auto& p : params.all()) {
      m.emplace_back(p.tensor.numel(), 0.0);
      v.emplace_back(p.tensor.numel(), 0.0);
    }
    step_count = 0;
  }

  void step(ParameterStore& params, double lr) {
    if (m.size() != params.all().size()) init(params);
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t pi = 0; pi < params.all().size(); ++pi) {
      Tensor t = params.all()[pi].tensor;
      auto& vals = t.data();
      auto& g = t.grad();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        m[pi][i] = beta1 * m[pi][i] + (1.0 - beta1) * g[i];
        v[pi][i] = beta2 * v[pi][i] + (1.0 - beta2) * g[i] * g[i];
        const double mhat = m[pi][i] / bc1;
        const double vhat = v[pi][i] / bc2;
        vals[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * vals[i]);
      }
    }
  }
};

// ---------------------------------------------------------------------------

struct TrainConfig {
  ModelConfig model;
  NoiseSpec noise{0.0026, 0.0882, NoiseMeta::sampling, 0};  // paper-default rates
  LossWeights loss;
  ScheduleSpec schedule;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  double beta1 = 0.9, beta2 = 0.999, weight_decay = 0.01;
  std::size_t eval_every = 1;

  void validate() const {
    model.validate();
    noise.validate();
    loss.validate();
    schedule.validate();
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (eval_every < 1) throw UsageError("eval_every must be >= 1");
  }

  Json to_json() const {
    return Json{{"model", model.to_json()},
                {"noise",
                 {{"deletion_p", noise.deletion_p},
                  {"substitution_p", noise.substitution_p},
                  {"meta", to_string(noise.meta)},
                  {"seed", noise.seed}}},
                {"loss", {{"lambda", loss.lambda}, {"label_smoothing_eps", loss.label_smoothing_eps}}},
                {"schedule",
                 {{"warmup_epochs", schedule.warmup_epochs},
                  {"hold_epochs", schedule.hold_epochs},
                  {"decay_epochs", schedule.decay_epochs},
                  {"peak_lr", schedule.peak_lr},
                  {"floor_lr", schedule.floor_lr}}},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"seed", seed},
                {"beta1", beta1},
                {"beta2", beta2},
                {"weight_decay", weight_decay},
                {"eval_every", eval_every}};
  }

  static TrainConfig from_json(const Json& j) {
    TrainConfig c;
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
    if (j.contains("noise")) {
      const auto& n = j["noise"];
      c.noise.deletion_p = n.value("deletion_p", c.noise.deletion_p);
      c.noise.substitution_p = n.value("substitution_p", c.noise.substitution_p);
      c.noise.meta = noise_meta_from_string(n.value("meta", to_string(c.noise.meta)));
      c.noise.seed = n.value("seed", c.noise.seed);
    }
    if (j.contains("loss")) {
      c.loss.lambda = j["loss"].value("lambda", c.loss.lambda);
      c.loss.label_smoothing_eps =
          j["loss"].value("label_smoothing_eps", c.loss.label_smoothing_eps);
    }
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      c.schedule.warmup_epochs = s.value("warmup_epochs", c.schedule.warmup_epochs);
      c.schedule.hold_epochs = s.value("hold_epochs", c.schedule.hold_epochs);
      c.schedule.decay_epochs = s.value("decay_epochs", c.schedule.decay_epochs);
      c.schedule.peak_lr = s.value("peak_lr", c.schedule.peak_lr);
      c.schedule.floor_lr = s.value("floor_lr", c.schedule.floor_lr);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.validate();
    return c;
  }
};

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open train config '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw UsageError("train config '" + path + "': " + e.what());
  }
  return TrainConfig::from_json(j);
}

/// Mode-appropriate joint loss for one example. Returns an undefined Tensor
/// when the example is skipped (infeasible CTC target or over-long length).
struct ExampleLoss {
  Tensor total;
  bool skipped = false;
};

inline ExampleLoss example_loss(SluModel& model, const Example& ex, const Words& noised_hyp,
                                const LossWeights& w, const FwdCtx& ctx) {
  const std::vector<int> target = model.vocab.encode(ex.parse);
  const auto true_len = target.size();
  ExampleLoss out;
  if (true_len == 0 || true_len > model.cfg.l_max ||
      true_len + 2 > model.cfg.pos_capacity) {
    out.skipped = true;
    return out;
  }

  FirstPassOutput fp = model.embed_first_pass(noised_hyp, ex.gold_words, ex.had_asr_error, ctx);
  PooledEncoding enc = model.encode(fp, ctx);
  const double eps = w.label_smoothing_eps;

  if (model.cfg.mode == DecodeMode::autoregressive) {
    std::vector<int> input{Vocabulary::kBos};
    input.insert(input.end(), target.begin(), target.end());
    std::vector<int> shifted = target;
    shifted.push_back(Vocabulary::kEos);
    Tensor lp = log_softmax_rows(model.ar.forward(enc.emb_pool, input, ctx));
    out.total = nll_smoothed(lp, shifted, eps);
    return out;
  }

  Tensor len_lp = model.length_head.class_log_probs(enc);
  Tensor len_loss = nll_smoothed(len_lp, {static_cast<int>(true_len) - 1}, eps);

  if (model.cfg.mode == DecodeMode::ctc) {
    bool capped = false;
    const int l_train = model.length_head.fuzzy_scale(static_cast<int>(true_len), &capped);
    if (static_cast<std::size_t>(l_train) < required_min_length(target)) {
      out.skipped = true;  // fuzzy slot budget cannot align this target
      return out;
    }
    Tensor logits = model.nar.forward_read(enc.emb_pool, static_cast<std::size_t>(l_train), ctx);
    Tensor label = smoothed_ctc_label_loss(log_softmax_rows(logits), target, eps);
    out.total = combine_losses(label, len_loss, w);
    return out;
  }

  // mask_predict: exact-length slots, cross-entropy over the blank-free vocabulary
  Tensor logits = model.nar.forward_read(enc.emb_pool, true_len, ctx);
  Tensor lp = log_softmax_rows(slice_cols(logits, 1, model.vocab.size() - 1));
  std::vector<int> shifted;
  shifted.reserve(true_len);
  for (int t : target) shifted.push_back(t - 1);
  Tensor label = nll_smoothed(lp, shifted, eps);
  out.total = combine_losses(label, len_loss, w);
  return out;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double eval_em = 0.0;
  double em_on_error_split = 0.0;
  double em_on_clean_split = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t skipped_infeasible = 0;
  double best_em = -1.0;
  std::size_t best_epoch = 0;
};

inline void save_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot open '" + path + "' for writing");
  out << "epoch,lr,train_loss,eval_em,em_on_error_split,em_on_clean_split\n";
  out.precision(17);
  for (const auto& m : history) {
    out << m.epoch << ',' << m.lr << ',' << m.train_loss << ',' << m.eval_em << ','
        << m.em_on_error_split << ',' << m.em_on_clean_split << "\n";
  }
}

/// Epoch loop: shuffle, corrupt each hypothesis with fresh noise, batch
/// gradients, AdamW step on the tri-stage schedule. Noise touches training
/// inputs only; evaluation uses the stored (channel-corrupted) hypotheses.
/// The best-eval-EM parameter snapshot is restored into the model at the end.
inline TrainResult train(SluModel& model, const TrainConfig& cfg, const Dataset& data,
                         const ConfusionDictionary& confusions,
                         const std::string& eval_split = "valid") {
  cfg.validate();
  if (data.examples.empty()) throw UsageError("train: dataset is empty");
  std::vector<const Example*> train_set = data.split("train");
  if (train_set.empty()) throw UsageError("train: no examples in the train split");
  std::vector<const Example*> eval_set = data.split(eval_split);

  AdamW opt;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.weight_decay = cfg.weight_decay;
  opt.init(model.params);

  TrainResult result;
  std::vector<std::vector<double>> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto& p : model.params.all()) best_values.push_back(p.tensor.data());
  };
  snapshot();  // epochs == 0 keeps the initialization

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(static_cast<double>(epoch), cfg.schedule);
    Rng shuffle_rng(derive_seed(cfg.seed, epoch, 0xA11CE));
    shuffle_rng.shuffle(order);

    model.params.zero_grad();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::size_t in_batch = 0;

    auto flush_batch = [&] {
      if (in_batch == 0) return;
      const double inv = 1.0 / static_cast<double>(in_batch);
      for (auto& p : model.params.all()) {
        for (auto& g : p.tensor.grad()) g *= inv;
      }
      opt.step(model.params, lr);
      model.params.zero_grad();
      in_batch = 0;
    };

    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const std::size_t idx = order[oi];
      const Example& ex = *train_set[idx];
      Rng noise_rng(derive_seed(cfg.seed ^ cfg.noise.seed, epoch * 2 + 1, idx));
      Words noised = apply_meta(ex.hyp_words, cfg.noise, confusions, noise_rng);
      Rng dropout_rng(derive_seed(cfg.seed, epoch * 2, idx));
      FwdCtx ctx{true, &dropout_rng};
      ExampleLoss el;
      try {
        el = example_loss(model, ex, noised, cfg.loss, ctx);
        if (el.skipped) {
          ++result.skipped_infeasible;
          continue;
        }
        if (!std::isfinite(el.total.item())) {
          throw NumericalError("loss is not finite");
        }
        el.total.backward();
      } catch (const NumericalError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                              ", batch seed " +
                              std::to_string(derive_seed(cfg.seed, epoch * 2, idx)) + ": " +
                              e.what());
      }
      loss_sum += el.total.item();
      ++loss_count;
      if (++in_batch == cfg.batch_size) flush_batch();
    }
    flush_batch();

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    if (!eval_set.empty() && (epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
      EvalReport rep = evaluate(model, eval_set);
      m.eval_em = rep.em_total;
      m.em_on_error_split = rep.em_asr_error;
      m.em_on_clean_split = rep.em_no_asr_error;
      if (rep.em_total > result.best_em) {
        result.best_em = rep.em_total;
        result.best_epoch = epoch;
        snapshot();
      }
    } else if (!result.history.empty()) {
      m.eval_em = result.history.back().eval_em;
      m.em_on_error_split = result.history.back().em_on_error_split;
      m.em_on_clean_split = result.history.back().em_on_clean_split;
    }
    result.history.push_back(m);
  }

  // keep the best-EM snapshot; without any evaluation the final params stand
  if (result.best_em >= 0.0 || cfg.epochs == 0) {
    for (std::size_t i = 0; i < model.params.all().size(); ++i) {
      model.params.all()[i].tensor.data() = best_values[i];
    }
  }
  return result;
}

}  // namespace delib
