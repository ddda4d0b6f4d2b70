#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "delib/corpus.hpp"
#include "delib/model.hpp"

namespace delib {

/// Token-sequence equality, no normalization.
inline bool exact_match(const std::vector<int>& pred, const std::vector<int>& target) {
  return pred == target;
}

struct EvalRecord {
  std::string target;
  std::string prediction;
  bool match = false;
  bool had_asr_error = false;
};

struct EvalReport {
  double em_total = 0.0;
  double em_no_asr_error = 0.0;
  double em_asr_error = 0.0;
  std::size_t n_total = 0;
  std::size_t n_no_asr_error = 0;
  std::size_t n_asr_error = 0;
  std::vector<EvalRecord> records;

  /// em_total must be the count-weighted mean of the two bucket EMs.
  double weighted_mean_gap() const {
    if (n_total == 0) return 0.0;
    const double mixed = (static_cast<double>(n_no_asr_error) * em_no_asr_error +
                          static_cast<double>(n_asr_error) * em_asr_error) /
                         static_cast<double>(n_total);
    return std::fabs(mixed - em_total);
  }
};

/// Runs `predict` over the examples and buckets results by ASR-error flag.
inline EvalReport evaluate_with(
    const std::vector<const Example*>& examples, const Vocabulary& vocab,
    const std::function<std::vector<int>(const Example&)>& predict) {
  EvalReport rep;
  std::size_t hit_total = 0, hit_err = 0, hit_clean = 0;
  for (const Example* ex : examples) {
    const std::vector<int> target = vocab.encode(ex->parse);
    const std::vector<int> pred = predict(*ex);
    const bool match = exact_match(pred, target);
    EvalRecord rec;
    rec.target = join_words(ex->parse);
    rec.prediction = join_words(vocab.decode(pred));
    rec.match = match;
    rec.had_asr_error = ex->had_asr_error;
    rep.records.push_back(std::move(rec));
    ++rep.n_total;
    hit_total += match;
    if (ex->had_asr_error) {
      ++rep.n_asr_error;
      hit_err += match;
    } else {
      ++rep.n_no_asr_error;
      hit_clean += match;
    }
  }
  rep.em_total = rep.n_total ? static_cast<double>(hit_total) / rep.n_total : 0.0;
  rep.em_asr_error = rep.n_asr_error ? static_cast<double>(hit_err) / rep.n_asr_error : 0.0;
  rep.em_no_asr_error =
      rep.n_no_asr_error ? static_cast<double>(hit_clean) / rep.n_no_asr_error : 0.0;
  return rep;
}

inline EvalReport evaluate(const SluModel& model, const std::vector<const Example*>& examples) {
  return evaluate_with(examples, model.vocab,
                       [&](const Example& ex) { return model.predict_parse(ex); });
}

}  // namespace delib
