#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "delib/tensor.hpp"

namespace delib {

/// Target cannot be reached by any alignment of the given length.
class FeasibilityError : public TensorError {
 public:
  using TensorError::TensorError;
};

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = a > b ? a : b;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// Merge adjacent repeats, then drop blanks. Order preserved.
inline std::vector<int> collapse(const std::vector<int>& raw, int blank) {
  std::vector<int> out;
  int prev = -1;
  bool first = true;
  for (int t : raw) {
    if (!first && t == prev) continue;
    prev = t;
    first = false;
    if (t != blank) out.push_back(t);
  }
  return out;
}

/// Shortest alignment length able to produce `target` after collapse:
/// |target| plus one separating blank per adjacent equal pair.
inline std::size_t required_min_length(const std::vector<int>& target) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++repeats;
  }
  return target.size() + repeats;
}

struct CtcOutput {
  Tensor logits;               // [l x V]
  std::vector<int> raw_tokens;  // argmax per position
  std::vector<int> collapsed;   // after merge/blank-removal
};

struct CtcLossResult {
  Tensor nll;                // scalar, graph-connected to log_probs
  Tensor per_position_grad;  // [l x V], d nll / d log_probs
};

/// Alignment-marginal negative log-likelihood of `target` under per-position
/// log-probabilities, with exact gradients via the forward-backward recursion
/// over the blank-interleaved target. All accumulation is in log space.
inline CtcLossResult ctc_loss(const Tensor& log_probs, const std::vector<int>& target,
                              int blank) {
  require_matrix(log_probs, "ctc_loss");
  const std::size_t l = log_probs.rows();
  const std::size_t v = log_probs.cols();
  if (blank < 0 || static_cast<std::size_t>(blank) >= v) {
    throw UsageError("ctc_loss: blank id " + std::to_string(blank) + " outside vocabulary of " +
                     std::to_string(v));
  }
  for (int t : target) {
    if (t == blank) throw UsageError("ctc_loss: target contains the blank token");
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw UsageError("ctc_loss: target id " + std::to_string(t) + " outside vocabulary");
    }
  }
  const std::size_t need = required_min_length(target);
  if (l < need) {
    throw FeasibilityError("ctc_loss: " + std::to_string(l) +
                           " positions cannot align a target needing " + std::to_string(need));
  }

  // expanded state sequence: blank, u1, blank, u2, ..., blank
  const std::size_t u = target.size();
  const std::size_t s_count = 2 * u + 1;
  std::vector<int> z(s_count, blank);
  for (std::size_t i = 0; i < u; ++i) z[2 * i + 1] = target[i];

  const auto& lp = log_probs.data();
  auto lp_at = [&](std::size_t t, int sym) { return lp[t * v + static_cast<std::size_t>(sym)]; };

  std::vector<double> alpha(l * s_count, kNegInf);
  alpha[0] = lp_at(0, blank);
  if (s_count > 1) alpha[1] = lp_at(0, z[1]);
  for (std::size_t t = 1; t < l; ++t) {
    for (std::size_t s = 0; s < s_count; ++s) {
      double a = alpha[(t - 1) * s_count + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * s_count + s - 1]);
      if (s >= 2 && z[s] != blank && z[s] != z[s - 2]) {
        a = log_add(a, alpha[(t - 1) * s_count + s - 2]);
      }
      if (a != kNegInf) a += lp_at(t, z[s]);
      alpha[t * s_count + s] = a;
    }
  }
  double log_p = alpha[(l - 1) * s_count + s_count - 1];
  if (s_count > 1) log_p = log_add(log_p, alpha[(l - 1) * s_count + s_count - 2]);
  if (log_p == kNegInf) {
    throw FeasibilityError("ctc_loss: no feasible alignment (all paths have zero probability)");
  }

  // beta excludes the emission at its own time step
  std::vector<double> beta(l * s_count, kNegInf);
  beta[(l - 1) * s_count + s_count - 1] = 0.0;
  if (s_count > 1) beta[(l - 1) * s_count + s_count - 2] = 0.0;
  for (std::size_t t = l - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_count; ++s) {
      double b = kNegInf;
      {
        const double nxt = beta[(t + 1) * s_count + s];
        if (nxt != kNegInf) b = log_add(b, nxt + lp_at(t + 1, z[s]));
      }
      if (s + 1 < s_count) {
        const double nxt = beta[(t + 1) * s_count + s + 1];
        if (nxt != kNegInf) b = log_add(b, nxt + lp_at(t + 1, z[s + 1]));
      }
      if (s + 2 < s_count && z[s + 2] != blank && z[s + 2] != z[s]) {
        const double nxt = beta[(t + 1) * s_count + s + 2];
        if (nxt != kNegInf) b = log_add(b, nxt + lp_at(t + 1, z[s + 2]));
      }
      beta[t * s_count + s] = b;
    }
  }

  // d nll / d lp[t, v] = -exp(logsumexp_{s: z_s = v}(alpha + beta) - log_p)
  std::vector<double> grad(l * v, 0.0);
  for (std::size_t t = 0; t < l; ++t) {
    std::vector<double> acc(v, kNegInf);
    for (std::size_t s = 0; s < s_count; ++s) {
      const double ab = alpha[t * s_count + s] + beta[t * s_count + s];
      if (ab != kNegInf) {
        auto& slot = acc[static_cast<std::size_t>(z[s])];
        slot = log_add(slot, ab);
      }
    }
    for (std::size_t j = 0; j < v; ++j) {
      if (acc[j] != kNegInf) grad[t * v + j] = -std::exp(acc[j] - log_p);
    }
  }

  Tensor grad_tensor({l, v}, grad);
  Tensor nll = record_op({}, {-log_p}, "ctc_loss", {log_probs},
                         [log_probs, grad = std::move(grad)](TensorNode* nd) {
                           return [log_probs, grad, nd]() {
                             auto& g = const_cast<Tensor&>(log_probs).grad();
                             const double up = nd->grad[0];
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * grad[i];
                           };
                         });
  return CtcLossResult{nll, grad_tensor};
}

/// Per-position argmax (ties resolved toward the lowest token id) plus the
/// collapsed sequence.
inline CtcOutput greedy_decode(const Tensor& logits, int blank) {
  require_matrix(logits, "greedy_decode");
  const std::size_t l = logits.rows(), v = logits.cols();
  if (l < 1) throw UsageError("greedy_decode: at least one position required");
  std::vector<int> raw(l);
  for (std::size_t t = 0; t < l; ++t) {
    const double* row = logits.data().data() + t * v;
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j) {
      if (row[j] > row[best]) best = j;
    }
    raw[t] = static_cast<int>(best);
  }
  return CtcOutput{logits, raw, collapse(raw, blank)};
}

}  // namespace delib
