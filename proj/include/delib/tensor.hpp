#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "delib/rng.hpp"

namespace delib {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between operands.
class DimensionError : public TensorError {
 public:
  using TensorError::TensorError;
};

/// An op produced NaN/Inf from finite inputs.
class NumericalError : public TensorError {
 public:
  using TensorError::TensorError;
};

class UsageError : public TensorError {
 public:
  using TensorError::TensorError;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// dense kernels (row-major, accumulate into c)

inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  for (std::size_t p = 0; p < m; ++p) {
    const double* ap = a + p * k;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

// ---------------------------------------------------------------------------

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized lazily, same numel as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  std::size_t numel() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording in scope (inference / numeric probes).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericalError(std::string("op '") + op + "' produced a non-finite value");
    }
  }
}

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad && detail::grad_mode();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    std::vector<double> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v));
  }

  static Tensor scalar(double value) { return Tensor({}, {value}); }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->values[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->values.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<double>& data() { return node_->values; }
  const std::vector<double>& data() const { return node_->values; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const { return node_->grad; }

  double at(std::size_t i) const { return node_->values.at(i); }
  double at(std::size_t i, std::size_t j) const { return node_->values.at(i * cols() + j); }

  double item() const {
    if (numel() != 1) throw UsageError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->values[0];
  }

  void zero_grad() {
    if (node_) node_->grad.assign(node_->values.size(), 0.0);
  }

  /// Reverse-mode sweep from a scalar output.
  void backward() {
    if (numel() != 1) {
      throw UsageError("backward() requires a scalar output, got " + shape_str(shape()));
    }
    // iterative post-order over the parent DAG
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [nd, idx] = stack.back();
      if (idx < nd->parents.size()) {
        TensorNode* p = nd->parents[idx].get();
        ++idx;
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(nd);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn();
    }
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Computes an op result and, when grad recording is active and any input
// needs gradients, wires parents and the backward closure produced by
// `make_backward(result_node)`.
template <typename BackwardFactory>
Tensor record_op(Shape shape, std::vector<double> values, const char* op,
                 std::vector<Tensor> inputs, BackwardFactory&& make_backward) {
  check_finite(values, op);
  Tensor t(std::move(shape), std::move(values));
  if (detail::grad_mode()) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      t.node()->requires_grad = true;
      for (auto& in : inputs) t.node()->parents.push_back(in.node());
      t.node()->backward_fn = make_backward(t.node().get());
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// elementwise and structural ops

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) +
                         " does not match " + shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return record_op(a.shape(), std::move(out), "add", {a, b}, [a, b](TensorNode* nd) {
    return [a, b, nd]() {
      if (a.requires_grad()) {
        auto& g = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i];
      }
      if (b.requires_grad()) {
        auto& g = const_cast<Tensor&>(b).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i];
      }
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return record_op(a.shape(), std::move(out), "sub", {a, b}, [a, b](TensorNode* nd) {
    return [a, b, nd]() {
      if (a.requires_grad()) {
        auto& g = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i];
      }
      if (b.requires_grad()) {
        auto& g = const_cast<Tensor&>(b).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= nd->grad[i];
      }
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return record_op(a.shape(), std::move(out), "mul", {a, b}, [a, b](TensorNode* nd) {
    return [a, b, nd]() {
      if (a.requires_grad()) {
        auto& g = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& g = const_cast<Tensor&>(b).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i] * a.data()[i];
      }
    };
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return record_op(a.shape(), std::move(out), "scale", {a}, [a, c](TensorNode* nd) {
    return [a, c, nd]() {
      auto& g = const_cast<Tensor&>(a).grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i] * c;
    };
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return record_op(a.shape(), std::move(out), "add_scalar", {a}, [a](TensorNode* nd) {
    return [a, nd]() {
      auto& g = const_cast<Tensor&>(a).grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i];
    };
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return record_op(a.shape(), std::move(out), "relu", {a}, [a](TensorNode* nd) {
    return [a, nd]() {
      auto& g = const_cast<Tensor&>(a).grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a.data()[i] > 0.0) g[i] += nd->grad[i];
      }
    };
  });
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not match");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return record_op({m, n}, std::move(out), "matmul", {a, b}, [a, b, m, k, n](TensorNode* nd) {
    return [a, b, m, k, n, nd]() {
      if (a.requires_grad()) {
        gemm_nt(m, n, k, nd->grad.data(), b.data().data(), const_cast<Tensor&>(a).grad().data());
      }
      if (b.requires_grad()) {
        gemm_tn(m, k, n, a.data().data(), nd->grad.data(), const_cast<Tensor&>(b).grad().data());
      }
    };
  });
}

/// a[m x k] * b[n x k]^T, used for attention scores.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not match");
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  return record_op({m, n}, std::move(out), "matmul_nt", {a, b}, [a, b, m, k, n](TensorNode* nd) {
    return [a, b, m, k, n, nd]() {
      // c = a b^T: da += dc * b ; db += dc^T * a
      if (a.requires_grad()) {
        gemm_nn(m, n, k, nd->grad.data(), b.data().data(), const_cast<Tensor&>(a).grad().data());
      }
      if (b.requires_grad()) {
        gemm_tn(m, n, k, nd->grad.data(), a.data().data(), const_cast<Tensor&>(b).grad().data());
      }
    };
  });
}

inline Tensor softmax(const Tensor& x, int axis = -1) {
  const auto& sh = x.shape();
  const int rank = static_cast<int>(sh.size());
  if (rank == 0) throw DimensionError("softmax: scalar input");
  int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(sh));
  }
  std::size_t n = sh[ax];
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= sh[i];
  for (int i = ax + 1; i < rank; ++i) inner *= sh[i];

  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= sum;
    }
  }
  return record_op(sh, std::move(out), "softmax", {x}, [x, outer, inner, n](TensorNode* nd) {
    return [x, outer, inner, n, nd]() {
      auto& g = const_cast<Tensor&>(x).grad();
      const auto& y = nd->values;
      const auto& dy = nd->grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += dy[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = base + i * inner;
            g[k] += y[k] * (dy[k] - dot);
          }
        }
      }
    };
  });
}

/// Row-wise log-softmax over the last axis of a 2-d tensor.
inline Tensor log_softmax_rows(const Tensor& x) {
  require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  return record_op({m, n}, std::move(out), "log_softmax_rows", {x}, [x, m, n](TensorNode* nd) {
    return [x, m, n, nd]() {
      auto& g = const_cast<Tensor&>(x).grad();
      for (std::size_t i = 0; i < m; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) gsum += nd->grad[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = i * n + j;
          g[k] += nd->grad[k] - std::exp(nd->values[k]) * gsum;
        }
      }
    };
  });
}

/// Per-row normalization over the last axis with learned gain/bias vectors.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const auto& sh = x.shape();
  if (sh.empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = sh.back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias size must match last axis " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_sigma(rows);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = gain.data()[j] * xh + bias.data()[j];
    }
  }
  return record_op(sh, std::move(out), "layer_norm", {x, gain, bias},
                   [x, gain, bias, rows, d, xhat = std::move(xhat),
                    inv_sigma = std::move(inv_sigma)](TensorNode* nd) {
                     return [x, gain, bias, rows, d, xhat, inv_sigma, nd]() {
                       const auto& dy = nd->grad;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t base = r * d;
                         if (gain.requires_grad()) {
                           auto& gg = const_cast<Tensor&>(gain).grad();
                           for (std::size_t j = 0; j < d; ++j)
                             gg[j] += dy[base + j] * xhat[base + j];
                         }
                         if (bias.requires_grad()) {
                           auto& gb = const_cast<Tensor&>(bias).grad();
                           for (std::size_t j = 0; j < d; ++j) gb[j] += dy[base + j];
                         }
                         if (x.requires_grad()) {
                           auto& gx = const_cast<Tensor&>(x).grad();
                           double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = dy[base + j] * gain.data()[j];
                             mean_dxh += dxh;
                             mean_dxh_xh += dxh * xhat[base + j];
                           }
                           mean_dxh /= static_cast<double>(d);
                           mean_dxh_xh /= static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = dy[base + j] * gain.data()[j];
                             gx[base + j] += inv_sigma[r] *
                                             (dxh - mean_dxh - xhat[base + j] * mean_dxh_xh);
                           }
                         }
                       }
                     };
                   });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row counts " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), da = a.cols(), db = b.cols();
  std::vector<double> out(m * (da + db));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.data().data() + i * da, da, out.data() + i * (da + db));
    std::copy_n(b.data().data() + i * db, db, out.data() + i * (da + db) + da);
  }
  return record_op({m, da + db}, std::move(out), "concat_cols", {a, b},
                   [a, b, m, da, db](TensorNode* nd) {
                     return [a, b, m, da, db, nd]() {
                       const std::size_t w = da + db;
                       if (a.requires_grad()) {
                         auto& g = const_cast<Tensor&>(a).grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < da; ++j) g[i * da + j] += nd->grad[i * w + j];
                       }
                       if (b.requires_grad()) {
                         auto& g = const_cast<Tensor&>(b).grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < db; ++j)
                             g[i * db + j] += nd->grad[i * w + da + j];
                       }
                     };
                   });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width) {
  require_matrix(a, "slice_cols");
  if (start + width > a.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + width) + ") exceeds " + shape_str(a.shape()));
  }
  const std::size_t m = a.rows(), d = a.cols();
  std::vector<double> out(m * width);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().data() + i * d + start, width, out.data() + i * width);
  return record_op({m, width}, std::move(out), "slice_cols", {a},
                   [a, m, d, start, width](TensorNode* nd) {
                     return [a, m, d, start, width, nd]() {
                       auto& g = const_cast<Tensor&>(a).grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < width; ++j)
                           g[i * d + start + j] += nd->grad[i * width + j];
                     };
                   });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_rows");
  if (start + count > a.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceeds " + shape_str(a.shape()));
  }
  const std::size_t d = a.cols();
  std::vector<double> out(count * d);
  std::copy_n(a.data().data() + start * d, count * d, out.data());
  return record_op({count, d}, std::move(out), "slice_rows", {a},
                   [a, d, start, count](TensorNode* nd) {
                     return [a, d, start, count, nd]() {
                       auto& g = const_cast<Tensor&>(a).grad();
                       for (std::size_t i = 0; i < count * d; ++i) g[start * d + i] += nd->grad[i];
                     };
                   });
}

/// Mean over rows: [n x d] -> [1 x d].
inline Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.rows(), d = a.cols();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += a.data()[i * d + j];
  for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(m);
  return record_op({1, d}, std::move(out), "mean_rows", {a}, [a, m, d](TensorNode* nd) {
    return [a, m, d, nd]() {
      auto& g = const_cast<Tensor&>(a).grad();
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += nd->grad[j] * inv;
    };
  });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return record_op({}, {s}, "sum_all", {a}, [a](TensorNode* nd) {
    return [a, nd]() {
      auto& g = const_cast<Tensor&>(a).grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[0];
    };
  });
}

/// Row lookup: table[ids[i], :] -> out[i, :]. Backward scatter-adds.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_matrix(table, "gather_rows");
  const std::size_t v = table.rows(), d = table.cols(), n = ids.size();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw UsageError("gather_rows: index " + std::to_string(id) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
  }
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  return record_op({n, d}, std::move(out), "gather_rows", {table}, [table, ids, d](TensorNode* nd) {
    return [table, ids, d, nd]() {
      auto& g = const_cast<Tensor&>(table).grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::size_t base = static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t j = 0; j < d; ++j) g[base + j] += nd->grad[i * d + j];
      }
    };
  });
}

/// Broadcast add of a [1 x d] (or length-d) bias across the rows of [n x d].
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  require_matrix(a, "add_rowvec");
  const std::size_t m = a.rows(), d = a.cols();
  if (b.numel() != d) {
    throw DimensionError("add_rowvec: bias size " + shape_str(b.shape()) +
                         " does not match row width " + std::to_string(d));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.data()[i * d + j] + b.data()[j];
  return record_op({m, d}, std::move(out), "add_rowvec", {a, b}, [a, b, m, d](TensorNode* nd) {
    return [a, b, m, d, nd]() {
      if (a.requires_grad()) {
        auto& g = const_cast<Tensor&>(a).grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i];
      }
      if (b.requires_grad()) {
        auto& g = const_cast<Tensor&>(b).grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) g[j] += nd->grad[i * d + j];
      }
    };
  });
}

/// Inverted dropout. rate 0 returns the input handle unchanged.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return a;
  const double keep = 1.0 - rate;
  const double inv_keep = 1.0 / keep;
  std::vector<double> mask(a.numel());
  for (auto& mv : mask) mv = rng.bernoulli(keep) ? inv_keep : 0.0;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  return record_op(a.shape(), std::move(out), "dropout", {a},
                   [a, mask = std::move(mask)](TensorNode* nd) {
                     return [a, mask, nd]() {
                       auto& g = const_cast<Tensor&>(a).grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd->grad[i] * mask[i];
                     };
                   });
}

/// Mean over rows of label-smoothed negative log-likelihood.
/// lp is [n x V] of log-probabilities; targets are class ids per row.
inline Tensor nll_smoothed(const Tensor& lp, const std::vector<int>& targets, double eps) {
  require_matrix(lp, "nll_smoothed");
  const std::size_t n = lp.rows(), v = lp.cols();
  if (targets.size() != n) throw UsageError("nll_smoothed: one target per row required");
  if (eps < 0.0 || eps >= 0.5) throw UsageError("nll_smoothed: eps must be in [0, 0.5)");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw UsageError("nll_smoothed: target " + std::to_string(t) + " out of range");
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lp.data().data() + i * v;
    double gold = -row[targets[i]];
    if (eps == 0.0) {
      loss += gold;
    } else {
      double uni = 0.0;
      for (std::size_t j = 0; j < v; ++j) uni -= row[j];
      uni /= static_cast<double>(v);
      loss += (1.0 - eps) * gold + eps * uni;
    }
  }
  loss /= static_cast<double>(n);
  return record_op({}, {loss}, "nll_smoothed", {lp}, [lp, targets, eps, n, v](TensorNode* nd) {
    return [lp, targets, eps, n, v, nd]() {
      auto& g = const_cast<Tensor&>(lp).grad();
      const double go = nd->grad[0] / static_cast<double>(n);
      const double uterm = eps == 0.0 ? 0.0 : go * eps / static_cast<double>(v);
      for (std::size_t i = 0; i < n; ++i) {
        if (uterm != 0.0) {
          for (std::size_t j = 0; j < v; ++j) g[i * v + j] -= uterm;
        }
        g[i * v + static_cast<std::size_t>(targets[i])] -= go * (1.0 - eps);
      }
    };
  });
}

// ---------------------------------------------------------------------------
// parameters

struct Parameter {
  std::string name;
  Tensor tensor;  // requires_grad always true
};

/// Ordered parameter registry with unique names.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw UsageError("duplicate parameter name '" + name + "'");
    init.node()->requires_grad = true;
    index_[name] = params_.size();
    params_.push_back(Parameter{name, init});
    return init;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Tensor init_uniform_fanin(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// gradient verification

struct GradCheckOptions {
  double step = 1e-5;
  // 0 = check every component; otherwise sample this many per parameter tensor
  std::size_t samples_per_param = 0;
  std::uint64_t sample_seed = 17;
};

/// Compares reverse-mode gradients of a scalar-valued f against central
/// finite differences, component-wise. Returns the max relative error.
inline double grad_check(const std::function<Tensor()>& f, ParameterStore& params,
                         GradCheckOptions opts = {}) {
  params.zero_grad();
  Tensor loss = f();
  if (loss.numel() != 1) throw UsageError("grad_check: f must produce a scalar");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.all().size());
  for (auto& p : params.all()) analytic.push_back(p.tensor.grad());

  Rng pick(opts.sample_seed);
  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.all().size(); ++pi) {
    Tensor t = params.all()[pi].tensor;
    std::vector<std::size_t> idx;
    if (opts.samples_per_param == 0 || opts.samples_per_param >= t.numel()) {
      idx.resize(t.numel());
      for (std::size_t i = 0; i < t.numel(); ++i) idx[i] = i;
    } else {
      idx = pick.sample_indices(t.numel(), opts.samples_per_param);
    }
    for (std::size_t i : idx) {
      const double saved = t.data()[i];
      double fp, fm;
      {
        NoGradGuard ng;
        t.data()[i] = saved + opts.step;
        fp = f().item();
        t.data()[i] = saved - opts.step;
        fm = f().item();
      }
      t.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double a = analytic[pi][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      max_err = std::max(max_err, std::fabs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace delib
