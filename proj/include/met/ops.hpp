#pragma once

// Differentiable ops over met::Tensor. Matrices are rank-2 row-major; "row"
// ops act on the trailing axis.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "met/tensor.hpp"

namespace met {

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + " expects a matrix, got shape " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace detail

/// C = A·B.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner extents disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  std::vector<double> c(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[i * k + t];
      if (av == 0.0) continue;
      const double* brow = B.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(c), "matmul", {a, b}, [m, k, n](detail::Node& out) {
    auto& an = *out.inputs[0];
    auto& bn = *out.inputs[1];
    const double* G = out.grad.data();
    if (an.requires_grad) {
      // dA = G·Bᵀ
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          double s = 0.0;
          const double* grow = G + i * n;
          const double* brow = bn.value.data() + t * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          an.grad[i * k + t] += s;
        }
    }
    if (bn.requires_grad) {
      // dB = Aᵀ·G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          const double av = an.value[i * k + t];
          if (av == 0.0) continue;
          const double* grow = G + i * n;
          double* dbrow = bn.grad.data() + t * n;
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(v), "add", {a, b}, [](detail::Node& out) {
    for (auto& in : out.inputs)
      if (in->requires_grad)
        for (std::size_t i = 0; i < out.grad.size(); ++i) in->grad[i] += out.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(v), "sub", {a, b}, [](detail::Node& out) {
    auto& an = *out.inputs[0];
    auto& bn = *out.inputs[1];
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      if (an.requires_grad) an.grad[i] += out.grad[i];
      if (bn.requires_grad) bn.grad[i] -= out.grad[i];
    }
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(v), "mul", {a, b}, [](detail::Node& out) {
    auto& an = *out.inputs[0];
    auto& bn = *out.inputs[1];
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      if (an.requires_grad) an.grad[i] += out.grad[i] * bn.value[i];
      if (bn.requires_grad) bn.grad[i] += out.grad[i] * an.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
  return detail::make_result(a.shape(), std::move(v), "scale", {a}, [s](detail::Node& out) {
    auto& an = *out.inputs[0];
    for (std::size_t i = 0; i < out.grad.size(); ++i) an.grad[i] += s * out.grad[i];
  });
}

/// x[r, :] + v for every row r.
inline Tensor add_row(const Tensor& x, const Tensor& v) {
  detail::require_rank2(x, "add_row");
  const std::size_t c = x.cols();
  if (v.numel() != c)
    throw DimensionError("add_row: row vector " + shape_str(v.shape()) + " vs matrix " +
                         shape_str(x.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + v[i % c];
  return detail::make_result(x.shape(), std::move(out), "add_row", {x, v}, [c](detail::Node& o) {
    auto& xn = *o.inputs[0];
    auto& vn = *o.inputs[1];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (xn.requires_grad) xn.grad[i] += o.grad[i];
      if (vn.requires_grad) vn.grad[i % c] += o.grad[i];
    }
  });
}

/// x[r, :] ⊙ v for every row r, i.e. x·diag(v).
inline Tensor mul_row(const Tensor& x, const Tensor& v) {
  detail::require_rank2(x, "mul_row");
  const std::size_t c = x.cols();
  if (v.numel() != c)
    throw DimensionError("mul_row: row vector " + shape_str(v.shape()) + " vs matrix " +
                         shape_str(x.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * v[i % c];
  return detail::make_result(x.shape(), std::move(out), "mul_row", {x, v}, [c](detail::Node& o) {
    auto& xn = *o.inputs[0];
    auto& vn = *o.inputs[1];
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (xn.requires_grad) xn.grad[i] += o.grad[i] * vn.value[i % c];
      if (vn.requires_grad) vn.grad[i % c] += o.grad[i] * xn.value[i];
    }
  });
}

/// Multiplies row r by the constant factors[r].
inline Tensor scale_rows(const Tensor& x, std::vector<double> factors) {
  detail::require_rank2(x, "scale_rows");
  const std::size_t c = x.cols();
  if (factors.size() != x.rows())
    throw DimensionError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                         shape_str(x.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factors[i / c];
  return detail::make_result(x.shape(), std::move(out), "scale_rows", {x},
                             [c, f = std::move(factors)](detail::Node& o) {
                               auto& xn = *o.inputs[0];
                               for (std::size_t i = 0; i < o.grad.size(); ++i)
                                 xn.grad[i] += o.grad[i] * f[i / c];
                             });
}

/// Per-row layer normalization with biased (1/d) variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm over an empty axis");
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " vs rows of " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& o) {
        auto& xn = *o.inputs[0];
        auto& gn = *o.inputs[1];
        auto& bn = *o.inputs[2];
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = o.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gn.requires_grad) gn.grad[j] += g[j] * xh[j];
            if (bn.requires_grad) bn.grad[j] += g[j];
            dxhat[j] = g[j] * gn.value[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
          }
          if (!xn.requires_grad) continue;
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j)
            xn.grad[r * d + j] += inv_std[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      });
}

namespace detail {

inline void softmax_inplace(std::span<double> row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : row) v /= s;
}

// dS = P ⊙ (dP − <dP, P>) for one row.
inline void softmax_row_backward(const double* p, const double* dp, double* ds, std::size_t n) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += dp[j] * p[j];
  for (std::size_t j = 0; j < n; ++j) ds[j] += p[j] * (dp[j] - dot);
}

}  // namespace detail

inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < out.size() / n; ++r)
    detail::softmax_inplace(std::span<double>(out.data() + r * n, n));
  std::vector<double> probs = out;
  return detail::make_result(x.shape(), std::move(out), "softmax_rows", {x},
                             [n, p = std::move(probs)](detail::Node& o) {
                               auto& xn = *o.inputs[0];
                               for (std::size_t r = 0; r < p.size() / n; ++r)
                                 detail::softmax_row_backward(p.data() + r * n,
                                                              o.grad.data() + r * n,
                                                              xn.grad.data() + r * n, n);
                             });
}

/// Exact GELU, x·Φ(x).
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * detail::normal_cdf(x[i]);
  return detail::make_result(x.shape(), std::move(out), "gelu", {x}, [](detail::Node& o) {
    auto& xn = *o.inputs[0];
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double v = xn.value[i];
      const double dphi = detail::normal_cdf(v) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      xn.grad[i] += o.grad[i] * dphi;
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result({1}, {s}, "sum", {x}, [](detail::Node& o) {
    auto& xn = *o.inputs[0];
    for (auto& g : xn.grad) g += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Same values, no gradient path.
inline Tensor detach(const Tensor& x) {
  Tensor out(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), false);
  out.node()->op = "detach";
  return out;
}

/// Stacks matrices with equal column counts.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.cols() != c)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    rows += p.numel() / c;
  }
  return detail::make_result({rows, c}, std::move(out), "concat_rows", parts,
                             [offsets = std::move(offsets)](detail::Node& o) {
                               for (std::size_t k = 0; k < o.inputs.size(); ++k) {
                                 auto& in = *o.inputs[k];
                                 if (!in.requires_grad) continue;
                                 for (std::size_t i = 0; i < in.value.size(); ++i)
                                   in.grad[i] += o.grad[offsets[k] + i];
                               }
                             });
}

/// out[r, :] = x[indices[r], :]. Indices may repeat.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices) {
  const std::size_t c = x.cols();
  const std::size_t xrows = x.numel() / c;
  if (indices.empty()) throw DimensionError("gather_rows with no indices");
  std::vector<double> out(indices.size() * c);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= xrows)
      throw DimensionError("gather_rows: row " + std::to_string(indices[r]) + " out of " +
                           shape_str(x.shape()));
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  const std::size_t rows = indices.size();
  return detail::make_result({rows, c}, std::move(out), "gather_rows", {x},
                             [c, idx = std::move(indices)](detail::Node& o) {
                               auto& xn = *o.inputs[0];
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < c; ++j)
                                   xn.grad[idx[r] * c + j] += o.grad[r * c + j];
                             });
}

/// Multi-head scaled dot-product attention over independent row segments.
///
/// Rows of q, k, v are split into consecutive segments of `segment` rows
/// (one per sample); each segment attends only within itself. Column blocks
/// of width d/heads form the heads. When `masked_prefix` > 1, the first
/// `masked_prefix` rows of a segment may not attend to each other (only to
/// themselves and to the remaining rows).
struct AttentionLayout {
  std::size_t segment = 0;
  std::size_t heads = 1;
  std::size_t masked_prefix = 0;
};

namespace detail {

inline bool attention_blocked(const AttentionLayout& l, std::size_t i, std::size_t j) {
  return l.masked_prefix > 1 && i < l.masked_prefix && j < l.masked_prefix && i != j;
}

}  // namespace detail

/// Attention probabilities laid out [segment][head][i][j].
inline std::vector<double> attention_probs(const Tensor& q, const Tensor& k,
                                           const AttentionLayout& l) {
  const std::size_t d = q.cols(), T = l.segment, H = l.heads;
  if (T == 0 || q.rows() % T != 0 || d % H != 0)
    throw DimensionError("attention: bad layout for " + shape_str(q.shape()));
  const std::size_t S = q.rows() / T, dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(S * H * T * T);
  auto Q = q.data();
  auto K = k.data();
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        double* row = probs.data() + ((s * H + h) * T + i) * T;
        const double* qi = Q.data() + (s * T + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          if (detail::attention_blocked(l, i, j)) continue;
          const double* kj = K.data() + (s * T + j) * d + h * dh;
          double dot = 0.0;
          for (std::size_t t = 0; t < dh; ++t) dot += qi[t] * kj[t];
          row[j] = dot * scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          if (detail::attention_blocked(l, i, j)) {
            row[j] = 0.0;
            continue;
          }
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < T; ++j) row[j] /= z;
      }
  return probs;
}

/// Concatenated head outputs softmax(q_h k_hᵀ/√d_h)·v_h, shape of q.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionLayout& l) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  auto probs = attention_probs(q, k, l);
  const std::size_t d = q.cols(), T = l.segment, H = l.heads, S = q.rows() / T, dh = d / H;
  std::vector<double> out(q.numel(), 0.0);
  auto V = v.data();
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        const double* p = probs.data() + ((s * H + h) * T + i) * T;
        double* oi = out.data() + (s * T + i) * d + h * dh;
        for (std::size_t j = 0; j < T; ++j) {
          if (p[j] == 0.0) continue;
          const double* vj = V.data() + (s * T + j) * d + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += p[j] * vj[t];
        }
      }
  return detail::make_result(
      q.shape(), std::move(out), "attention", {q, k, v},
      [S, T, H, d, dh, p = std::move(probs)](detail::Node& o) {
        auto& qn = *o.inputs[0];
        auto& kn = *o.inputs[1];
        auto& vn = *o.inputs[2];
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> dp(T), ds(T);
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < T; ++i) {
              const double* pi = p.data() + ((s * H + h) * T + i) * T;
              const double* gi = o.grad.data() + (s * T + i) * d + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double* vj = vn.value.data() + (s * T + j) * d + h * dh;
                double acc = 0.0;
                for (std::size_t t = 0; t < dh; ++t) acc += gi[t] * vj[t];
                dp[j] = acc;
                if (vn.requires_grad && pi[j] != 0.0) {
                  double* dvj = vn.grad.data() + (s * T + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) dvj[t] += pi[j] * gi[t];
                }
              }
              std::fill(ds.begin(), ds.end(), 0.0);
              detail::softmax_row_backward(pi, dp.data(), ds.data(), T);
              const double* qi = qn.value.data() + (s * T + i) * d + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double g = ds[j] * sc;
                if (g == 0.0) continue;
                const double* kj = kn.value.data() + (s * T + j) * d + h * dh;
                if (qn.requires_grad) {
                  double* dqi = qn.grad.data() + (s * T + i) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) dqi[t] += g * kj[t];
                }
                if (kn.requires_grad) {
                  double* dkj = kn.grad.data() + (s * T + j) * d + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) dkj[t] += g * qi[t];
                }
              }
            }
      });
}

/// Mean over rows of −log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()));
  std::vector<double> probs(logits.data().begin(), logits.data().end());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw DataError("label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(c) +
                      ")");
    const double* row = logits.data().data() + r * c;
    double mx = row[0];
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    loss += -(row[labels[r]] - mx - std::log(z));
    detail::softmax_inplace(std::span<double>(probs.data() + r * c, c));
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result({1}, {loss}, "cross_entropy", {logits},
                             [n, c, p = std::move(probs), lab = std::move(lab)](detail::Node& o) {
                               auto& ln = *o.inputs[0];
                               const double g = o.grad[0] / static_cast<double>(n);
                               for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double y = static_cast<int>(j) == lab[r] ? 1.0 : 0.0;
                                   ln.grad[r * c + j] += g * (p[r * c + j] - y);
                                 }
                             });
}

/// uᵀv / (‖u‖·‖v‖).
inline double cosine_sim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw DimensionError("cosine_sim: lengths " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()));
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw DimensionError("cosine_sim: degenerate zero-norm vector");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

}  // namespace met
