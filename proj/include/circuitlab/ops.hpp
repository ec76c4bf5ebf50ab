// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "circuitlab/tensor.hpp"

namespace circuitlab {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Row-wise max-shifted log-sum-exp.
inline double row_logsumexp(const double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}

// Elementwise binary op with scalar-vs-tensor broadcast only.
template <typename Fwd, typename DA, typename DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
  require(same || a_scalar || b_scalar, std::string(op) + ": incompatible shapes " +
                                            shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Shape shape = (same || b_scalar) ? a.shape() : b.shape();
  const std::size_t n = shape_numel(shape);
  const auto ad = a.data(), bd = b.data();
  const std::size_t sa = a_scalar && !same ? 0 : 1, sb = b_scalar && !same ? 0 : 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i * sa], bd[i * sb]);
  return make_result(op, shape, std::move(out), {a, b},
                     [a, b, n, sa, sb, da, db](std::span<const double> g, std::span<std::vector<double>*> pg) {
                       const auto ad = a.data(), bd = b.data();
                       if (pg[0]) {
                         auto& ga = *pg[0];
                         for (std::size_t i = 0; i < n; ++i) ga[i * sa] += g[i] * da(ad[i * sa], bd[i * sb]);
                       }
                       if (pg[1]) {
                         auto& gb = *pg[1];
                         for (std::size_t i = 0; i < n; ++i) gb[i * sb] += g[i] * db(ad[i * sa], bd[i * sb]);
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  return make_result(op, x.shape(), std::move(out), {x},
                     [x, deriv](std::span<const double> g, std::span<std::vector<double>*> pg) {
                       const auto xd = x.data();
                       auto& gx = *pg[0];
                       for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += g[i] * deriv(xd[i]);
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      "scale", x, [c](double v) { return v * c; }, [c](double) { return c; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary("sigmoid", x, detail::sigmoid_scalar, [](double v) {
    const double s = detail::sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

/// Sigmoid-approximated GELU: x * sigmoid(1.702 x).
inline constexpr double kGeluSlope = 1.702;

inline Tensor gelu(const Tensor& x) {
  return detail::unary(
      "gelu", x, [](double v) { return v * detail::sigmoid_scalar(kGeluSlope * v); },
      [](double v) {
        const double s = detail::sigmoid_scalar(kGeluSlope * v);
        return s + kGeluSlope * v * s * (1.0 - s);
      });
}

/// Multiplies every row of x (last dimension n) elementwise by v[n].
inline Tensor scale_columns(const Tensor& x, const Tensor& v) {
  detail::require(x.ndim() >= 1 && v.ndim() == 1 && x.shape().back() == v.numel(),
                  "scale_columns: cannot scale " + shape_str(x.shape()) + " by " + shape_str(v.shape()));
  const std::size_t n = v.numel(), rows = x.numel() / n;
  const auto xd = x.data(), vd = v.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xd[r * n + c] * vd[c];
  return detail::make_result("scale_columns", x.shape(), std::move(out), {x, v},
                             [x, v, n, rows](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               const auto xd = x.data(), vd = v.data();
                               if (pg[0]) {
                                 auto& gx = *pg[0];
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[r * n + c] * vd[c];
                               }
                               if (pg[1]) {
                                 auto& gv = *pg[1];
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < n; ++c) gv[c] += g[r * n + c] * xd[r * n + c];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {x},
                             [n = x.numel()](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               auto& gx = *pg[0];
                               for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                             });
}

inline Tensor mean(const Tensor& x) {
  detail::require(x.numel() > 0, "mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x},
                             [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               auto& gx = *pg[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
}

/// Contiguous range of the flattened tensor, returned as a 1-D tensor.
inline Tensor slice(const Tensor& x, std::size_t offset, std::size_t length) {
  if (offset + length > x.numel()) {
    throw IndexError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                     ") out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + offset, x.data().begin() + offset + length);
  return detail::make_result("slice", {length}, std::move(out), {x},
                             [offset](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               auto& gx = *pg[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
                             });
}

/// Swaps the last two dimensions.
inline Tensor transpose_last2(const Tensor& x) {
  detail::require(x.ndim() >= 2, "transpose_last2 needs at least 2 dims, got " + shape_str(x.shape()));
  Shape shape = x.shape();
  const std::size_t m = shape[shape.size() - 2], n = shape.back(), batch = x.numel() / (m * n);
  std::swap(shape[shape.size() - 2], shape.back());
  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = xd[b * m * n + i * n + j];
  return detail::make_result("transpose", shape, std::move(out), {x},
                             [m, n, batch](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               auto& gx = *pg[0];
                               for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     gx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                             });
}

/// Selects rows (last dimension is the row width) by index; the backward
/// pass scatter-adds, so repeated indices accumulate.
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  detail::require(table.ndim() >= 2, "gather_rows needs a table, got " + shape_str(table.shape()));
  const std::size_t width = table.shape().back(), rows = table.numel() / width;
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("row index " + std::to_string(id) + " out of range for " + shape_str(table.shape()));
    }
  }
  const auto td = table.data();
  std::vector<double> out(idx.size() * width);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(td.begin() + static_cast<std::size_t>(idx[r]) * width, width, out.begin() + r * width);
  const std::size_t n = idx.size();
  return detail::make_result("gather_rows", {n, width}, std::move(out), {table},
                             [idx = std::move(idx), width](std::span<const double> g,
                                                           std::span<std::vector<double>*> pg) {
                               auto& gt = *pg[0];
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t c = 0; c < width; ++c)
                                   gt[static_cast<std::size_t>(idx[r]) * width + c] += g[r * width + c];
                             });
}

// ---------------------------------------------------------------------------
// Matrix products

/// [m x k] . [k x n] -> [m x n], or batched [B x m x k] . [B x k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool ok_rank = (a.ndim() == 2 && b.ndim() == 2) || (a.ndim() == 3 && b.ndim() == 3 && a.size(0) == b.size(0));
  const std::size_t ar = a.ndim(), br = b.ndim();
  if (!ok_rank || a.shape()[ar - 1] != b.shape()[br - 2]) {
    throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not agree");
  }
  const std::size_t batch = ar == 3 ? a.size(0) : 1;
  const std::size_t m = a.shape()[ar - 2], k = a.shape()[ar - 1], n = b.shape()[br - 1];
  Shape shape = ar == 3 ? Shape{batch, m, n} : Shape{m, n};
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const double* A = ad.data() + bt * m * k;
    const double* B = bd.data() + bt * k * n;
    double* C = out.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  return detail::make_result(
      "matmul", std::move(shape), std::move(out), {a, b},
      [a, b, batch, m, k, n](std::span<const double> g, std::span<std::vector<double>*> pg) {
        const auto ad = a.data(), bd = b.data();
        for (std::size_t bt = 0; bt < batch; ++bt) {
          const double* A = ad.data() + bt * m * k;
          const double* B = bd.data() + bt * k * n;
          const double* G = g.data() + bt * m * n;
          if (pg[0]) {  // dA = G . B^T
            double* GA = pg[0]->data() + bt * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                GA[i * k + p] += s;
              }
          }
          if (pg[1]) {  // dB = A^T . G
            double* GB = pg[1]->data() + bt * k * n;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Attention helpers

inline constexpr double kCausalMaskValue = -1e9;

/// Adds kCausalMaskValue above the diagonal of each trailing [T x T] block.
inline Tensor add_causal_mask(const Tensor& scores) {
  detail::require(scores.ndim() >= 2 && scores.shape().back() == scores.shape()[scores.ndim() - 2],
                  "add_causal_mask needs square trailing blocks, got " + shape_str(scores.shape()));
  const std::size_t t = scores.shape().back(), blocks = scores.numel() / (t * t);
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) out[b * t * t + i * t + j] += kCausalMaskValue;
  return detail::make_result("add_causal_mask", scores.shape(), std::move(out), {scores},
                             [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               auto& gx = *pg[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
}

/// Softmax over the last dimension, stabilized by row-max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require(x.ndim() >= 1 && x.shape().back() >= 1, "softmax_rows on " + shape_str(x.shape()));
  const std::size_t v = x.shape().back(), rows = x.numel() / v;
  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += (out[r * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] /= s;
  }
  std::vector<double> y = out;
  return detail::make_result("softmax_rows", x.shape(), std::move(out), {x},
                             [y = std::move(y), v, rows](std::span<const double> g,
                                                         std::span<std::vector<double>*> pg) {
                               auto& gx = *pg[0];
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < v; ++j) dot += g[r * v + j] * y[r * v + j];
                                 for (std::size_t j = 0; j < v; ++j)
                                   gx[r * v + j] += y[r * v + j] * (g[r * v + j] - dot);
                               }
                             });
}

/// y = x / sqrt(mean(x^2) + eps) * gain, per row of width d.
inline constexpr double kRmsEps = 1e-6;

inline Tensor rms_norm_rows(const Tensor& x, const Tensor& gain) {
  detail::require(x.ndim() >= 1 && gain.ndim() == 1 && x.shape().back() == gain.numel(),
                  "rms_norm_rows: " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()));
  const std::size_t d = gain.numel(), rows = x.numel() / d;
  const auto xd = x.data(), gd = gain.data();
  std::vector<double> inv(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xd[r * d + j] * xd[r * d + j];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] * inv[r] * gd[j];
  }
  return detail::make_result(
      "rms_norm_rows", x.shape(), std::move(out), {x, gain},
      [x, gain, inv = std::move(inv), d, rows](std::span<const double> g, std::span<std::vector<double>*> pg) {
        const auto xd = x.data(), gd = gain.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double s = inv[r];
          if (pg[0]) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * gd[j] * xd[r * d + j];
            const double coef = s * s * s * dot / static_cast<double>(d);
            auto& gx = *pg[0];
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += s * g[r * d + j] * gd[j] - coef * xd[r * d + j];
          }
          if (pg[1]) {
            auto& gg = *pg[1];
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xd[r * d + j] * s;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows of -log softmax(logits)[target].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  detail::require(logits.ndim() == 2, "cross_entropy needs [N x V] logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.size(0), v = logits.size(1);
  detail::require(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                           std::to_string(n) + " rows");
  detail::require(n > 0, "cross_entropy on zero rows");
  std::vector<int> tg(targets.begin(), targets.end());
  for (int t : tg) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("target id " + std::to_string(t) + " out of range for vocabulary " + std::to_string(v));
    }
  }
  const auto ld = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    total += detail::row_logsumexp(ld.data() + r * v, v) - ld[r * v + static_cast<std::size_t>(tg[r])];
  }
  return detail::make_result(
      "cross_entropy", {1}, {total / static_cast<double>(n)}, {logits},
      [logits, tg = std::move(tg), n, v](std::span<const double> g, std::span<std::vector<double>*> pg) {
        const auto ld = logits.data();
        auto& gl = *pg[0];
        const double w = g[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          const double lse = detail::row_logsumexp(ld.data() + r * v, v);
          for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += w * std::exp(ld[r * v + j] - lse);
          gl[r * v + static_cast<std::size_t>(tg[r])] -= w;
        }
      });
}

/// Per-row KL(softmax(p) || softmax(q)) as an [N] tensor. The p side is a
/// frozen reference: no gradient ever flows into it.
inline Tensor kl_rows(const Tensor& p_logits, const Tensor& q_logits) {
  if (p_logits.shape() != q_logits.shape() || p_logits.ndim() != 2) {
    throw DimensionError("kl_rows: shapes " + shape_str(p_logits.shape()) + " and " +
                         shape_str(q_logits.shape()) + " must be equal [N x V]");
  }
  const std::size_t n = p_logits.size(0), v = p_logits.size(1);
  const auto pd = p_logits.data(), qd = q_logits.data();
  std::vector<double> p(n * v), out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double lp = detail::row_logsumexp(pd.data() + r * v, v);
    const double lq = detail::row_logsumexp(qd.data() + r * v, v);
    double kl = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double logp = pd[r * v + j] - lp;
      p[r * v + j] = std::exp(logp);
      kl += p[r * v + j] * (logp - (qd[r * v + j] - lq));
    }
    out[r] = kl;
  }
  Tensor p_ref = Tensor::from(p_logits.shape(), std::vector<double>(pd.begin(), pd.end()));
  return detail::make_result(
      "kl_rows", {n}, std::move(out), {p_ref, q_logits},
      [q_logits, p = std::move(p), n, v](std::span<const double> g, std::span<std::vector<double>*> pg) {
        if (!pg[1]) return;
        const auto qd = q_logits.data();
        auto& gq = *pg[1];
        for (std::size_t r = 0; r < n; ++r) {
          const double lq = detail::row_logsumexp(qd.data() + r * v, v);
          for (std::size_t j = 0; j < v; ++j)
            gq[r * v + j] += g[r] * (std::exp(qd[r * v + j] - lq) - p[r * v + j]);
        }
      });
}

inline Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  return mean(kl_rows(p_logits, q_logits));
}

// ---------------------------------------------------------------------------
// Gradient routing

/// Same value, no provenance: contributes nothing to any ancestor.
inline Tensor stop_gradient(const Tensor& t) {
  return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

/// Forward value is exactly `hard`; the adjoint passes unchanged to `soft`.
/// Equivalent to soft + stop_gradient(hard - soft) without the rounding that
/// the explicit subtraction and re-addition can introduce.
inline Tensor straight_through(const Tensor& soft, const Tensor& hard) {
  if (soft.shape() != hard.shape()) {
    throw DimensionError("straight_through: " + shape_str(soft.shape()) + " vs " + shape_str(hard.shape()));
  }
  std::vector<double> out(hard.data().begin(), hard.data().end());
  return detail::make_result("straight_through", soft.shape(), std::move(out), {soft},
                             [](std::span<const double> g, std::span<std::vector<double>*> pg) {
                               auto& gs = *pg[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                             });
}

}  // namespace circuitlab
