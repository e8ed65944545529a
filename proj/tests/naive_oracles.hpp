#pragma once

// Independent O(T^2 d) reference implementations built from plain nested
// vectors and scalar loops. They share no code with the library's tensor ops.

#include <cmath>
#include <vector>

#include "idportrait/tensor.hpp"

namespace idportrait::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, Mat[row][col]

/// Tensor [rows, cols] (or [1, rows, cols]) to nested rows.
inline Mat to_mat(const Tensor& t) {
  const int64_t cols = t.dim(-1);
  const int64_t rows = t.numel() / cols;
  Mat m(static_cast<size_t>(rows), Vec(static_cast<size_t>(cols)));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) m[static_cast<size_t>(r)][static_cast<size_t>(c)] = t[r * cols + c];
  return m;
}

/// y = W x for W stored as [out][in].
inline Vec matvec(const Mat& w, const Vec& x) {
  Vec y(w.size(), 0.0);
  for (size_t o = 0; o < w.size(); ++o)
    for (size_t i = 0; i < x.size(); ++i) y[o] += w[o][i] * x[i];
  return y;
}

inline Vec plus(Vec a, const Vec& b) {
  for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

/// Single-head attention: out_i = Wo sum_j softmax_j(q_i.k_j / sqrt(d)) v_j.
inline Mat attention(const Mat& xq, const Mat& xkv, const Mat& wq, const Mat& wk, const Mat& wv, const Mat& wo) {
  Mat out;
  for (const Vec& xi : xq) {
    const Vec q = matvec(wq, xi);
    const double d = static_cast<double>(q.size());
    Vec scores;
    for (const Vec& xj : xkv) {
      const Vec k = matvec(wk, xj);
      double s = 0.0;
      for (size_t c = 0; c < q.size(); ++c) s += q[c] * k[c];
      scores.push_back(s / std::sqrt(d));
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double z = 0.0;
    for (double& s : scores) z += (s = std::exp(s - mx));
    Vec acc(q.size(), 0.0);
    for (size_t j = 0; j < xkv.size(); ++j) {
      const Vec v = matvec(wv, xkv[j]);
      for (size_t c = 0; c < v.size(); ++c) acc[c] += scores[j] / z * v[c];
    }
    out.push_back(matvec(wo, acc));
  }
  return out;
}

inline Vec layer_norm(const Vec& x, const Vec& gamma, const Vec& beta, double eps = 1e-5) {
  double m = 0.0, v = 0.0;
  for (double a : x) m += a;
  m /= static_cast<double>(x.size());
  for (double a : x) v += (a - m) * (a - m);
  v /= static_cast<double>(x.size());
  Vec y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - m) / std::sqrt(v + eps) * gamma[i] + beta[i];
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace idportrait::oracle
