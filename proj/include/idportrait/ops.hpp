#pragma once

// Differentiable tensor operations. Every op validates its shapes, computes
// the forward value eagerly and, when any input requires a gradient, records
// a backward closure that accumulates into its parents.

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "idportrait/errors.hpp"
#include "idportrait/tensor.hpp"

namespace idportrait {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  return st;
}

inline int64_t normalize_axis(int64_t axis, int64_t ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

/// Numpy-style broadcast of two shapes. Returns per-operand strides aligned
/// with the output shape, with zero stride on broadcast axes.
struct Broadcast {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;

  Broadcast(const Shape& a, const Shape& b, const char* op) {
    const size_t n = std::max(a.size(), b.size());
    out.assign(n, 1);
    stride_a.assign(n, 0);
    stride_b.assign(n, 0);
    const auto sa = contiguous_strides(a);
    const auto sb = contiguous_strides(b);
    for (size_t i = 0; i < n; ++i) {
      const int64_t ia = static_cast<int64_t>(i) - static_cast<int64_t>(n - a.size());
      const int64_t ib = static_cast<int64_t>(i) - static_cast<int64_t>(n - b.size());
      const int64_t da = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
      const int64_t db = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
      if (da != db && da != 1 && db != 1)
        throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
      out[i] = std::max(da, db);
      if (ia >= 0 && da != 1) stride_a[i] = sa[static_cast<size_t>(ia)];
      if (ib >= 0 && db != 1) stride_b[i] = sb[static_cast<size_t>(ib)];
    }
  }

  /// Calls f(out_index, a_index, b_index) for every output element.
  template <class F>
  void for_each(F&& f) const {
    const int64_t total = numel(out);
    const size_t n = out.size();
    std::vector<int64_t> idx(n, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0; o < total; ++o) {
      f(o, ia, ib);
      for (int64_t d = static_cast<int64_t>(n) - 1; d >= 0; --d) {
        const auto du = static_cast<size_t>(d);
        ++idx[du];
        ia += stride_a[du];
        ib += stride_b[du];
        if (idx[du] < out[du]) break;
        ia -= stride_a[du] * idx[du];
        ib -= stride_b[du] * idx[du];
        idx[du] = 0;
      }
    }
  }
};

template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const auto n = static_cast<size_t>(a.numel());
    std::vector<double> out(n);
    const auto av = a.data();
    const auto bv = b.data();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    return make_result(a.shape(), std::move(out), {a, b}, [n, da, db](Node& self) {
      const auto& x = self.parent_value(0);
      const auto& y = self.parent_value(1);
      if (auto* g = self.parent_grad(0))
        for (size_t i = 0; i < n; ++i) (*g)[i] += self.grad[i] * da(x[i], y[i]);
      if (auto* g = self.parent_grad(1))
        for (size_t i = 0; i < n; ++i) (*g)[i] += self.grad[i] * db(x[i], y[i]);
    });
  }
  Broadcast bc(a.shape(), b.shape(), name);
  std::vector<double> out(static_cast<size_t>(numel(bc.out)));
  const auto av = a.data();
  const auto bv = b.data();
  bc.for_each([&](int64_t o, int64_t ia, int64_t ib) {
    out[static_cast<size_t>(o)] = fwd(av[static_cast<size_t>(ia)], bv[static_cast<size_t>(ib)]);
  });
  Shape shape = bc.out;
  return make_result(std::move(shape), std::move(out), {a, b}, [bc, da, db](Node& self) {
    const auto& x = self.parent_value(0);
    const auto& y = self.parent_value(1);
    auto* ga = self.parent_grad(0);
    auto* gb = self.parent_grad(1);
    bc.for_each([&](int64_t o, int64_t ia, int64_t ib) {
      const double g = self.grad[static_cast<size_t>(o)];
      const double xa = x[static_cast<size_t>(ia)];
      const double yb = y[static_cast<size_t>(ib)];
      if (ga) (*ga)[static_cast<size_t>(ia)] += g * da(xa, yb);
      if (gb) (*gb)[static_cast<size_t>(ib)] += g * db(xa, yb);
    });
  });
}

template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto n = static_cast<size_t>(a.numel());
  std::vector<double> out(n);
  const auto av = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [n, deriv](Node& self) {
    const auto& x = self.parent_value(0);
    if (auto* g = self.parent_grad(0))
      for (size_t i = 0; i < n; ++i) (*g)[i] += self.grad[i] * deriv(x[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({}, {s}, {a}, [](detail::Node& self) {
    if (auto* g = self.parent_grad(0))
      for (double& v : *g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sum over one axis; the axis is kept with extent 1 when keepdim is set.
inline Tensor sum_axis(const Tensor& a, int64_t axis, bool keepdim = false) {
  axis = detail::normalize_axis(axis, a.ndim(), "sum_axis");
  const Shape& s = a.shape();
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  const int64_t len = s[static_cast<size_t>(axis)];
  std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
  const auto av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < len; ++k)
      for (int64_t i = 0; i < inner; ++i)
        out[static_cast<size_t>(o * inner + i)] += av[static_cast<size_t>((o * len + k) * inner + i)];
  Shape os = s;
  if (keepdim)
    os[static_cast<size_t>(axis)] = 1;
  else
    os.erase(os.begin() + axis);
  return detail::make_result(std::move(os), std::move(out), {a}, [outer, inner, len](detail::Node& self) {
    if (auto* g = self.parent_grad(0))
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < len; ++k)
          for (int64_t i = 0; i < inner; ++i)
            (*g)[static_cast<size_t>((o * len + k) * inner + i)] += self.grad[static_cast<size_t>(o * inner + i)];
  });
}

inline Tensor mean_axis(const Tensor& a, int64_t axis, bool keepdim = false) {
  const int64_t len = a.dim(axis);
  return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& a, Shape shape) {
  int64_t infer = -1, known = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<size_t>(infer)] = a.numel() / known;
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    if (auto* g = self.parent_grad(0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor permute(const Tensor& a, const std::vector<int64_t>& dims) {
  const auto n = static_cast<size_t>(a.ndim());
  if (dims.size() != n) throw ShapeError("permute: rank mismatch");
  const Shape& s = a.shape();
  const auto in_strides = detail::contiguous_strides(s);
  Shape os(n);
  std::vector<int64_t> src_strides(n);
  for (size_t i = 0; i < n; ++i) {
    os[i] = s[static_cast<size_t>(dims[i])];
    src_strides[i] = in_strides[static_cast<size_t>(dims[i])];
  }
  const int64_t total = a.numel();
  std::vector<int64_t> gather(static_cast<size_t>(total));
  {
    std::vector<int64_t> idx(n, 0);
    int64_t src = 0;
    for (int64_t o = 0; o < total; ++o) {
      gather[static_cast<size_t>(o)] = src;
      for (int64_t d = static_cast<int64_t>(n) - 1; d >= 0; --d) {
        const auto du = static_cast<size_t>(d);
        ++idx[du];
        src += src_strides[du];
        if (idx[du] < os[du]) break;
        src -= src_strides[du] * idx[du];
        idx[du] = 0;
      }
    }
  }
  std::vector<double> out(static_cast<size_t>(total));
  const auto av = a.data();
  for (int64_t o = 0; o < total; ++o) out[static_cast<size_t>(o)] = av[static_cast<size_t>(gather[static_cast<size_t>(o)])];
  return detail::make_result(std::move(os), std::move(out), {a}, [gather = std::move(gather)](detail::Node& self) {
    if (auto* g = self.parent_grad(0))
      for (size_t o = 0; o < gather.size(); ++o) (*g)[static_cast<size_t>(gather[o])] += self.grad[o];
  });
}

inline Tensor transpose_last2(const Tensor& a) {
  std::vector<int64_t> dims(static_cast<size_t>(a.ndim()));
  std::iota(dims.begin(), dims.end(), 0);
  std::swap(dims[dims.size() - 1], dims[dims.size() - 2]);
  return permute(a, dims);
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  return add(a, Tensor::zeros(shape));
}

inline Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  axis = detail::normalize_axis(axis, static_cast<int64_t>(s0.size()), "concat");
  int64_t outer = 1, inner = 1, total_len = 0;
  for (int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<int64_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int64_t>(i) != axis && s[i] != s0[i])
        throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(s0));
    lens.push_back(s[static_cast<size_t>(axis)]);
    total_len += lens.back();
  }
  Shape os = s0;
  os[static_cast<size_t>(axis)] = total_len;
  std::vector<double> out(static_cast<size_t>(numel(os)));
  int64_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].data();
    const int64_t len = lens[p];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * len * inner, len * inner,
                  out.begin() + (o * total_len + offset) * inner);
    offset += len;
  }
  return detail::make_result(std::move(os), std::move(out), parts,
                             [outer, inner, total_len, lens = std::move(lens)](detail::Node& self) {
                               int64_t off = 0;
                               for (size_t p = 0; p < lens.size(); ++p) {
                                 const int64_t len = lens[p];
                                 if (auto* g = self.parent_grad(p))
                                   for (int64_t o = 0; o < outer; ++o)
                                     for (int64_t j = 0; j < len * inner; ++j)
                                       (*g)[static_cast<size_t>(o * len * inner + j)] +=
                                           self.grad[static_cast<size_t>((o * total_len + off) * inner + j)];
                                 off += len;
                               }
                             });
}

inline Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t len) {
  axis = detail::normalize_axis(axis, a.ndim(), "slice");
  const Shape& s = a.shape();
  const int64_t full = s[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > full)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") outside axis of length " + std::to_string(full));
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  Shape os = s;
  os[static_cast<size_t>(axis)] = len;
  std::vector<double> out(static_cast<size_t>(numel(os)));
  const auto av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(av.begin() + (o * full + start) * inner, len * inner, out.begin() + o * len * inner);
  return detail::make_result(std::move(os), std::move(out), {a}, [outer, inner, full, start, len](detail::Node& self) {
    if (auto* g = self.parent_grad(0))
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len * inner; ++j)
          (*g)[static_cast<size_t>((o * full + start) * inner + j)] += self.grad[static_cast<size_t>(o * len * inner + j)];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product. a: [..., M, K]; b: [K, N] (shared) or [..., K, N]
/// with the same leading dimensions as a.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) throw ShapeError("matmul: operands must have rank >= 2");
  const int64_t M = a.dim(-2), K = a.dim(-1);
  const int64_t Kb = b.dim(-2), N = b.dim(-1);
  if (K != Kb)
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const int64_t batch = a.numel() / (M * K);
  const bool shared_b = b.ndim() == 2;
  if (!shared_b) {
    if (b.ndim() != a.ndim() || b.numel() / (K * N) != batch)
      throw ShapeError("matmul: batch dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    for (int64_t i = 0; i < a.ndim() - 2; ++i)
      if (a.dim(i) != b.dim(i)) throw ShapeError("matmul: batch dimensions differ");
  }
  Shape os = a.shape();
  os.back() = N;
  std::vector<double> out(static_cast<size_t>(batch * M * N));
  for (int64_t i = 0; i < batch; ++i) {
    detail::ConstMapMat A(a.data().data() + i * M * K, M, K);
    detail::ConstMapMat B(b.data().data() + (shared_b ? 0 : i * K * N), K, N);
    detail::MapMat C(out.data() + i * M * N, M, N);
    C.noalias() = A * B;
  }
  return detail::make_result(std::move(os), std::move(out), {a, b}, [batch, M, K, N, shared_b](detail::Node& self) {
    const auto& av = self.parent_value(0);
    const auto& bv = self.parent_value(1);
    auto* ga = self.parent_grad(0);
    auto* gb = self.parent_grad(1);
    for (int64_t i = 0; i < batch; ++i) {
      detail::ConstMapMat G(self.grad.data() + i * M * N, M, N);
      if (ga) {
        detail::ConstMapMat B(bv.data() + (shared_b ? 0 : i * K * N), K, N);
        detail::MapMat GA(ga->data() + i * M * K, M, K);
        GA.noalias() += G * B.transpose();
      }
      if (gb) {
        detail::ConstMapMat A(av.data() + i * M * K, M, K);
        detail::MapMat GB(gb->data() + (shared_b ? 0 : i * K * N), K, N);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

/// y = x W^T + b over the last axis. W: [out, in]; b: [out] or undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  if (w.ndim() != 2) throw ShapeError("linear: weight must be rank 2");
  const int64_t in = w.dim(1), out_f = w.dim(0);
  if (x.ndim() < 1 || x.dim(-1) != in)
    throw ShapeError("linear: expected input width " + std::to_string(in) + ", got shape " + to_string(x.shape()));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != out_f)) throw ShapeError("linear: bias shape mismatch");
  const int64_t rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = out_f;
  std::vector<double> out(static_cast<size_t>(rows * out_f));
  {
    detail::ConstMapMat X(x.data().data(), rows, in);
    detail::ConstMapMat W(w.data().data(), out_f, in);
    detail::MapMat Y(out.data(), rows, out_f);
    Y.noalias() = X * W.transpose();
    if (b.defined()) {
      Eigen::Map<const Eigen::RowVectorXd> bias(b.data().data(), out_f);
      Y.rowwise() += bias;
    }
  }
  const bool has_bias = b.defined();
  return detail::make_result(std::move(os), std::move(out), {x, w, b}, [rows, in, out_f, has_bias](detail::Node& self) {
    detail::ConstMapMat G(self.grad.data(), rows, out_f);
    if (auto* gx = self.parent_grad(0)) {
      detail::ConstMapMat W(self.parent_value(1).data(), out_f, in);
      detail::MapMat GX(gx->data(), rows, in);
      GX.noalias() += G * W;
    }
    if (auto* gw = self.parent_grad(1)) {
      detail::ConstMapMat X(self.parent_value(0).data(), rows, in);
      detail::MapMat GW(gw->data(), out_f, in);
      GW.noalias() += G.transpose() * X;
    }
    if (has_bias)
      if (auto* gb = self.parent_grad(2)) {
        Eigen::Map<Eigen::RowVectorXd> GB(gb->data(), out_f);
        GB += G.colwise().sum();
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const auto av = a.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double* y = out.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (int64_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (int64_t j = 0; j < d; ++j) y[j] /= z;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [rows, d](detail::Node& self) {
    auto* g = self.parent_grad(0);
    if (!g) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += y[j] * gy[j];
      for (int64_t j = 0; j < d; ++j) (*g)[static_cast<size_t>(r * d + j)] += y[j] * (gy[j] - dot);
    }
  });
}

/// (x - mean) / sqrt(var + eps) over the last axis, biased variance.
inline Tensor standardize(const Tensor& a, double eps = 1e-5) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  std::vector<double> out(static_cast<size_t>(a.numel()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const auto av = a.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * d;
    double m = 0.0;
    for (int64_t j = 0; j < d; ++j) m += x[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (int64_t j = 0; j < d; ++j) v += (x[j] - m) * (x[j] - m);
    v /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(v + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(r * d + j)] = (x[j] - m) * is;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [rows, d, inv_std = std::move(inv_std)](detail::Node& self) {
    auto* g = self.parent_grad(0);
    if (!g) return;
    const auto dd = static_cast<double>(d);
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double mg = 0.0, mgy = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        mg += gy[j];
        mgy += gy[j] * y[j];
      }
      mg /= dd;
      mgy /= dd;
      const double is = inv_std[static_cast<size_t>(r)];
      for (int64_t j = 0; j < d; ++j) (*g)[static_cast<size_t>(r * d + j)] += is * (gy[j] - mg - y[j] * mgy);
    }
  });
}

/// x / ||x|| over the last axis. Throws on a zero-norm row.
inline Tensor l2_normalize(const Tensor& a) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  std::vector<double> out(static_cast<size_t>(a.numel()));
  std::vector<double> norms(static_cast<size_t>(rows));
  const auto av = a.data();
  for (int64_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (int64_t j = 0; j < d; ++j) n2 += av[static_cast<size_t>(r * d + j)] * av[static_cast<size_t>(r * d + j)];
    const double n = std::sqrt(n2);
    if (!(n > 0.0)) throw DegenerateInputError("l2_normalize: zero-norm vector");
    norms[static_cast<size_t>(r)] = n;
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(r * d + j)] = av[static_cast<size_t>(r * d + j)] / n;
  }
  return detail::make_result(a.shape(), std::move(out), {a}, [rows, d, norms = std::move(norms)](detail::Node& self) {
    auto* g = self.parent_grad(0);
    if (!g) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += y[j] * gy[j];
      const double inv = 1.0 / norms[static_cast<size_t>(r)];
      for (int64_t j = 0; j < d; ++j) (*g)[static_cast<size_t>(r * d + j)] += inv * (gy[j] - y[j] * dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops on NCHW tensors

struct ConvGeometry {
  int64_t n, ci, h, w, co, k, stride, pad, ho, wo;
};

namespace detail {

inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const int64_t hw_out = g.ho * g.wo;
  for (int64_t c = 0; c < g.ci; ++c)
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * hw_out;
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            row[oy * g.wo + ox] =
                (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const int64_t hw_out = g.ho * g.wo;
  for (int64_t c = 0; c < g.ci; ++c)
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * hw_out;
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) x[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2D convolution. x: [N, Ci, H, W]; w: [Co, Ci, k, k]; b: [Co] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride = 1, int64_t pad = 0) {
  if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: expected NCHW input and OIHW weight");
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(w.dim(1)));
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: square kernels only");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: input smaller than kernel");
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != g.co)) throw ShapeError("conv2d: bias shape mismatch");
  const int64_t kdim = g.ci * g.k * g.k, hw = g.ho * g.wo;
  std::vector<double> out(static_cast<size_t>(g.n * g.co * hw));
  std::vector<double> cols(static_cast<size_t>(kdim * hw));
  detail::ConstMapMat W(w.data().data(), g.co, kdim);
  for (int64_t i = 0; i < g.n; ++i) {
    detail::im2col(x.data().data() + i * g.ci * g.h * g.w, g, cols.data());
    detail::ConstMapMat C(cols.data(), kdim, hw);
    detail::MapMat Y(out.data() + i * g.co * hw, g.co, hw);
    Y.noalias() = W * C;
    if (b.defined())
      for (int64_t c = 0; c < g.co; ++c) Y.row(c).array() += b.data()[static_cast<size_t>(c)];
  }
  const bool has_bias = b.defined();
  return detail::make_result({g.n, g.co, g.ho, g.wo}, std::move(out), {x, w, b}, [g, kdim, hw, has_bias](detail::Node& self) {
    auto* gx = self.parent_grad(0);
    auto* gw = self.parent_grad(1);
    auto* gb = has_bias ? self.parent_grad(2) : nullptr;
    const auto& xv = self.parent_value(0);
    detail::ConstMapMat W(self.parent_value(1).data(), g.co, kdim);
    std::vector<double> cols(static_cast<size_t>(kdim * hw));
    for (int64_t i = 0; i < g.n; ++i) {
      detail::ConstMapMat G(self.grad.data() + i * g.co * hw, g.co, hw);
      if (gw) {
        detail::im2col(xv.data() + i * g.ci * g.h * g.w, g, cols.data());
        detail::ConstMapMat C(cols.data(), kdim, hw);
        detail::MapMat GW(gw->data(), g.co, kdim);
        GW.noalias() += G * C.transpose();
      }
      if (gx) {
        detail::MapMat DC(cols.data(), kdim, hw);
        DC.noalias() = W.transpose() * G;
        detail::col2im_add(cols.data(), g, gx->data() + i * g.ci * g.h * g.w);
      }
      if (gb)
        for (int64_t c = 0; c < g.co; ++c) (*gb)[static_cast<size_t>(c)] += G.row(c).sum();
    }
  });
}

inline Tensor upsample_nearest2x(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("upsample_nearest2x: expected NCHW");
  const int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out(static_cast<size_t>(nc * 4 * h * w));
  const auto xv = x.data();
  for (int64_t p = 0; p < nc; ++p)
    for (int64_t y = 0; y < 2 * h; ++y)
      for (int64_t xx = 0; xx < 2 * w; ++xx)
        out[static_cast<size_t>((p * 2 * h + y) * 2 * w + xx)] = xv[static_cast<size_t>((p * h + y / 2) * w + xx / 2)];
  return detail::make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x}, [nc, h, w](detail::Node& self) {
    if (auto* g = self.parent_grad(0))
      for (int64_t p = 0; p < nc; ++p)
        for (int64_t y = 0; y < 2 * h; ++y)
          for (int64_t xx = 0; xx < 2 * w; ++xx)
            (*g)[static_cast<size_t>((p * h + y / 2) * w + xx / 2)] += self.grad[static_cast<size_t>((p * 2 * h + y) * 2 * w + xx)];
  });
}

/// Normalized box (x0, y0, x1, y1) in [0, 1] image coordinates.
struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;
  double area() const { return (x1 - x0) * (y1 - y0); }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Bilinear resampling of a box region of each image onto an out_h x out_w
/// grid (pixel-center sampling, edge clamped). One box per batch item.
inline Tensor crop_resize(const Tensor& x, const std::vector<Box>& boxes, int64_t out_h, int64_t out_w) {
  if (x.ndim() != 4) throw ShapeError("crop_resize: expected NCHW");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (static_cast<int64_t>(boxes.size()) != n) throw ShapeError("crop_resize: one box per batch item required");
  struct Tap {
    int64_t i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  std::vector<Tap> taps(static_cast<size_t>(n * out_h * out_w));
  for (int64_t b = 0; b < n; ++b) {
    const Box& bx = boxes[static_cast<size_t>(b)];
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const double u = bx.x0 + (static_cast<double>(ox) + 0.5) / static_cast<double>(out_w) * (bx.x1 - bx.x0);
        const double v = bx.y0 + (static_cast<double>(oy) + 0.5) / static_cast<double>(out_h) * (bx.y1 - bx.y0);
        const double px = std::clamp(u * static_cast<double>(w) - 0.5, 0.0, static_cast<double>(w - 1));
        const double py = std::clamp(v * static_cast<double>(h) - 0.5, 0.0, static_cast<double>(h - 1));
        const auto x0 = static_cast<int64_t>(std::floor(px));
        const auto y0 = static_cast<int64_t>(std::floor(py));
        const int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        const double fx = px - static_cast<double>(x0), fy = py - static_cast<double>(y0);
        taps[static_cast<size_t>((b * out_h + oy) * out_w + ox)] = {
            y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1,
            (1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
      }
  }
  const int64_t plane = out_h * out_w;
  std::vector<double> out(static_cast<size_t>(n * c * plane));
  const auto xv = x.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* src = xv.data() + (b * c + ch) * h * w;
      double* dst = out.data() + (b * c + ch) * plane;
      for (int64_t p = 0; p < plane; ++p) {
        const Tap& t = taps[static_cast<size_t>(b * plane + p)];
        dst[p] = t.w00 * src[t.i00] + t.w01 * src[t.i01] + t.w10 * src[t.i10] + t.w11 * src[t.i11];
      }
    }
  return detail::make_result({n, c, out_h, out_w}, std::move(out), {x}, [n, c, h, w, plane, taps = std::move(taps)](detail::Node& self) {
    auto* g = self.parent_grad(0);
    if (!g) return;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        double* dst = g->data() + (b * c + ch) * h * w;
        const double* gy = self.grad.data() + (b * c + ch) * plane;
        for (int64_t p = 0; p < plane; ++p) {
          const Tap& t = taps[static_cast<size_t>(b * plane + p)];
          dst[t.i00] += t.w00 * gy[p];
          dst[t.i01] += t.w01 * gy[p];
          dst[t.i10] += t.w10 * gy[p];
          dst[t.i11] += t.w11 * gy[p];
        }
      }
  });
}

}  // namespace idportrait
