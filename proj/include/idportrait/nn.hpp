#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "idportrait/ops.hpp"
#include "idportrait/rng.hpp"

namespace idportrait::nn {

/// Seeded parameter factory. Each tensor draws from its own stream derived
/// from (seed, name), so initial values do not depend on creation order.
class ParamInit {
 public:
  explicit ParamInit(uint64_t seed, bool trainable = true) : seed_(seed), trainable_(trainable) {}

  Tensor uniform(const std::string& name, Shape shape, double bound) const {
    Rng rng(derive_seed(seed_, name));
    std::vector<double> v(static_cast<size_t>(numel(shape)));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(v), trainable_);
  }

  Tensor normal(const std::string& name, Shape shape, double stddev) const {
    Rng rng(derive_seed(seed_, name));
    std::vector<double> v(static_cast<size_t>(numel(shape)));
    for (double& x : v) x = stddev * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(v), trainable_);
  }

  Tensor constant(Shape shape, double value) const { return Tensor::full(std::move(shape), value, trainable_); }

  bool trainable() const { return trainable_; }

 private:
  uint64_t seed_;
  bool trainable_;
};

/// Visitor signature used by every weight struct: f(name, tensor&).
template <class F>
void visit_tensor(F& f, const std::string& name, Tensor& t) {
  if (t.defined()) f(name, t);
}

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined

  static Linear make(const ParamInit& init, const std::string& name, int64_t in, int64_t out, bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = init.uniform(name + ".weight", {out, in}, bound);
    if (with_bias) l.bias = init.constant({out}, 0.0);
    return l;
  }

  int64_t in_features() const { return weight.dim(1); }
  int64_t out_features() const { return weight.dim(0); }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  template <class F>
  void visit(F& f, const std::string& prefix) {
    visit_tensor(f, prefix + ".weight", weight);
    visit_tensor(f, prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gamma, beta;  // [d]

  static LayerNorm make(const ParamInit& init, int64_t d) {
    return {init.constant({d}, 1.0), init.constant({d}, 0.0)};
  }

  Tensor operator()(const Tensor& x) const { return add(mul(standardize(x), gamma), beta); }

  template <class F>
  void visit(F& f, const std::string& prefix) {
    visit_tensor(f, prefix + ".gamma", gamma);
    visit_tensor(f, prefix + ".beta", beta);
  }
};

struct GroupNorm {
  int64_t groups = 1;
  Tensor gamma, beta;  // [C]

  static GroupNorm make(const ParamInit& init, int64_t groups, int64_t channels) {
    if (channels % groups != 0) throw ShapeError("GroupNorm: groups must divide channels");
    return {groups, init.constant({channels}, 1.0), init.constant({channels}, 0.0)};
  }

  Tensor operator()(const Tensor& x) const {
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y = reshape(standardize(reshape(x, {n, groups, (c / groups) * h * w})), {n, c, h, w});
    return add(mul(y, reshape(gamma, {1, c, 1, 1})), reshape(beta, {1, c, 1, 1}));
  }

  template <class F>
  void visit(F& f, const std::string& prefix) {
    visit_tensor(f, prefix + ".gamma", gamma);
    visit_tensor(f, prefix + ".beta", beta);
  }
};

struct Conv2d {
  Tensor weight;  // [Co, Ci, k, k]
  Tensor bias;    // [Co]
  int64_t stride = 1;
  int64_t pad = 0;

  static Conv2d make(const ParamInit& init, const std::string& name, int64_t ci, int64_t co, int64_t k,
                     int64_t stride = 1) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
    return {init.uniform(name + ".weight", {co, ci, k, k}, bound), init.constant({co}, 0.0), stride, k / 2};
  }

  /// A convolution whose weight and bias start at exactly zero.
  static Conv2d make_zero(const ParamInit& init, int64_t ci, int64_t co, int64_t k = 1) {
    return {init.constant({co, ci, k, k}, 0.0), init.constant({co}, 0.0), 1, k / 2};
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

  template <class F>
  void visit(F& f, const std::string& prefix) {
    visit_tensor(f, prefix + ".weight", weight);
    visit_tensor(f, prefix + ".bias", bias);
  }
};

/// softmax(q k^T / sqrt(d_head)) for single-head inputs q: [B, Tq, dh],
/// k: [B, Tk, dh]. Exposed separately so row sums can be inspected.
inline Tensor attention_probs(const Tensor& q, const Tensor& k) {
  const double s = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  return softmax(scale(matmul(q, transpose_last2(k)), s));
}

/// Multi-head scaled dot-product attention on projected inputs.
/// q: [N, Tq, d]; k, v: [N, Tk, d]; heads must divide d.
inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads) {
  const int64_t n = q.dim(0), tq = q.dim(1), d = q.dim(2), tk = k.dim(1);
  if (k.dim(2) != d || v.dim(2) != d || v.dim(1) != tk || k.dim(0) != n || v.dim(0) != n)
    throw ShapeError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                     to_string(v.shape()) + " are inconsistent");
  if (heads < 1 || d % heads != 0) throw ShapeError("attention: heads must divide the model width");
  if (heads == 1) return matmul(attention_probs(q, k), v);
  const int64_t dh = d / heads;
  auto split = [&](const Tensor& x, int64_t t) {
    return reshape(permute(reshape(x, {n, t, heads, dh}), {0, 2, 1, 3}), {n * heads, t, dh});
  };
  Tensor o = matmul(attention_probs(split(q, tq), split(k, tk)), split(v, tk));
  return reshape(permute(reshape(o, {n, heads, tq, dh}), {0, 2, 1, 3}), {n, tq, d});
}

/// Attention block with d -> d projections and no biases.
struct Attention {
  Linear wq, wk, wv, wo;
  int64_t heads = 1;

  static Attention make(const ParamInit& init, const std::string& name, int64_t d, int64_t kv_dim, int64_t heads) {
    if (heads < 1 || d % heads != 0) throw ShapeError("Attention: heads must divide d");
    return {Linear::make(init, name + ".wq", d, d, false), Linear::make(init, name + ".wk", kv_dim, d, false),
            Linear::make(init, name + ".wv", kv_dim, d, false), Linear::make(init, name + ".wo", d, d, false),
            heads};
  }

  int64_t width() const { return wq.out_features(); }

  Tensor operator()(const Tensor& x_q, const Tensor& x_kv) const {
    return wo(scaled_dot_product_attention(wq(x_q), wk(x_kv), wv(x_kv), heads));
  }

  template <class F>
  void visit(F& f, const std::string& prefix) {
    wq.visit(f, prefix + ".wq");
    wk.visit(f, prefix + ".wk");
    wv.visit(f, prefix + ".wv");
    wo.visit(f, prefix + ".wo");
  }
};

/// Deep-copies every tensor reachable through a weight struct's visit().
template <class Weights>
Weights deep_copy(const Weights& w) {
  Weights out = w;
  auto fn = [](const std::string&, Tensor& t) { t = t.clone(); };
  out.visit(fn, "");
  return out;
}

template <class Weights>
void set_trainable(Weights& w, bool trainable) {
  auto fn = [trainable](const std::string&, Tensor& t) { t.set_requires_grad(trainable); };
  w.visit(fn, "");
}

template <class Weights>
std::vector<std::pair<std::string, Tensor>> named_tensors(Weights& w, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> out;
  auto fn = [&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); };
  w.visit(fn, prefix);
  return out;
}

}  // namespace idportrait::nn
