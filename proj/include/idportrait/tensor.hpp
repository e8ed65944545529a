#pragma once

// Dense double-precision tensors with tape-free reverse-mode autodiff.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their parents and a backward closure; calling
// backward() on a scalar walks the graph in reverse topological order and
// accumulates gradients into every leaf with requires_grad set. Interior
// gradients are released as soon as they have been propagated.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "idportrait/errors.hpp"

namespace idportrait {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }

  /// Gradient buffer of parent i, or nullptr when that input needs none.
  std::vector<double>* parent_grad(size_t i) {
    Node* p = parents[i].get();
    if (!p || !p->requires_grad) return nullptr;
    return &p->ensure_grad();
  }

  const std::vector<double>& parent_value(size_t i) const { return parents[i]->value; }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (idportrait::numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("from_data: shape " + to_string(shape) + " holds " +
                       std::to_string(idportrait::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const auto count = static_cast<size_t>(idportrait::numel(shape));
    return from_data(std::move(shape), std::vector<double>(count, v), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar(double v) { return from_data({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  int64_t dim(int64_t i) const {
    const int64_t n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n) throw ShapeError("dim index out of range for shape " + to_string(shape()));
    return node_->shape[static_cast<size_t>(i)];
  }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }

  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  double operator[](int64_t flat) const { return node_->value[static_cast<size_t>(flat)]; }

  /// A new leaf holding a copy of the values and no gradient history.
  Tensor detach() const { return from_data(shape(), node_->value, false); }

  /// A new leaf holding a copy of the values; keeps the requires_grad flag.
  Tensor clone() const { return from_data(shape(), node_->value, node_->requires_grad); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + to_string(shape()));
    if (!node_->requires_grad) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->is_leaf()) continue;
      if (!n->grad.empty()) n->backward_fn(*n);
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

/// Builds an op result, recording parents only when a gradient can flow.
inline Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled) {
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace idportrait
