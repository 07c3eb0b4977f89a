#pragma once

// Tape-free reverse-mode autodiff: every op result keeps shared pointers to its
// inputs plus a closure that pushes its gradient into them. backward() walks
// the graph in reverse topological order.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hat/tensor.hpp"

namespace hat {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(size_t i) const { return node_->value.dim(i); }
  int64_t numel() const { return node_->value.numel(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  T item() const {
    if (numel() != 1) throw InputError("item() on non-scalar " + shape_str(shape()));
    return value()[0];
  }

  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

  /// Seeds d(self)/d(self) = 1; self must be a scalar.
  void backward() const {
    if (numel() != 1) throw InputError("backward() without seed on non-scalar output");
    backward(Tensor<T>(shape(), T(1)));
  }

  void backward(const Tensor<T>& seed) const {
    if (!requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    Tensor<T>& g = node_->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The backward closure is only kept when grad mode is on
/// and some input needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& v : inputs) node->parents.push_back(v.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

/// Gradient accumulation target for input `i` of a node, or nullptr when that
/// input does not need a gradient.
template <typename T>
Tensor<T>* grad_of(Node<T>& n, size_t i) {
  Node<T>* p = n.parents[i].get();
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace hat
