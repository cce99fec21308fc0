#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "factorizer/tensor.hpp"

namespace factorizer {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Scoped switch disabling graph recording (inference / plain evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a node of a dynamically recorded computation graph. Operations
/// on Vars append nodes; backward() walks the recorded graph once in reverse
/// topological order, accumulating gradients additively at fan-outs, then
/// consumes the graph (leaf gradients survive).
template <typename T>
class Var {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // unallocated until first contribution
    bool requires_grad = false;
    bool is_leaf = true;
    bool has_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
  };

  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  const Tensor<T>& grad() const {
    if (!node_->has_grad) {
      // Zero gradient for reachable-but-never-contributed leaves.
      node_->grad = Tensor<T>::zeros(node_->value.shape());
      node_->has_grad = true;
    }
    return node_->grad;
  }

  void zero_grad() {
    node_->grad = Tensor<T>();
    node_->has_grad = false;
  }

  /// Leaf parameter update; invalid on interior graph nodes.
  void set_value(Tensor<T> value) {
    if (!node_->is_leaf) throw UsageError("set_value on a non-leaf graph node");
    if (value.shape() != node_->value.shape())
      throw ShapeError("set_value shape mismatch: " + shape_str(value.shape()) + " vs " +
                       shape_str(node_->value.shape()));
    node_->value = std::move(value);
  }

  Var detach() const { return Var(node_->value, false); }

  void accumulate_grad(const Tensor<T>& contribution) const {
    if (!node_->requires_grad) return;
    if (!node_->has_grad) {
      node_->grad = contribution.clone();
      node_->has_grad = true;
      return;
    }
    auto dst = node_->grad.mutable_data();
    auto src = contribution.data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void backward() const {
    if (node_->value.numel() != 1)
      throw UsageError("backward() requires a scalar, got " + shape_str(node_->value.shape()));
    if (!node_->requires_grad) return;

    // The order holds owning references: consuming a node's edges below must
    // not free nodes that are still waiting for their backward call.
    std::vector<std::shared_ptr<Node>> order;
    topo_order(order);

    node_->grad = Tensor<T>::ones({1});
    node_->has_grad = true;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = it->get();
      if (n->backward_fn && n->has_grad) n->backward_fn(*n);
      // Consume the graph: drop edges and interior gradients.
      n->backward_fn = nullptr;
      n->parents.clear();
      if (!n->is_leaf) {
        n->grad = Tensor<T>();
        n->has_grad = false;
      }
    }
  }

  static Var make_op(Tensor<T> value, std::vector<Var> parents,
                     std::function<void(Node&)> backward_fn) {
    bool track = grad_enabled();
    bool any = false;
    if (track)
      for (const Var& p : parents) any = any || p.requires_grad();
    Var out(std::move(value), track && any);
    if (out.requires_grad()) {
      out.node_->is_leaf = false;
      out.node_->parents = std::move(parents);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

  typename std::shared_ptr<Node> node() const { return node_; }

 private:
  void topo_order(std::vector<std::shared_ptr<Node>>& order) const {
    std::unordered_set<Node*> visited;
    std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack;
    stack.emplace_back(node_, 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        const std::shared_ptr<Node>& p = n->parents[next++].node_;
        if (p && p->requires_grad && !visited.count(p.get())) {
          visited.insert(p.get());
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> node_;
};

}  // namespace factorizer
