#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "safnet/tensor.hpp"

namespace safnet::ag {

template <typename T>
struct Node;

// Backward closures receive the node they belong to; the upstream gradient
// lives in `self.grad` and inputs are reachable through `self.inputs`.
template <typename T>
using BackwardFn = std::function<void(Node<T>& self)>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;

  // Zero-initialised gradient buffer with the value's shape.
  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Handle to a node of a dynamically recorded computation graph. Copies share
// the node. Leaves created with requires_grad=true act as parameters.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);

  // Records an operation result. The graph edge is only kept when at least one
  // input requires a gradient, so inference runs without retaining history.
  static Var from_op(Tensor<T> value, std::vector<Var> inputs,
                     BackwardFn<T> backward);

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Empty tensor until a backward pass reaches this variable.
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  // Same value, no history.
  Var detach() const { return Var(node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  bool same_node(const Var& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Reverse-mode sweep from a scalar (1x1x1x1) root, seeding d(root)=1.
template <typename T>
void backward(const Var<T>& root);

// Accumulates `g` into the node's gradient when it requires one.
template <typename T>
void accumulate(Node<T>& node, const Tensor<T>& g);

}  // namespace safnet::ag
