#include "safnet/autograd.hpp"

#include <unordered_set>
#include <utility>

namespace safnet::ag {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Var<T> Var<T>::from_op(Tensor<T> value, std::vector<Var> inputs,
                       BackwardFn<T> backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  out.node_->backward = std::move(backward);
  return out;
}

template <typename T>
void accumulate(Node<T>& node, const Tensor<T>& g) {
  if (!node.requires_grad) return;
  if (node.grad.shape() != node.value.shape()) {
    node.grad = g;
    return;
  }
  node.grad += g;
}

template <typename T>
void backward(const Var<T>& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw ShapeError("backward() needs a scalar root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS yields a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root.node()->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward) continue;
    if (node->grad.shape() != node->value.shape()) continue;  // unreachable
    node->backward(*node);
    // Interior gradients are not needed once propagated.
    node->grad = Tensor<T>();
  }
}

template class Var<float>;
template class Var<double>;
template void backward(const Var<float>&);
template void backward(const Var<double>&);
template void accumulate(Node<float>&, const Tensor<float>&);
template void accumulate(Node<double>&, const Tensor<double>&);

}  // namespace safnet::ag
