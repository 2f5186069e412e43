// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#include "m3/numerics/autograd.hpp"

#include <unordered_set>
#include <utility>

namespace m3 {

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::make(Tensor<T> value, std::vector<Var> parents, BackwardFn fn, const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  for (const Var& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (Var& p : parents) node->parents.push_back(std::move(p.node_));
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (node_->grad.numel() == node_->value.numel() && node_->grad.numel() > 0) return node_->grad;
  return Tensor<T>(node_->value.shape());
}

template <typename T>
void Var<T>::backward() {
  if (node_->value.numel() != 1) {
    throw DimensionError("backward() requires a single-element output, got " +
                         shape_str(node_->value.shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; `order` ends with the root. Owning pointers keep
  // every node alive while parents are released below.
  std::vector<NodePtr> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodePtr p = n->parents[next++];
      if (p->requires_grad && visited.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.backward) continue;  // leaf
    if (n.grad.numel() > 0) n.backward(n);
    n.grad = Tensor<T>();
    n.backward = nullptr;
    n.parents.clear();
  }
}

template class Var<float>;
template class Var<double>;

}  // namespace m3
