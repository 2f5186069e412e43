// Copyright 2026 The m3 Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "m3/numerics/tensor.hpp"

namespace m3 {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  /// Reads `self.grad` and accumulates into the parents' grad buffers.
  std::function<void(Node& self)> backward;

  /// Grad buffer, zero-initialized on first use.
  Tensor<T>& grad_buffer() {
    if (grad.numel() != value.numel() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node of the recorded computation graph.
///
/// Leaves created with `parameter` accumulate gradients across `backward`
/// calls until `zero_grad`. Interior nodes release their gradient buffers
/// once they have been propagated, so each graph supports one backward pass.
template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;
  using BackwardFn = std::function<void(Node<T>&)>;

  Var() = default;

  static Var parameter(Tensor<T> value);
  static Var constant(Tensor<T> value);

  /// Creates an interior node. `fn` is dropped when no parent requires grad.
  static Var make(Tensor<T> value, std::vector<Var> parents, BackwardFn fn, const char* op);

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  /// Accumulated gradient; an all-zero tensor if nothing was accumulated.
  Tensor<T> grad() const;
  bool has_grad() const { return node_->grad.numel() > 0; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  /// Direct access for optimizers; only meaningful on leaves.
  Tensor<T>& mutable_value() { return node_->value; }

  /// Seeds d(self)/d(self) = 1 (self must be single-element) and propagates.
  void backward();

  Node<T>* node() const noexcept { return node_.get(); }
  const NodePtr& node_ptr() const noexcept { return node_; }

 private:
  explicit Var(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

extern template class Var<float>;
extern template class Var<double>;

}  // namespace m3
