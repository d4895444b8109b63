#pragma once

// Reverse-mode autodiff on a linear tape. Ops append nodes whose backward
// closures run in reverse creation order (a valid topological order, since an
// op can only reference earlier nodes). Gradient accumulation is elementwise
// in fixed loops, so repeated runs are bit-identical for a fixed seed.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hafusion/tensor.hpp"

namespace hafusion {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
  std::size_t numel() const { return value.numel(); }
};

using VarId = std::uint32_t;

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, VarId)>;

  // Binds a parameter as a leaf; backward() accumulates into p.grad.
  VarId leaf(Parameter<T>& p) {
    VarId id = push(Tensor<T>(p.value), true, nullptr);
    nodes_[id].param = &p;
    return id;
  }

  VarId constant(Tensor<T> v) {
    require_finite(v, "constant");
    return push(std::move(v), false, nullptr);
  }

  // `needs_grad` should be true iff any input requires gradients; when false
  // the backward closure is dropped and the node acts as a constant.
  VarId make(Tensor<T> value, bool needs_grad, BackwardFn bw) {
    return push(std::move(value), needs_grad, needs_grad ? std::move(bw) : nullptr);
  }

  const Tensor<T>& val(VarId id) const { return nodes_[id].value; }
  bool wants_grad(VarId id) const { return nodes_[id].requires_grad; }

  bool has_grad(VarId id) const { return !nodes_[id].grad.empty(); }

  // Gradient buffer, allocated as zeros on first access.
  Tensor<T>& grad(VarId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  const Tensor<T>& grad_view(VarId id) const { return nodes_[id].grad; }

  void backward(VarId root) {
    if (nodes_[root].value.numel() != 1) {
      throw ShapeError("backward root must be a scalar");
    }
    grad(root).fill(T(1));
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, static_cast<VarId>(i));
      if (n.param) {
        T* pg = n.param->grad.data();
        const T* g = n.grad.data();
        for (std::size_t j = 0; j < n.grad.numel(); ++j) pg[j] += g[j];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  VarId push(Tensor<T> value, bool needs_grad, BackwardFn bw) {
    Node n;
    n.value = std::move(value);
    n.backward = std::move(bw);
    n.requires_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace hafusion
