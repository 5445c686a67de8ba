#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fhrformer/errors.hpp"
#include "fhrformer/tensor.hpp"

namespace fhrformer {

template <typename S>
class GraphT;

/// Handle to a node inside a GraphT. Cheap to copy.
template <typename S>
struct VarT {
  GraphT<S>* graph = nullptr;
  int id = -1;

  const TensorT<S>& value() const { return graph->node(id).value; }
  const TensorT<S>& grad() const { return graph->node(id).grad; }
  int rows() const { return value().rows(); }
  int cols() const { return value().cols(); }
};

/// Tape of forward operations. Backward traverses nodes in exact reverse
/// insertion order; a node used several times receives the sum of all path
/// gradients. One graph is confined to a single forward+backward lifetime.
template <typename S>
class GraphT {
 public:
  using BackwardFn = std::function<void(GraphT&, int)>;

  struct Node {
    TensorT<S> value;
    TensorT<S> grad;  // allocated on first contribution
    bool requires_grad = false;
    BackwardFn backward;
    ParameterT<S>* param = nullptr;
    const char* op = "";
  };

  VarT<S> constant(TensorT<S> value, const char* op = "constant") {
    return push(std::move(value), false, nullptr, op);
  }

  /// Leaf backed by a persistent parameter; backward() accumulates into
  /// param.grad.
  VarT<S> parameter(ParameterT<S>& p) {
    VarT<S> v = push(p.value, true, nullptr, "parameter");
    nodes_[v.id].param = &p;
    return v;
  }

  /// Leaf tensor that participates in differentiation without being a model
  /// parameter (used by gradient checks).
  VarT<S> input(TensorT<S> value, const char* op = "input") {
    return push(std::move(value), true, nullptr, op);
  }

  VarT<S> push(TensorT<S> value, bool requires_grad, BackwardFn backward,
               const char* op) {
    if (!value.all_finite())
      throw NumericError(std::string("non-finite values produced by op '") + op + "'");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    n.op = op;
    nodes_.push_back(std::move(n));
    return VarT<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Adds `delta` into the gradient buffer of node `id` (no-op when that node
  /// does not require gradients).
  template <typename Expr>
  void accumulate(int id, const Expr& delta) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = n.value;
      n.grad.set_zero();
    }
    n.grad.mat() += delta;
  }

  bool seeded(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  /// Reverse pass from a scalar root. Parameter leaves flush their gradient
  /// into the owning ParameterT, scaled by `grad_scale`.
  void backward(VarT<S> root, S grad_scale = S(1)) {
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (r.value.size() != 1) throw DimensionError("backward root must be scalar");
    if (!r.requires_grad) return;
    if (r.grad.empty()) {
      r.grad = r.value;
      r.grad.set_zero();
    }
    r.grad.at(0) += S(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        if (!n.param->grad.same_shape(n.grad))
          throw DimensionError("gradient shape mismatch for parameter " + n.param->name);
        n.param->grad.mat() += grad_scale * n.grad.mat();
      }
    }
  }

 private:
  std::vector<Node> nodes_;
};

using Graph = GraphT<float>;
using Var = VarT<float>;

}  // namespace fhrformer
