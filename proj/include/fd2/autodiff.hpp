#pragma once

#include <cstddef>
#include <deque>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fd2/tensor.hpp"

namespace fd2 {

/// Named trainable (or buffer) tensor with a gradient of identical shape.
template <Scalar T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value, bool trainable = true)
      : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()), trainable_(trainable) {}

  const std::string& name() const { return name_; }
  void rename(std::string name) { name_ = std::move(name); }
  bool trainable() const { return trainable_; }
  const Shape& shape() const { return value_.shape(); }

  const Tensor<T>& value() const { return value_; }
  const Tensor<T>& grad() const { return grad_; }
  Tensor<T>& grad() { return grad_; }

  /// Write access to the value; invalidates graphs that recorded this parameter.
  Tensor<T>& mutable_value() {
    ++version_;
    return value_;
  }

  void assign(Tensor<T> value) {
    if (value.shape() != value_.shape()) {
      throw ShapeError("parameter " + name_ + ": assigning " + value.shape().str() + " over " +
                       value_.shape().str());
    }
    ++version_;
    value_ = std::move(value);
  }

  void zero_grad() { grad_.fill(T{0}); }
  std::uint64_t version() const { return version_; }

 private:
  std::string name_;
  Tensor<T> value_;
  Tensor<T> grad_;
  bool trainable_ = true;
  std::uint64_t version_ = 0;
};

template <Scalar T>
using ParamList = std::vector<Parameter<T>*>;

template <Scalar T>
std::size_t count_elements(const ParamList<T>& params, bool trainable_only = true) {
  std::size_t total = 0;
  for (const auto* p : params) {
    if (!trainable_only || p->trainable()) total += p->value().size();
  }
  return total;
}

template <Scalar T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <Scalar T>
class Graph;

/// Handle to a node of a Graph.
template <Scalar T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Tape of executed operations for one forward pass. Adjoints are replayed
/// in reverse recording order by backward(); the tape may be replayed once.
template <Scalar T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf whose gradient is kept after backward.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, nullptr); }

  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push(p.value(), p.trainable(), nullptr);
    param_nodes_.emplace(&p, v.id);
    nodes_[v.id].param = &p;
    nodes_[v.id].param_version = p.version();
    return v;
  }

  /// Appends an op result. The backward closure runs only if some input requires grad.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owned(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient of a leaf after backward (zeros if it received none).
  Tensor<T> grad(Var<T> v) const {
    check_owned(v);
    const Node& node = nodes_[v.id];
    if (node.grad.empty()) return Tensor<T>(node.value.shape());
    return node.grad;
  }

  /// Adds `g` into the adjoint of `v`; no-op for nodes outside the gradient path.
  void accumulate(Var<T> v, const Tensor<T>& g) {
    Tensor<T>* slot = grad_slot(v);
    if (slot == nullptr) return;
    if (g.shape() != slot->shape()) {
      throw ShapeError("accumulate: gradient " + g.shape().str() + " for node of shape " + slot->shape().str());
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
  }

  /// Zero-initialized adjoint buffer of `v`, or nullptr if `v` needs no gradient.
  Tensor<T>* grad_slot(Var<T> v) {
    check_owned(v);
    Node& node = nodes_[v.id];
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return &node.grad;
  }

  void backward(Var<T> loss) {
    check_owned(loss);
    if (replayed_) throw GraphError("backward: graph has already been replayed");
    const Shape& ls = nodes_[loss.id].value.shape();
    if (ls != Shape{1, 1, 1, 1}) throw GraphError("backward: loss must be scalar, got " + ls.str());
    for (const Node& node : nodes_) {
      if (node.param != nullptr && node.param->version() != node.param_version) {
        throw GraphError("backward: parameter '" + node.param->name() + "' was modified after recording");
      }
    }
    replayed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor<T>::scalar(T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.grad.empty()) continue;
      if (node.backward) {
        node.backward(*this, node.grad);
        node.grad = Tensor<T>();  // interior adjoints are not kept
        node.backward = nullptr;
      } else if (node.param != nullptr) {
        Tensor<T>& pg = node.param->grad();
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += node.grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool replayed() const { return replayed_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    std::uint64_t param_version = 0;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    if (replayed_) throw GraphError("graph was mutated after backward");
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn), nullptr, 0});
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owned(Var<T> v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw GraphError("variable does not belong to this graph");
  }

  std::deque<Node> nodes_;  // stable references across push_back
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool replayed_ = false;
};

}  // namespace fd2
