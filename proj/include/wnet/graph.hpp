// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "wnet/tensor.hpp"

namespace wnet {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
class Graph;
template <class T>
class Var;

/// A learnable (or buffered) array that outlives any single graph.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

template <class T>
using BackwardFn = std::function<std::vector<Var<T>>(const Var<T>& out, const Var<T>& grad,
                                                     const std::vector<bool>& needs)>;

template <class T>
struct Node {
  Tensor<T> value;
  Graph<T>* graph = nullptr;
  std::size_t index = 0;
  bool requires_grad = false;
  bool twice_differentiable = true;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;
  Parameter<T>* param = nullptr;
};

/// Handle to a node. A Var without a graph is a constant.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = "constant";
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  explicit operator bool() const noexcept { return defined(); }

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(std::size_t i) const { return node_->value.dim(i); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Graph<T>* graph() const { return node_ ? node_->graph : nullptr; }
  const std::string& op() const { return node_->op; }
  T item() const { return node_->value.item(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Gradients for every leaf that required one, keyed by node or by parameter.
template <class T>
class GradientMap {
 public:
  void set(Node<T>* node, Tensor<T> g) {
    if (node->param) by_param_[node->param] = g;
    by_node_[node] = std::move(g);
  }
  const Tensor<T>& of(const Var<T>& v) const {
    auto it = by_node_.find(v.node());
    if (it == by_node_.end()) throw GraphError("no gradient recorded for node '" + v.op() + "'");
    return it->second;
  }
  const Tensor<T>& of(const Parameter<T>& p) const {
    auto it = by_param_.find(&p);
    if (it == by_param_.end()) throw GraphError("parameter '" + p.name + "' is not part of the graph");
    return it->second;
  }
  bool contains(const Parameter<T>& p) const { return by_param_.count(&p) != 0; }
  const std::unordered_map<const Parameter<T>*, Tensor<T>>& parameters() const { return by_param_; }

 private:
  std::unordered_map<const Node<T>*, Tensor<T>> by_node_;
  std::unordered_map<const Parameter<T>*, Tensor<T>> by_param_;
};

namespace detail {
template <class T>
Var<T> accumulate(const Var<T>& a, const Var<T>& b, bool record);
}  // namespace detail

/// Append-only tape. Creation order is a topological order, so backward
/// sweeps the tape in reverse.
template <class T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf whose gradient is reported by backward().
  Var<T> variable(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = "variable";
    n->requires_grad = true;
    return append(std::move(n));
  }

  /// Constant input; never receives gradient.
  Var<T> input(Tensor<T> value) { return Var<T>::constant(std::move(value)); }

  /// Leaf bound to a persistent parameter. Repeated calls share one node.
  Var<T> param(Parameter<T>& p) {
    if (auto it = params_.find(&p); it != params_.end()) return Var<T>(it->second);
    auto n = std::make_shared<Node<T>>();
    n->value = p.value;
    n->op = "param:" + p.name;
    n->requires_grad = p.trainable;
    n->param = &p;
    Var<T> v = n->requires_grad ? append(n) : Var<T>(n);
    params_[&p] = v.shared();
    return v;
  }

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records `value` as the output of an op over `inputs`, or returns a
  /// constant when nothing upstream requires a gradient.
  Var<T> record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn<T> fn,
                bool twice_differentiable = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = std::move(op);
    if (!recording_) return Var<T>(std::move(n));
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return Var<T>(std::move(n));
    n->requires_grad = true;
    n->twice_differentiable = twice_differentiable;
    n->backward = std::move(fn);
    n->inputs.reserve(inputs.size());
    for (const auto& in : inputs) n->inputs.push_back(in.shared());
    return append(std::move(n));
  }

  /// Full reverse sweep from a scalar loss. Allowed once per tape.
  GradientMap<T> backward(const Var<T>& loss) {
    if (backward_done_) throw GraphError("backward already ran on this graph; reset() first");
    auto grads = sweep(loss, false);
    backward_done_ = true;
    GradientMap<T> out;
    for (const auto& n : nodes_) {
      if (!n->requires_grad || !n->inputs.empty()) continue;
      const auto& g = grads[n->index];
      out.set(n.get(), g ? g.value() : Tensor<T>(n->value.shape()));
    }
    return out;
  }

  /// d(output)/d(input). With create_graph the result is itself recorded
  /// and may feed a further loss.
  Var<T> grad(const Var<T>& output, const Var<T>& input, bool create_graph) {
    if (input.graph() != this) throw GraphError("grad: input does not belong to this graph");
    auto grads = sweep(output, create_graph);
    const auto& g = grads[input.node()->index];
    if (g) return g;
    return Var<T>::constant(Tensor<T>(input.shape()));
  }

  void reset() {
    nodes_.clear();
    params_.clear();
    backward_done_ = false;
  }

 private:
  Var<T> append(std::shared_ptr<Node<T>> n) {
    n->graph = this;
    n->index = nodes_.size();
    nodes_.push_back(n);
    return Var<T>(std::move(n));
  }

  std::vector<Var<T>> sweep(const Var<T>& out, bool create_graph) {
    if (out.size() != 1) throw GraphError("loss must be scalar, got shape " + to_string(out.shape()));
    const std::size_t count = nodes_.size();
    std::vector<Var<T>> grads(count);
    // A constant output has zero gradient everywhere.
    if (!out.graph()) return grads;
    if (out.graph() != this) throw GraphError("loss does not belong to this graph");
    grads[out.node()->index] = Var<T>::constant(Tensor<T>(out.shape(), T(1)));

    const bool saved = recording_;
    recording_ = create_graph;
    try {
      for (std::size_t i = out.node()->index + 1; i-- > 0;) {
        Node<T>* n = nodes_[i].get();
        if (!grads[i] || n->inputs.empty()) continue;
        if (create_graph && !n->twice_differentiable) {
          throw GraphError("op '" + n->op + "' has no second-derivative rule");
        }
        std::vector<bool> needs(n->inputs.size());
        for (std::size_t k = 0; k < needs.size(); ++k) needs[k] = n->inputs[k]->requires_grad;
        Var<T> self(nodes_[i]);
        auto in_grads = n->backward(self, grads[i], needs);
        if (!create_graph) grads[i] = Var<T>();
        for (std::size_t k = 0; k < n->inputs.size(); ++k) {
          if (!needs[k] || !in_grads[k]) continue;
          Node<T>* in = n->inputs[k].get();
          if (in->graph != this) continue;
          auto& slot = grads[in->index];
          slot = slot ? detail::accumulate(slot, in_grads[k], create_graph) : in_grads[k];
        }
      }
    } catch (...) {
      recording_ = saved;
      throw;
    }
    recording_ = saved;
    return grads;
  }

  std::vector<std::shared_ptr<Node<T>>> nodes_;
  std::unordered_map<const Parameter<T>*, std::shared_ptr<Node<T>>> params_;
  bool recording_ = true;
  bool backward_done_ = false;
};

/// Suspends recording on a graph for the lifetime of the guard.
template <class T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Graph<T>& g) : graph_(g), saved_(g.recording()) { g.set_recording(false); }
  ~NoGradGuard() { graph_.set_recording(saved_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph<T>& graph_;
  bool saved_;
};

}  // namespace wnet
