#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bevfuse/diffcore/parameters.hpp"
#include "bevfuse/diffcore/tensor.hpp"

namespace bevfuse::diff {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
};

/// Propagates the gradient of node `self` into its inputs.
using BackwardFn = std::function<void(Graph& g, std::size_t self)>;

struct Node {
  std::string op;
  std::vector<std::size_t> inputs;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  BackwardFn backward;
  std::string param;  // non-empty for parameter leaves
};

/// Define-by-run operation tape. Every op appends a node after its inputs, so
/// node order is a topological order; backward walks it in reverse.
class Graph {
 public:
  Graph() = default;
  explicit Graph(const ParameterStore* params, bool train = true)
      : params_(params), train_(train) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding data. Gradients are tracked when `requires_grad`.
  Var input(Tensor value, bool requires_grad = false, std::string op = "input") {
    Node n;
    n.op = std::move(op);
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    n.value.set_requires_grad(requires_grad);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return input(std::move(value), false, "constant"); }

  /// Leaf bound to a named parameter of the attached store. Repeated lookups
  /// share one node, so gradients of shared weights accumulate there.
  Var param(const std::string& name) {
    if (!params_) throw std::logic_error("graph has no parameter store");
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Var v = input(params_->get(name), train_, "param");
    nodes_[v.id].param = name;
    param_nodes_.emplace(name, v.id);
    return v;
  }

  bool has_param_store() const { return params_ != nullptr; }
  const ParameterStore& params() const { return *params_; }
  bool training() const { return train_; }

  /// Appends an op node. The backward closure is dropped when no input
  /// tracks gradients.
  Var emplace(std::string op, std::vector<std::size_t> inputs, Tensor value,
              BackwardFn backward) {
    Node n;
    n.op = std::move(op);
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) {
        throw std::logic_error("op '" + n.op + "' references unknown node");
      }
      n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of node `id`, zero-initialized on first touch.
  Tensor& grad_ref(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  const Tensor& grad(Var v) const { return grad(v.id); }
  const Tensor& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) {
      throw std::logic_error("no gradient recorded for node " +
                             std::to_string(id) + " (" + n.op + ")");
    }
    return n.grad;
  }

  /// Reverse pass seeded with d(objective)/d(output) for each given output.
  void backward(const std::vector<std::pair<Var, Tensor>>& seeds) {
    if (nodes_.empty() || seeds.empty()) {
      throw std::logic_error("backward called before forward");
    }
    if (ran_backward_) {
      throw std::logic_error("backward already ran on this graph");
    }
    std::size_t last = 0;
    for (const auto& [v, seed] : seeds) {
      if (v.graph != this || v.id >= nodes_.size()) {
        throw std::logic_error("backward seed refers to a foreign node");
      }
      if (seed.shape() != nodes_[v.id].value.shape()) {
        throw ShapeError("backward seed for node " + std::to_string(v.id) +
                         " (" + nodes_[v.id].op + ") has shape " +
                         shape_str(seed.shape()) + ", expected " +
                         shape_str(nodes_[v.id].value.shape()));
      }
      Tensor& g = grad_ref(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
      last = std::max(last, v.id);
    }
    ran_backward_ = true;
    for (std::size_t id = last + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward) continue;
      if (n.grad.shape() != n.value.shape()) continue;  // untouched
      n.backward(*this, id);
    }
  }

  void backward(Var scalar_output) {
    backward({{scalar_output, Tensor(scalar_output.value().shape(), 1.0)}});
  }

  /// Gradients of every parameter leaf that received one.
  GradMap param_grads() const {
    GradMap out;
    for (const auto& [name, id] : param_nodes_) {
      const Node& n = nodes_[id];
      if (n.grad.shape() == n.value.shape()) {
        out.emplace(name, n.grad);
      } else {
        out.emplace(name, Tensor(n.value.shape()));
      }
    }
    return out;
  }

  /// Ops with non-differentiable points (relu kinks, sampling cell changes)
  /// fold their branch decisions in here; finite-difference checks compare it
  /// between perturbed runs to detect probes that straddle a kink.
  void note_branch(std::uint64_t h) {
    branch_signature_ ^= h + 0x9E3779B97F4A7C15ull + (branch_signature_ << 6) +
                         (branch_signature_ >> 2);
  }
  std::uint64_t branch_signature() const { return branch_signature_; }

  std::string describe(std::size_t id) const {
    return "node " + std::to_string(id) + " (" + nodes_.at(id).op + ")";
  }

 private:
  const ParameterStore* params_ = nullptr;
  bool train_ = true;
  bool ran_backward_ = false;
  std::deque<Node> nodes_;  // stable references to values and grads
  std::map<std::string, std::size_t> param_nodes_;
  std::uint64_t branch_signature_ = 0;
};

inline const Tensor& Var::value() const { return graph->value(id); }

inline void require_same_graph(Var a, Var b, const char* op) {
  if (a.graph != b.graph || a.graph == nullptr) {
    throw std::logic_error(std::string(op) + ": operands from different graphs");
  }
}

inline std::uint64_t hash_bits(const std::vector<bool>& bits) {
  std::uint64_t h = 1469598103934665603ull;
  std::uint64_t word = 0;
  std::size_t k = 0;
  for (bool b : bits) {
    word = (word << 1) | (b ? 1u : 0u);
    if (++k == 64) {
      h = (h ^ word) * 1099511628211ull;
      word = 0;
      k = 0;
    }
  }
  return (h ^ word ^ bits.size()) * 1099511628211ull;
}

}  // namespace bevfuse::diff
