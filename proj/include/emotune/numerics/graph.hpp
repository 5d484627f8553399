#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "emotune/numerics/random.hpp"
#include "emotune/numerics/tensor.hpp"

namespace emotune {

using NodeId = std::size_t;

/// A differentiable operation. Implementations are immutable once
/// constructed so a graph can be replayed any number of times.
class Primitive {
 public:
  virtual ~Primitive() = default;

  virtual std::string_view name() const = 0;

  /// Throws ShapeError describing the offending operand shapes.
  virtual Tensor forward(std::span<const Tensor* const> inputs) const = 0;

  /// Accumulates (+=) input gradients. Entries of `grads` are null for
  /// inputs that do not need a gradient.
  virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output,
                        const Tensor& grad_output, std::span<Tensor* const> grads) const = 0;
};

struct GraphOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

/// Topologically ordered record of primitive applications.
///
/// Nodes are evaluated eagerly as they are added, and `replay()` recomputes
/// every value after leaves are rebound. Dropout masks are fixed when the
/// dropout node is created, so replays are bitwise reproducible.
class Graph {
 public:
  Graph() = default;
  explicit Graph(GraphOptions options) : options_(options) {}

  bool training() const noexcept { return options_.training; }

  /// Seed for the next stochastic primitive built on this graph.
  std::uint64_t next_stream_seed() { return derive_seed(options_.dropout_seed, stream_counter_++); }

  NodeId input(std::string name, Tensor value, bool requires_grad = false) {
    if (!name.empty()) {
      if (by_name_.count(name)) throw std::invalid_argument("duplicate graph input '" + name + "'");
      by_name_.emplace(name, nodes_.size());
    }
    Node n;
    n.name = std::move(name);
    n.requires_grad = requires_grad || value.requires_grad();
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId constant(Tensor value) { return input({}, std::move(value), false); }

  NodeId apply(std::shared_ptr<const Primitive> op, std::vector<NodeId> inputs) {
    Node n;
    n.op = std::move(op);
    n.inputs = std::move(inputs);
    for (NodeId in : n.inputs) {
      if (in >= nodes_.size()) throw std::out_of_range("graph node input out of range");
      n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    }
    const NodeId id = nodes_.size();
    n.value = run(n, id);
    nodes_.push_back(std::move(n));
    return id;
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool is_leaf(NodeId id) const { return !nodes_.at(id).op; }

  /// Label a node so that `evaluate` can report it by name.
  void set_name(NodeId id, std::string name) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate graph name '" + name + "'");
    by_name_.emplace(name, id);
    nodes_.at(id).name = std::move(name);
  }

  std::optional<NodeId> find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  NodeId at(const std::string& name) const {
    auto id = find(name);
    if (!id) throw std::out_of_range("no graph node named '" + name + "'");
    return *id;
  }

  /// Replace the value of a named leaf. Shapes must not change.
  void rebind(const std::string& name, Tensor value) {
    Node& n = nodes_.at(at(name));
    if (n.op) throw std::invalid_argument("'" + name + "' is not a graph input");
    if (n.value.shape() != value.shape()) {
      throw ShapeError("rebinding '" + name + "': expected " + to_string(n.value.shape()) + ", got " +
                       to_string(value.shape()));
    }
    n.value = std::move(value);
  }

  Tensor& leaf_value(NodeId id) {
    Node& n = nodes_.at(id);
    if (n.op) throw std::invalid_argument("node is not a leaf");
    return n.value;
  }

  /// Recompute every non-leaf node in insertion order.
  void replay() {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].op) nodes_[id].value = run(nodes_[id], id);
    }
  }

  /// Reverse-mode sweep from a scalar node. Returns the gradient of every
  /// named leaf that requires one.
  std::map<std::string, Tensor> backward(NodeId loss) const {
    auto grads = backward_all(loss);
    std::map<std::string, Tensor> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (!n.op && n.requires_grad && !n.name.empty()) {
        out.emplace(n.name, grads[id] ? std::move(*grads[id]) : Tensor::zeros_like(n.value));
      }
    }
    return out;
  }

  /// Leaves that require a gradient, in insertion order.
  std::vector<NodeId> trainable_leaves() const {
    std::vector<NodeId> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      if (!nodes_[id].op && nodes_[id].requires_grad) out.push_back(id);
    }
    return out;
  }

  const std::string& name_of(NodeId id) const { return nodes_.at(id).name; }

 private:
  struct Node {
    std::string name;
    std::shared_ptr<const Primitive> op;
    std::vector<NodeId> inputs;
    Tensor value;
    bool requires_grad = false;
  };

  std::string describe(const Node& n, NodeId id) const {
    std::string s(n.op ? n.op->name() : std::string_view("input"));
    s += "#" + std::to_string(id);
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s;
  }

  Tensor run(const Node& n, NodeId id) const {
    std::vector<const Tensor*> ins;
    ins.reserve(n.inputs.size());
    for (NodeId in : n.inputs) ins.push_back(&nodes_[in].value);
    try {
      return n.op->forward(ins);
    } catch (const ShapeError& e) {
      throw ShapeError("node " + describe(n, id) + ": " + e.what());
    }
  }

  std::vector<std::optional<Tensor>> backward_all(NodeId loss) const {
    const Node& root = nodes_.at(loss);
    if (!root.value.is_scalar()) {
      throw ShapeError("loss node " + describe(root, loss) + " must be scalar, has shape " +
                       to_string(root.value.shape()));
    }
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[loss] = Tensor(root.value.shape(), 1.0);
    std::vector<const Tensor*> ins;
    std::vector<Tensor*> gins;
    for (NodeId id = loss + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (!n.op || !grads[id] || !n.requires_grad) continue;
      ins.clear();
      gins.clear();
      for (NodeId in : n.inputs) {
        ins.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (!grads[in]) grads[in] = Tensor::zeros_like(nodes_[in].value);
          gins.push_back(&*grads[in]);
        } else {
          gins.push_back(nullptr);
        }
      }
      n.op->backward(ins, n.value, *grads[id], gins);
      if (id != loss) grads[id].reset();
    }
    return grads;
  }

  GraphOptions options_;
  std::uint64_t stream_counter_ = 0;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> by_name_;
};

using NamedTensors = std::map<std::string, Tensor>;

/// Bind `inputs` to the graph's named leaves, replay, and return the values
/// of the requested named nodes.
inline NamedTensors evaluate(Graph& graph, const NamedTensors& inputs,
                             const std::vector<std::string>& outputs) {
  for (const auto& [name, value] : inputs) graph.rebind(name, value);
  graph.replay();
  NamedTensors out;
  for (const auto& name : outputs) out.emplace(name, graph.value(graph.at(name)));
  return out;
}

inline NamedTensors gradients(Graph& graph, const NamedTensors& inputs, NodeId loss) {
  for (const auto& [name, value] : inputs) graph.rebind(name, value);
  graph.replay();
  return graph.backward(loss);
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute, which keeps near-zero entries from reporting
/// round-off noise as error.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

/// Compare analytic gradients of `loss` against central differences for
/// every trainable leaf entry.
inline GradCheckResult grad_check(Graph& graph, const NamedTensors& inputs, NodeId loss,
                                  double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw std::invalid_argument("epsilon must be in (0, 1e-2]");
  for (const auto& [name, value] : inputs) graph.rebind(name, value);
  graph.replay();
  const auto analytic = graph.backward(loss);

  GradCheckResult result;
  for (NodeId leaf : graph.trainable_leaves()) {
    const std::string& name = graph.name_of(leaf);
    if (name.empty()) continue;
    const Tensor& grad = analytic.at(name);
    Tensor& value = graph.leaf_value(leaf);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + epsilon;
      graph.replay();
      const double plus = graph.value(loss).item();
      value[i] = saved - epsilon;
      graph.replay();
      const double minus = graph.value(loss).item();
      value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double err = relative_error(grad[i], numeric);
      if (err > result.max_relative_error || result.worst_input.empty()) {
        if (err >= result.max_relative_error) {
          result.max_relative_error = err;
          result.worst_input = name;
          result.worst_index = i;
          result.analytic = grad[i];
          result.numeric = numeric;
        }
      }
    }
  }
  graph.replay();
  return result;
}

}  // namespace emotune
