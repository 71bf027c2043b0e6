#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modelzoo/tensor.hpp"

namespace modelzoo {

using NodeId = std::size_t;
inline constexpr NodeId kNoNode = static_cast<NodeId>(-1);

enum class Op {
  kInput,
  kParam,
  kLinear,       // W x + b, x of shape [in] or [n, in]
  kConv2d,       // x [H, W, C] * K [k, k, C, M] + b [M]
  kActivation,
  kAdd,
  kScale,
  kSum,
  kSquaredNorm,
  kReshape,
  kUpsample,     // nearest neighbour on [H, W, C]
};

enum class Activation { kIdentity, kRelu, kSigmoid, kTanh };
enum class Padding { kSame, kValid };

const char* op_name(Op op);
const char* activation_name(Activation a);
Activation parse_activation(const std::string& name);

struct Node {
  Op op = Op::kInput;
  std::vector<NodeId> parents;
  std::string name;
  Shape shape;  // declared shape for parameters and reshape targets
  Activation activation = Activation::kIdentity;
  Padding padding = Padding::kSame;
  std::size_t stride = 1;
  std::size_t factor = 1;
  double scale = 1.0;
};

/// Recorded computation graph.
///
/// Nodes are appended in topological order, so the node list is itself a
/// valid evaluation schedule. Input leaves carry no fixed shape; parameter
/// leaves do. Every other node's shape is determined at evaluation time from
/// its parents, and mismatches are reported with the node index.
class Tape {
 public:
  NodeId input(std::string name);
  NodeId param(std::string name, Shape shape);

  NodeId linear(NodeId x, NodeId weight, NodeId bias = kNoNode);
  NodeId conv2d(NodeId x, NodeId kernels, NodeId bias, std::size_t stride, Padding padding);
  NodeId activate(NodeId x, Activation a);
  NodeId add(NodeId a, NodeId b);
  // Skip connection h + branch(h); recorded as an ordinary add.
  NodeId residual(NodeId skip, NodeId branch) { return add(skip, branch); }
  NodeId scale(NodeId x, double c);
  NodeId sum(NodeId x);
  NodeId squared_norm(NodeId x);
  NodeId reshape(NodeId x, Shape shape);
  NodeId upsample(NodeId x, std::size_t factor);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<NodeId>& inputs() const { return inputs_; }
  const std::vector<NodeId>& params() const { return params_; }
  bool is_leaf(NodeId id) const;
  NodeId find(const std::string& name) const;

 private:
  NodeId push(Node n);
  void check_parent(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> inputs_;
  std::vector<NodeId> params_;
};

/// Leaf assignments for one evaluation. Holds references: bound tensors must
/// outlive every Values object produced from these bindings.
class Bindings {
 public:
  Bindings& bind(NodeId leaf, const Tensor& value);
  const Tensor* lookup(NodeId leaf) const;

 private:
  std::vector<std::pair<NodeId, const Tensor*>> entries_;
};

/// Forward values of every node.
class Values {
 public:
  Values() = default;
  Values(const Values&) = delete;
  Values& operator=(const Values&) = delete;
  Values(Values&&) = default;
  Values& operator=(Values&&) = default;

  const Tensor& operator[](NodeId id) const { return *view_.at(id); }
  std::size_t size() const { return view_.size(); }

 private:
  friend Values eval_forward(const Tape&, const Bindings&);
  std::vector<Tensor> owned_;
  std::vector<const Tensor*> view_;
};

/// Gradients of a seed with respect to every leaf; unreached leaves hold zeros.
class Gradients {
 public:
  const Tensor& operator[](NodeId id) const;
  Tensor take(NodeId id) { return std::move(grads_.at(id)); }

 private:
  friend Gradients eval_vjp(const Tape&, const Values&, std::span<const std::pair<NodeId, Tensor>>);
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

Values eval_forward(const Tape& tape, const Bindings& leaves);

// Gradient of a one-element node.
Gradients eval_backward(const Tape& tape, const Values& values, NodeId seed);

// Vector-Jacobian product: sum over seeds of (seed gradient) . d(node)/d(leaf).
Gradients eval_vjp(const Tape& tape, const Values& values,
                   std::span<const std::pair<NodeId, Tensor>> seeds);

}  // namespace modelzoo
