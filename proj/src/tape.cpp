#include "modelzoo/tape.hpp"

#include <cmath>

#include "modelzoo/error.hpp"
#include "modelzoo/kernels.hpp"

namespace modelzoo {

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kLinear: return "linear";
    case Op::kConv2d: return "conv2d";
    case Op::kActivation: return "activation";
    case Op::kAdd: return "add";
    case Op::kScale: return "scale";
    case Op::kSum: return "sum";
    case Op::kSquaredNorm: return "squared_norm";
    case Op::kReshape: return "reshape";
    case Op::kUpsample: return "upsample";
  }
  return "?";
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity" || name == "linear") return Activation::kIdentity;
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "tanh") return Activation::kTanh;
  throw ConfigError("tape", "unknown activation '" + name + "' (identity, relu, sigmoid, tanh)");
}

NodeId Tape::push(Node n) {
  for (auto p : n.parents) check_parent(p);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

void Tape::check_parent(NodeId id) const {
  if (id >= nodes_.size()) throw ShapeError("tape", "reference to unknown node " + std::to_string(id));
}

NodeId Tape::input(std::string name) {
  Node n;
  n.op = Op::kInput;
  n.name = std::move(name);
  auto id = push(std::move(n));
  inputs_.push_back(id);
  return id;
}

NodeId Tape::param(std::string name, Shape shape) {
  Node n;
  n.op = Op::kParam;
  n.name = std::move(name);
  n.shape = std::move(shape);
  auto id = push(std::move(n));
  params_.push_back(id);
  return id;
}

NodeId Tape::linear(NodeId x, NodeId weight, NodeId bias) {
  Node n;
  n.op = Op::kLinear;
  n.parents = {x, weight};
  if (bias != kNoNode) n.parents.push_back(bias);
  return push(std::move(n));
}

NodeId Tape::conv2d(NodeId x, NodeId kernels, NodeId bias, std::size_t stride, Padding padding) {
  if (stride == 0) throw ShapeError("tape", "conv2d stride must be positive");
  Node n;
  n.op = Op::kConv2d;
  n.parents = {x, kernels};
  if (bias != kNoNode) n.parents.push_back(bias);
  n.stride = stride;
  n.padding = padding;
  return push(std::move(n));
}

NodeId Tape::activate(NodeId x, Activation a) {
  Node n;
  n.op = Op::kActivation;
  n.parents = {x};
  n.activation = a;
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kAdd;
  n.parents = {a, b};
  return push(std::move(n));
}

NodeId Tape::scale(NodeId x, double c) {
  Node n;
  n.op = Op::kScale;
  n.parents = {x};
  n.scale = c;
  return push(std::move(n));
}

NodeId Tape::sum(NodeId x) {
  Node n;
  n.op = Op::kSum;
  n.parents = {x};
  return push(std::move(n));
}

NodeId Tape::squared_norm(NodeId x) {
  Node n;
  n.op = Op::kSquaredNorm;
  n.parents = {x};
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId x, Shape shape) {
  Node n;
  n.op = Op::kReshape;
  n.parents = {x};
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Tape::upsample(NodeId x, std::size_t factor) {
  if (factor == 0) throw ShapeError("tape", "upsample factor must be positive");
  Node n;
  n.op = Op::kUpsample;
  n.parents = {x};
  n.factor = factor;
  return push(std::move(n));
}

bool Tape::is_leaf(NodeId id) const {
  auto op = nodes_.at(id).op;
  return op == Op::kInput || op == Op::kParam;
}

NodeId Tape::find(const std::string& name) const {
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].name == name) return i;
  return kNoNode;
}

Bindings& Bindings::bind(NodeId leaf, const Tensor& value) {
  for (auto& e : entries_)
    if (e.first == leaf) {
      e.second = &value;
      return *this;
    }
  entries_.emplace_back(leaf, &value);
  return *this;
}

const Tensor* Bindings::lookup(NodeId leaf) const {
  for (const auto& e : entries_)
    if (e.first == leaf) return e.second;
  return nullptr;
}

const Tensor& Gradients::operator[](NodeId id) const {
  if (id >= grads_.size() || !present_[id])
    throw Error("eval_backward", "no gradient recorded for node " + std::to_string(id));
  return grads_[id];
}

namespace {

std::string where(const Tape& tape, NodeId id) {
  const auto& n = tape.node(id);
  std::string s = "node " + std::to_string(id) + " (" + op_name(n.op);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

Tensor forward_node(const Tape& tape, NodeId id, const std::vector<const Tensor*>& v) {
  const Node& n = tape.node(id);
  auto in = [&](std::size_t k) -> const Tensor& { return *v[n.parents[k]]; };
  try {
    switch (n.op) {
      case Op::kLinear:
        return linear_forward(in(0), in(1), n.parents.size() > 2 ? &in(2) : nullptr);
      case Op::kConv2d:
        return conv2d_forward(in(0), in(1), n.parents.size() > 2 ? &in(2) : nullptr, n.stride,
                              n.padding);
      case Op::kActivation: {
        Tensor y = in(0);
        for (auto& x : y.values()) x = activate(n.activation, x);
        return y;
      }
      case Op::kAdd: {
        if (in(0).shape() != in(1).shape())
          throw ShapeError("tape", "add of " + shape_string(in(0).shape()) + " and " +
                                       shape_string(in(1).shape()));
        return in(0) + in(1);
      }
      case Op::kScale: return n.scale * in(0);
      case Op::kSum: return Tensor::scalar(in(0).sum());
      case Op::kSquaredNorm: return Tensor::scalar(in(0).squared_norm());
      case Op::kReshape: return in(0).reshaped(n.shape);
      case Op::kUpsample: return upsample_nearest(in(0), n.factor);
      case Op::kInput:
      case Op::kParam: break;
    }
  } catch (const ShapeError& e) {
    throw ShapeError("eval_forward", where(tape, id) + ": " + e.what());
  }
  return {};
}

}  // namespace

Values eval_forward(const Tape& tape, const Bindings& leaves) {
  Values out;
  out.owned_.resize(tape.size());
  out.view_.assign(tape.size(), nullptr);
  for (NodeId id = 0; id < tape.size(); ++id) {
    const Node& n = tape.node(id);
    if (n.op == Op::kInput || n.op == Op::kParam) {
      const Tensor* t = leaves.lookup(id);
      if (!t) throw ShapeError("eval_forward", where(tape, id) + " is not bound");
      if (n.op == Op::kParam && t->shape() != n.shape)
        throw ShapeError("eval_forward", where(tape, id) + " expects " + shape_string(n.shape) +
                                             ", bound " + shape_string(t->shape()));
      out.view_[id] = t;
      continue;
    }
    out.owned_[id] = forward_node(tape, id, out.view_);
    if (!out.owned_[id].all_finite())
      throw NumericError("eval_forward", "non-finite value at " + where(tape, id));
    out.view_[id] = &out.owned_[id];
  }
  return out;
}

Gradients eval_backward(const Tape& tape, const Values& values, NodeId seed) {
  if (seed >= tape.size()) throw ShapeError("eval_backward", "unknown seed node");
  if (values[seed].size() != 1)
    throw ShapeError("eval_backward", "seed " + where(tape, seed) + " is not scalar: " +
                                          shape_string(values[seed].shape()));
  std::pair<NodeId, Tensor> s{seed, Tensor(values[seed].shape(), {1.0})};
  return eval_vjp(tape, values, std::span<const std::pair<NodeId, Tensor>>(&s, 1));
}

Gradients eval_vjp(const Tape& tape, const Values& values,
                   std::span<const std::pair<NodeId, Tensor>> seeds) {
  const std::size_t count = tape.size();
  Gradients g;
  g.grads_.resize(count);
  g.present_.assign(count, false);
  auto accumulate = [&](NodeId id, const Tensor& delta) {
    if (!g.present_[id]) {
      g.grads_[id] = delta.reshaped(values[id].shape());
      g.present_[id] = true;
    } else {
      g.grads_[id] += delta;
    }
  };
  auto slot = [&](NodeId id) -> Tensor& {
    if (!g.present_[id]) {
      g.grads_[id] = Tensor(values[id].shape());
      g.present_[id] = true;
    }
    return g.grads_[id];
  };

  NodeId highest = 0;
  for (const auto& [id, t] : seeds) {
    if (id >= count) throw ShapeError("eval_vjp", "unknown seed node");
    if (t.size() != values[id].size())
      throw ShapeError("eval_vjp", "seed gradient for " + where(tape, id) + " has shape " +
                                       shape_string(t.shape()) + ", node has " +
                                       shape_string(values[id].shape()));
    accumulate(id, t);
    highest = std::max(highest, id);
  }

  for (NodeId step = highest + 1; step-- > 0;) {
    const NodeId id = step;
    if (!g.present_[id] || tape.is_leaf(id)) continue;
    const Node& n = tape.node(id);
    const Tensor& gy = g.grads_[id];
    auto in = [&](std::size_t k) -> const Tensor& { return values[n.parents[k]]; };
    switch (n.op) {
      case Op::kLinear: {
        const bool has_bias = n.parents.size() > 2;
        Tensor* gx = &slot(n.parents[0]);
        Tensor* gw = &slot(n.parents[1]);
        Tensor* gb = has_bias ? &slot(n.parents[2]) : nullptr;
        linear_backward(in(0), in(1), gy, gx, gw, gb);
        break;
      }
      case Op::kConv2d: {
        auto cg = conv2d_backward(in(0), in(1), gy, n.stride, n.padding, true);
        accumulate(n.parents[0], cg.input);
        accumulate(n.parents[1], cg.kernels);
        if (n.parents.size() > 2) accumulate(n.parents[2], cg.bias);
        break;
      }
      case Op::kActivation: {
        const Tensor& x = in(0);
        const Tensor& y = values[id];
        Tensor& gx = slot(n.parents[0]);
        for (std::size_t i = 0; i < x.size(); ++i)
          gx[i] += gy[i] * activate_derivative(n.activation, x[i], y[i]);
        break;
      }
      case Op::kAdd:
        accumulate(n.parents[0], gy);
        accumulate(n.parents[1], gy);
        break;
      case Op::kScale: accumulate(n.parents[0], n.scale * gy); break;
      case Op::kSum: {
        Tensor& gx = slot(n.parents[0]);
        const double s = gy[0];
        for (auto& v : gx.values()) v += s;
        break;
      }
      case Op::kSquaredNorm: {
        Tensor& gx = slot(n.parents[0]);
        const Tensor& x = in(0);
        const double s = 2.0 * gy[0];
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += s * x[i];
        break;
      }
      case Op::kReshape: accumulate(n.parents[0], gy); break;
      case Op::kUpsample: accumulate(n.parents[0], upsample_nearest_backward(gy, n.factor)); break;
      case Op::kInput:
      case Op::kParam: break;
    }
  }
  for (NodeId id = 0; id < count; ++id)
    if (tape.is_leaf(id)) slot(id);
  return g;
}

}  // namespace modelzoo
