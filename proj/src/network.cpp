#include "modelzoo/network.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "modelzoo/error.hpp"
#include "modelzoo/kernels.hpp"

namespace modelzoo {

Network::Network(Tape tape, NodeId input, NodeId output, std::vector<Tensor> params)
    : tape_(std::move(tape)), input_(input), output_(output), params_(std::move(params)) {
  if (params_.size() != tape_.params().size())
    throw ShapeError("network", "parameter count does not match tape");
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].shape() != tape_.node(tape_.params()[i]).shape)
      throw ShapeError("network", "parameter '" + tape_.node(tape_.params()[i]).name +
                                      "' has wrong shape");
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

Bindings Network::bind(const Tensor& x) const {
  Bindings b;
  b.bind(input_, x);
  for (std::size_t i = 0; i < params_.size(); ++i) b.bind(tape_.params()[i], params_[i]);
  return b;
}

Tensor Network::forward(const Tensor& x) const {
  auto b = bind(x);
  Values v = eval_forward(tape_, b);
  return v[output_];
}

Network::Backward Network::finish(const Values& v, const Tensor& seed) const {
  std::pair<NodeId, Tensor> s{output_, seed};
  Gradients g = eval_vjp(tape_, v, std::span<const std::pair<NodeId, Tensor>>(&s, 1));
  Backward r;
  r.output = v[output_];
  r.grad_input = g.take(input_);
  r.grad_params.reserve(params_.size());
  for (auto id : tape_.params()) r.grad_params.push_back(g.take(id));
  return r;
}

Network::Backward Network::backward(const Tensor& x, const Tensor& seed) const {
  auto b = bind(x);
  Values v = eval_forward(tape_, b);
  return finish(v, seed);
}

Tensor Network::flat_params() const {
  std::vector<double> flat;
  flat.reserve(param_count());
  for (const auto& p : params_) flat.insert(flat.end(), p.storage().begin(), p.storage().end());
  return Tensor::vector(std::move(flat));
}

void Network::set_flat_params(const Tensor& flat) {
  if (flat.size() != param_count()) throw ShapeError("network", "flat parameter size mismatch");
  std::size_t k = 0;
  for (auto& p : params_)
    for (auto& v : p.values()) v = flat[k++];
}

std::vector<Tensor> Network::zero_like_params() const {
  std::vector<Tensor> z;
  z.reserve(params_.size());
  for (const auto& p : params_) z.emplace_back(p.shape());
  return z;
}

void Network::save(std::ostream& out) const {
  for (const auto& p : params_) write_tensor(out, p);
}

void Network::load(std::istream& in) {
  for (auto& p : params_) {
    Tensor t = read_tensor(in);
    if (t.shape() != p.shape()) throw ShapeError("network", "checkpoint parameter shape mismatch");
    p = std::move(t);
  }
}

Network make_mlp(const MlpSpec& spec, Rng& rng, double gain) {
  Tape tape;
  std::vector<Tensor> params;
  NodeId x = tape.input("x");
  NodeId h = x;
  std::size_t width = spec.in;
  std::vector<std::size_t> sizes = spec.hidden;
  sizes.push_back(spec.out);
  for (std::size_t l = 0; l < sizes.size(); ++l) {
    const std::size_t next = sizes[l];
    const bool last = l + 1 == sizes.size();
    NodeId w = tape.param("w" + std::to_string(l), {next, width});
    NodeId b = tape.param("b" + std::to_string(l), {next});
    params.push_back(rng.normal_tensor({next, width}, gain / std::sqrt(static_cast<double>(width))));
    params.emplace_back(Shape{next});
    NodeId a = tape.activate(tape.linear(h, w, b), last ? spec.output_activation : spec.hidden_activation);
    if (spec.residual && !last && l > 0 && next == width) a = tape.residual(h, a);
    h = a;
    width = next;
  }
  return Network(std::move(tape), x, h, std::move(params));
}

Network make_conv_scorer(std::size_t size, std::size_t channels,
                         const std::vector<ConvLayerSpec>& layers, Activation activation,
                         Rng& rng, double gain) {
  Tape tape;
  std::vector<Tensor> params;
  NodeId x = tape.input("x");
  NodeId h = x;
  std::size_t side = size, depth = channels;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    NodeId k = tape.param("k" + std::to_string(l), {L.kernel, L.kernel, depth, L.channels});
    NodeId b = tape.param("c" + std::to_string(l), {L.channels});
    const double fan_in = static_cast<double>(L.kernel * L.kernel * depth);
    params.push_back(rng.normal_tensor({L.kernel, L.kernel, depth, L.channels}, gain / std::sqrt(fan_in)));
    params.emplace_back(Shape{L.channels});
    h = tape.activate(tape.conv2d(h, k, b, L.stride, Padding::kSame), activation);
    side = conv_axis(side, L.kernel, L.stride, Padding::kSame).out;
    depth = L.channels;
  }
  const std::size_t flat = side * side * depth;
  h = tape.reshape(h, {flat});
  NodeId w = tape.param("w_out", {1, flat});
  NodeId b = tape.param("b_out", {1});
  params.push_back(rng.normal_tensor({1, flat}, gain / std::sqrt(static_cast<double>(flat))));
  params.emplace_back(Shape{1});
  h = tape.reshape(tape.linear(h, w, b), {});
  return Network(std::move(tape), x, h, std::move(params));
}

Network make_conv_generator(const ConvGeneratorSpec& spec, Rng& rng, double gain) {
  Tape tape;
  std::vector<Tensor> params;
  NodeId x = tape.input("h");
  NodeId h = tape.reshape(x, {spec.latent_side, spec.latent_side, 1});
  std::size_t depth = 1;
  std::size_t channels = spec.first_channels;
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const bool last = l + 1 == spec.layers;
    const std::size_t out = last ? spec.out_channels : std::max<std::size_t>(channels, 1);
    if (spec.upsample > 1) h = tape.upsample(h, spec.upsample);
    NodeId k = tape.param("k" + std::to_string(l), {spec.kernel, spec.kernel, depth, out});
    NodeId b = tape.param("c" + std::to_string(l), {out});
    const double fan_in = static_cast<double>(spec.kernel * spec.kernel * depth);
    params.push_back(rng.normal_tensor({spec.kernel, spec.kernel, depth, out}, gain / std::sqrt(fan_in)));
    params.emplace_back(Shape{out});
    h = tape.activate(tape.conv2d(h, k, b, 1, Padding::kSame),
                      last ? spec.output_activation : spec.activation);
    depth = out;
    channels = std::max<std::size_t>(channels / 2, 1);
  }
  return Network(std::move(tape), x, h, std::move(params));
}

}  // namespace modelzoo
