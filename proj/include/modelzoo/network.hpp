#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "modelzoo/rng.hpp"
#include "modelzoo/tape.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

/// A tape with one input leaf, one output node and owned parameter values.
///
/// This is the carrier for every learned function in the library: score
/// networks f_theta, decoders g_alpha, encoders and classifier heads.
/// Evaluation is const and may run concurrently; parameter updates go through
/// `params()` and are the caller's single-writer step.
class Network {
 public:
  Network() = default;
  Network(Tape tape, NodeId input, NodeId output, std::vector<Tensor> params);

  const Tape& tape() const { return tape_; }
  NodeId input_node() const { return input_; }
  NodeId output_node() const { return output_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::size_t param_count() const;

  Tensor forward(const Tensor& x) const;

  struct Backward {
    Tensor output;
    Tensor grad_input;
    std::vector<Tensor> grad_params;
  };
  // Forward pass plus the vector-Jacobian product of `seed` (shaped like the
  // output) with respect to the input and every parameter.
  Backward backward(const Tensor& x, const Tensor& seed) const;
  // Same, with the seed computed from the output by `seed_of`.
  template <typename SeedFn>
  Backward backward_with(const Tensor& x, SeedFn&& seed_of) const;

  Tensor flat_params() const;
  void set_flat_params(const Tensor& flat);
  std::vector<Tensor> zero_like_params() const;

  void save(std::ostream& out) const;
  // Loads parameter values into an already-built network of identical layout.
  void load(std::istream& in);

 private:
  Bindings bind(const Tensor& x) const;
  Backward finish(const Values& values, const Tensor& seed) const;

  Tape tape_;
  NodeId input_ = kNoNode;
  NodeId output_ = kNoNode;
  std::vector<Tensor> params_;
};

template <typename SeedFn>
Network::Backward Network::backward_with(const Tensor& x, SeedFn&& seed_of) const {
  auto b = bind(x);
  Values v = eval_forward(tape_, b);
  Tensor seed = seed_of(v[output_]);
  return finish(v, seed);
}

struct MlpSpec {
  std::size_t in = 1;
  std::vector<std::size_t> hidden;
  std::size_t out = 1;
  Activation hidden_activation = Activation::kTanh;
  Activation output_activation = Activation::kIdentity;
  // Residual skips around equal-width hidden layers; off by default.
  bool residual = false;
};

// Weights drawn N(0, gain^2 / fan_in), biases zero. Accepts [in] or [n, in].
Network make_mlp(const MlpSpec& spec, Rng& rng, double gain = 1.0);

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t channels = 8;
  std::size_t stride = 1;
};

// Bottom-up conv net on [H, W, C] images ending in a fully connected scalar.
Network make_conv_scorer(std::size_t size, std::size_t channels,
                         const std::vector<ConvLayerSpec>& layers, Activation activation,
                         Rng& rng, double gain = 1.0);

struct ConvGeneratorSpec {
  std::size_t latent_side = 7;        // latent is a side x side x 1 image
  std::size_t layers = 5;
  std::size_t kernel = 5;
  std::size_t first_channels = 16;    // halved at each layer
  std::size_t upsample = 2;
  std::size_t out_channels = 1;
  Activation activation = Activation::kRelu;
  Activation output_activation = Activation::kTanh;
};

// Top-down generator: repeated (nearest upsample, same conv, activation).
Network make_conv_generator(const ConvGeneratorSpec& spec, Rng& rng, double gain = 1.0);

}  // namespace modelzoo
