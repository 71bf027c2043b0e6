#pragma once

#include <cstddef>

#include "modelzoo/tape.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

// Output size and leading zero-padding along one spatial axis.
struct ConvAxis {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

ConvAxis conv_axis(std::size_t in, std::size_t k, std::size_t stride, Padding padding);

// Convolution of an [H, W, C] image with a [k, k, C, M] filter bank, zero
// padding outside the image. `bias` may be null. The OpenMP kernel splits work
// over output rows; the reference is the direct loop nest and is what the
// parallel kernel is tested against.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, Padding padding);
Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor* bias,
                      std::size_t stride, Padding padding);
Tensor conv2d_forward_reference(const Tensor& input, const Tensor& kernels, const Tensor* bias,
                                std::size_t stride, Padding padding);

struct ConvGrads {
  Tensor input;
  Tensor kernels;
  Tensor bias;
};

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_out,
                          std::size_t stride, Padding padding, bool want_input);

// y = W x + b for x of shape [in] or [n, in].
Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor* bias);
void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                     Tensor* grad_x, Tensor* grad_w, Tensor* grad_b);

double activate(Activation a, double v);
// Derivative expressed through the input `v` and the output `y`.
double activate_derivative(Activation a, double v, double y);

Tensor upsample_nearest(const Tensor& x, std::size_t factor);
Tensor upsample_nearest_backward(const Tensor& grad_out, std::size_t factor);

}  // namespace modelzoo
