#include "modelzoo/kernels.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "modelzoo/error.hpp"

namespace modelzoo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

struct ConvGeometry {
  std::size_t h, w, c, k, m, stride;
  ConvAxis ay, ax;
};

ConvGeometry geometry(const Tensor& input, const Tensor& kernels, std::size_t stride,
                      Padding padding) {
  if (input.rank() != 3) throw ShapeError("conv2d", "input must be [H, W, C], got " + shape_string(input.shape()));
  if (kernels.rank() != 4) throw ShapeError("conv2d", "kernels must be [k, k, C, M], got " + shape_string(kernels.shape()));
  if (stride == 0) throw ShapeError("conv2d", "stride must be positive");
  ConvGeometry g{input.extent(0), input.extent(1), input.extent(2), kernels.extent(0),
                 kernels.extent(3), stride, {}, {}};
  if (kernels.extent(1) != g.k) throw ShapeError("conv2d", "kernels must be square");
  if (kernels.extent(2) != g.c)
    throw ShapeError("conv2d", "kernel depth " + std::to_string(kernels.extent(2)) +
                                   " != input channels " + std::to_string(g.c));
  g.ay = conv_axis(g.h, g.k, stride, padding);
  g.ax = conv_axis(g.w, g.k, stride, padding);
  return g;
}

}  // namespace

ConvAxis conv_axis(std::size_t in, std::size_t k, std::size_t stride, Padding padding) {
  if (stride == 0) throw ShapeError("conv2d", "stride must be positive");
  if (padding == Padding::kValid) {
    if (k > in)
      throw ShapeError("conv2d", "kernel " + std::to_string(k) + " larger than input " + std::to_string(in));
    return {(in - k) / stride + 1, 0};
  }
  std::size_t out = (in + stride - 1) / stride;
  std::size_t needed = (out - 1) * stride + k;
  std::size_t total = needed > in ? needed - in : 0;
  if (k > in + total) throw ShapeError("conv2d", "kernel larger than padded input");
  return {out, total / 2};
}

Tensor conv2d_forward_reference(const Tensor& input, const Tensor& kernels, const Tensor* bias,
                                std::size_t stride, Padding padding) {
  auto g = geometry(input, kernels, stride, padding);
  Tensor out({g.ay.out, g.ax.out, g.m});
  for (std::size_t oy = 0; oy < g.ay.out; ++oy)
    for (std::size_t ox = 0; ox < g.ax.out; ++ox)
      for (std::size_t m = 0; m < g.m; ++m) {
        double s = bias ? (*bias)[m] : 0.0;
        for (std::size_t ky = 0; ky < g.k; ++ky)
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.ay.pad_before);
            auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.ax.pad_before);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w))
              continue;
            for (std::size_t c = 0; c < g.c; ++c)
              s += input.at({static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), c}) *
                   kernels.at({ky, kx, c, m});
          }
        out.at({oy, ox, m}) = s;
      }
  return out;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor* bias,
                      std::size_t stride, Padding padding) {
  auto g = geometry(input, kernels, stride, padding);
  Tensor out({g.ay.out, g.ax.out, g.m});
  const double* x = input.data();
  const double* kw = kernels.data();
  double* y = out.data();
  const auto rows = static_cast<std::ptrdiff_t>(g.ay.out);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t oy = 0; oy < rows; ++oy) {
    for (std::size_t ox = 0; ox < g.ax.out; ++ox) {
      double* dst = y + (static_cast<std::size_t>(oy) * g.ax.out + ox) * g.m;
      for (std::size_t m = 0; m < g.m; ++m) dst[m] = bias ? (*bias)[m] : 0.0;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        auto iy = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(oy) * g.stride + ky) -
                  static_cast<std::ptrdiff_t>(g.ay.pad_before);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                    static_cast<std::ptrdiff_t>(g.ax.pad_before);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          const double* src = x + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
          const double* kk = kw + (ky * g.k + kx) * g.c * g.m;
          for (std::size_t c = 0; c < g.c; ++c) {
            const double v = src[c];
            const double* krow = kk + c * g.m;
            for (std::size_t m = 0; m < g.m; ++m) dst[m] += v * krow[m];
          }
        }
      }
    }
  }
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, Padding padding) {
  return conv2d_forward(input, kernels, nullptr, stride, padding);
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernels, const Tensor& grad_out,
                          std::size_t stride, Padding padding, bool want_input) {
  auto g = geometry(input, kernels, stride, padding);
  if (grad_out.shape() != Shape{g.ay.out, g.ax.out, g.m})
    throw ShapeError("conv2d", "gradient shape mismatch");
  ConvGrads r{want_input ? Tensor(input.shape()) : Tensor(), Tensor(kernels.shape()), Tensor({g.m})};
  const double* x = input.data();
  const double* kw = kernels.data();
  const double* gy = grad_out.data();
  double* gx = want_input ? r.input.data() : nullptr;
  double* gk = r.kernels.data();
  double* gb = r.bias.data();
  for (std::size_t oy = 0; oy < g.ay.out; ++oy)
    for (std::size_t ox = 0; ox < g.ax.out; ++ox) {
      const double* go = gy + (oy * g.ax.out + ox) * g.m;
      for (std::size_t m = 0; m < g.m; ++m) gb[m] += go[m];
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.ay.pad_before);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.ax.pad_before);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          std::size_t base = (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
          const double* kk = kw + (ky * g.k + kx) * g.c * g.m;
          double* gkk = gk + (ky * g.k + kx) * g.c * g.m;
          for (std::size_t c = 0; c < g.c; ++c) {
            const double v = x[base + c];
            double acc = 0.0;
            for (std::size_t m = 0; m < g.m; ++m) {
              gkk[c * g.m + m] += v * go[m];
              acc += kk[c * g.m + m] * go[m];
            }
            if (gx) gx[base + c] += acc;
          }
        }
      }
    }
  return r;
}

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  if (weight.rank() != 2) throw ShapeError("linear", "weight must be [out, in], got " + shape_string(weight.shape()));
  const std::size_t out = weight.extent(0), in = weight.extent(1);
  std::size_t n;
  Shape shape;
  if (x.rank() == 1) {
    n = 1;
    shape = {out};
  } else if (x.rank() == 2) {
    n = x.extent(0);
    shape = {n, out};
  } else {
    throw ShapeError("linear", "input must be [in] or [n, in], got " + shape_string(x.shape()));
  }
  if (x.size() != n * in)
    throw ShapeError("linear", "input " + shape_string(x.shape()) + " does not match weight " +
                                   shape_string(weight.shape()));
  if (bias && bias->size() != out) throw ShapeError("linear", "bias size mismatch");
  Tensor y(shape);
  MapC xm(x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in));
  MapC wm(weight.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  Map ym(y.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out));
  ym.noalias() = xm * wm.transpose();
  if (bias) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias->data(), static_cast<Eigen::Index>(out));
    ym.rowwise() += bv;
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                     Tensor* grad_x, Tensor* grad_w, Tensor* grad_b) {
  const std::size_t out = weight.extent(0), in = weight.extent(1);
  const std::size_t n = x.size() / in;
  MapC xm(x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in));
  MapC wm(weight.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  MapC gm(grad_out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out));
  if (grad_x) {
    Map gx(grad_x->data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in));
    gx.noalias() += gm * wm;
  }
  if (grad_w) {
    Map gw(grad_w->data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    gw.noalias() += gm.transpose() * xm;
  }
  if (grad_b) {
    Eigen::Map<Eigen::RowVectorXd> gb(grad_b->data(), static_cast<Eigen::Index>(out));
    gb += gm.colwise().sum();
  }
}

double activate(Activation a, double v) {
  switch (a) {
    case Activation::kIdentity: return v;
    case Activation::kRelu: return v > 0.0 ? v : 0.0;
    case Activation::kSigmoid:
      if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
      else {
        double e = std::exp(v);
        return e / (1.0 + e);
      }
    case Activation::kTanh: return std::tanh(v);
  }
  return v;
}

double activate_derivative(Activation a, double v, double y) {
  switch (a) {
    case Activation::kIdentity: return 1.0;
    case Activation::kRelu: return v > 0.0 ? 1.0 : 0.0;  // subgradient 0 at the kink
    case Activation::kSigmoid: return y * (1.0 - y);
    case Activation::kTanh: return 1.0 - y * y;
  }
  return 1.0;
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() != 3) throw ShapeError("upsample", "input must be [H, W, C], got " + shape_string(x.shape()));
  if (factor == 0) throw ShapeError("upsample", "factor must be positive");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  Tensor y({h * factor, w * factor, c});
  for (std::size_t i = 0; i < h * factor; ++i)
    for (std::size_t j = 0; j < w * factor; ++j) {
      const double* src = x.data() + ((i / factor) * w + j / factor) * c;
      std::copy(src, src + c, y.data() + (i * w * factor + j) * c);
    }
  return y;
}

Tensor upsample_nearest_backward(const Tensor& grad_out, std::size_t factor) {
  const std::size_t h = grad_out.extent(0) / factor, w = grad_out.extent(1) / factor,
                    c = grad_out.extent(2);
  Tensor g({h, w, c});
  for (std::size_t i = 0; i < h * factor; ++i)
    for (std::size_t j = 0; j < w * factor; ++j)
      for (std::size_t k = 0; k < c; ++k)
        g.data()[((i / factor) * w + j / factor) * c + k] +=
            grad_out.data()[(i * w * factor + j) * c + k];
  return g;
}

}  // namespace modelzoo
