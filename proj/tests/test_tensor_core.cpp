#include <cmath>
#include <sstream>

#include "doctest.h"
#include "modelzoo/error.hpp"
#include "modelzoo/kernels.hpp"
#include "modelzoo/network.hpp"
#include "modelzoo/oracle.hpp"
#include "modelzoo/rng.hpp"
#include "modelzoo/tape.hpp"

using namespace modelzoo;

namespace {

// Scalar probe r . out(x) of a one-input tape, and its gradient by backward.
struct Probe {
  const Tape& tape;
  NodeId in, out;
  const std::vector<std::pair<NodeId, Tensor>>& params;
  Tensor r;

  Bindings bind(const Tensor& x) const {
    Bindings b;
    b.bind(in, x);
    for (const auto& [id, t] : params) b.bind(id, t);
    return b;
  }
  double value(const Tensor& x) const {
    auto b = bind(x);
    auto v = eval_forward(tape, b);
    return v[out].dot(r);
  }
  Gradients grads(const Tensor& x) const {
    auto b = bind(x);
    auto v = eval_forward(tape, b);
    std::pair<NodeId, Tensor> seed{out, r};
    return eval_vjp(tape, v, std::span<const std::pair<NodeId, Tensor>>(&seed, 1));
  }
};

// Straight-line conv with zero padding, written independently of the kernels.
Tensor naive_conv(const Tensor& x, const Tensor& k, std::size_t stride, bool same) {
  const long H = static_cast<long>(x.extent(0)), W = static_cast<long>(x.extent(1));
  const long C = static_cast<long>(x.extent(2)), K = static_cast<long>(k.extent(0));
  const long M = static_cast<long>(k.extent(3)), s = static_cast<long>(stride);
  long oh, ow, ph = 0, pw = 0;
  if (same) {
    oh = (H + s - 1) / s;
    ow = (W + s - 1) / s;
    ph = std::max((oh - 1) * s + K - H, 0L) / 2;
    pw = std::max((ow - 1) * s + K - W, 0L) / 2;
  } else {
    oh = (H - K) / s + 1;
    ow = (W - K) / s + 1;
  }
  Tensor y({static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), static_cast<std::size_t>(M)});
  for (long i = 0; i < oh; ++i)
    for (long j = 0; j < ow; ++j)
      for (long m = 0; m < M; ++m) {
        double acc = 0.0;
        for (long a = 0; a < K; ++a)
          for (long b = 0; b < K; ++b)
            for (long c = 0; c < C; ++c) {
              const long yi = i * s + a - ph, xj = j * s + b - pw;
              if (yi < 0 || yi >= H || xj < 0 || xj >= W) continue;
              acc += x.at({static_cast<std::size_t>(yi), static_cast<std::size_t>(xj), static_cast<std::size_t>(c)}) *
                     k.at({static_cast<std::size_t>(a), static_cast<std::size_t>(b), static_cast<std::size_t>(c),
                           static_cast<std::size_t>(m)});
            }
        y.at({static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(m)}) = acc;
      }
  return y;
}

bool near_kink(const Tape& tape, const Values& v, double margin) {
  for (NodeId i = 0; i < tape.size(); ++i) {
    const auto& n = tape.node(i);
    if (n.op == Op::kActivation && n.activation == Activation::kRelu)
      for (double a : v[n.parents[0]].values())
        if (std::abs(a) < margin) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("tensor rejects zero extents and keeps size equal to product of extents") {
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(Tensor().size() == 1);
  CHECK(Tensor::scalar(2.5).item() == 2.5);
}

TEST_CASE("tensor row-major indexing") {
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(t.at({1, 2}) == 5.0);
  CHECK(t.row(1) == Tensor::vector({3, 4, 5}));
  CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
}

TEST_CASE("tensor serialization round trip is bit exact") {
  Rng rng(7);
  Tensor t = rng.normal_tensor({3, 4, 2});
  std::stringstream ss;
  write_tensor(ss, t);
  CHECK(ss.str().size() == 8 + 3 * 8 + 24 * 8);
  Tensor back = read_tensor(ss);
  CHECK(back == t);
  // little-endian rank prefix
  CHECK(static_cast<unsigned char>(ss.str()[0]) == 3);
}

TEST_CASE("stack and unstack are inverse") {
  Rng rng(1);
  std::vector<Tensor> items{rng.normal_tensor({2, 2}), rng.normal_tensor({2, 2}), rng.normal_tensor({2, 2})};
  Tensor s = stack(items);
  CHECK(s.shape() == Shape{3, 2, 2});
  CHECK(unstack(s) == items);
}

TEST_CASE("single linear node with identity weight returns its input") {
  Tape tape;
  NodeId x = tape.input("x");
  NodeId w = tape.param("w", {2, 2});
  NodeId b = tape.param("b", {2});
  NodeId y = tape.linear(x, w, b);
  Tensor W({2, 2}, {1, 0, 0, 1}), B({2}), X = Tensor::vector({1, 2});
  Bindings bind;
  bind.bind(x, X).bind(w, W).bind(b, B);
  auto v = eval_forward(tape, bind);
  CHECK(v[y] == Tensor::vector({1, 2}));
}

TEST_CASE("ReLU on (-1, 0, 3)") {
  Tape tape;
  NodeId x = tape.input("x");
  NodeId y = tape.activate(x, Activation::kRelu);
  Tensor X = Tensor::vector({-1, 0, 3});
  Bindings b;
  b.bind(x, X);
  auto v = eval_forward(tape, b);
  CHECK(v[y] == Tensor::vector({0, 0, 3}));
}

TEST_CASE("2-layer ReLU net matches a hand-rolled loop") {
  Rng rng(11);
  MlpSpec spec{4, {5}, 3, Activation::kRelu, Activation::kIdentity};
  Network net = make_mlp(spec, rng);
  for (auto& p : net.params()) p = rng.normal_tensor(p.shape());
  Tensor x = rng.normal_tensor({4});
  const auto& P = net.params();
  std::vector<double> h(5), out(3);
  for (std::size_t i = 0; i < 5; ++i) {
    double a = P[1][i];
    for (std::size_t j = 0; j < 4; ++j) a += P[0][i * 4 + j] * x[j];
    h[i] = a > 0 ? a : 0.0;
  }
  for (std::size_t i = 0; i < 3; ++i) {
    double a = P[3][i];
    for (std::size_t j = 0; j < 5; ++j) a += P[2][i * 5 + j] * h[j];
    out[i] = a;
  }
  Tensor y = net.forward(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(out[i]).epsilon(1e-14));
}

TEST_CASE("identity scalar has gradient 1") {
  Tape tape;
  NodeId x = tape.input("x");
  NodeId y = tape.scale(x, 1.0);
  Tensor X = Tensor::scalar(0.7);
  Bindings b;
  b.bind(x, X);
  auto v = eval_forward(tape, b);
  auto g = eval_backward(tape, v, y);
  CHECK(g[x].item() == 1.0);
}

TEST_CASE("gradient of |x|^2/2 at (3, -4)") {
  Tape tape;
  NodeId x = tape.input("x");
  NodeId y = tape.scale(tape.squared_norm(x), 0.5);
  Tensor X = Tensor::vector({3, -4});
  Bindings b;
  b.bind(x, X);
  auto v = eval_forward(tape, b);
  CHECK(v[y].item() == 12.5);
  auto g = eval_backward(tape, v, y);
  CHECK(g[x] == Tensor::vector({3, -4}));
}

TEST_CASE("non-scalar seed is rejected") {
  Tape tape;
  NodeId x = tape.input("x");
  NodeId y = tape.activate(x, Activation::kTanh);
  Tensor X = Tensor::vector({1, 2});
  Bindings b;
  b.bind(x, X);
  auto v = eval_forward(tape, b);
  CHECK_THROWS_AS(eval_backward(tape, v, y), ShapeError);
}

TEST_CASE("shape mismatch names the offending node") {
  Tape tape;
  NodeId x = tape.input("x");
  NodeId w = tape.param("w", {2, 3});
  tape.linear(x, w);
  Tensor X = Tensor::vector({1, 2}), W({2, 3});
  Bindings b;
  b.bind(x, X).bind(w, W);
  try {
    (void)eval_forward(tape, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("node 2") != std::string::npos);
  }
}

TEST_CASE("unbound leaf and non-finite values are rejected") {
  Tape tape;
  NodeId x = tape.input("x");
  NodeId y = tape.scale(x, 1e308);
  NodeId z = tape.scale(y, 10.0);
  (void)z;
  Bindings empty;
  CHECK_THROWS_AS(eval_forward(tape, empty), Error);
  Tensor X = Tensor::vector({10.0});
  Bindings b;
  b.bind(x, X);
  CHECK_THROWS_AS(eval_forward(tape, b), NumericError);
}

TEST_CASE("conv 6x6x3 input with a 3x3x3 kernel, same padding, gives a 6x6 map") {
  Rng rng(3);
  Tensor x = rng.normal_tensor({6, 6, 3});
  Tensor k = rng.normal_tensor({3, 3, 3, 1});
  Tensor y = conv2d(x, k, 1, Padding::kSame);
  CHECK(y.shape() == Shape{6, 6, 1});
}

TEST_CASE("1x1 kernel fuses channels per pixel") {
  Rng rng(4);
  Tensor x = rng.normal_tensor({4, 5, 3});
  Tensor k({1, 1, 3, 1}, {0.2, -1.0, 0.5});
  Tensor y = conv2d(x, k, 1, Padding::kSame);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(y.at({i, j, 0}) == doctest::Approx(0.2 * x.at({i, j, 0}) - x.at({i, j, 1}) + 0.5 * x.at({i, j, 2})));
}

TEST_CASE("conv matches a direct loop nest to 1e-12") {
  Rng rng(5);
  Tensor x = rng.normal_tensor({8, 8, 2});
  for (std::size_t k : {1, 3, 5}) {
    for (std::size_t s : {1, 2}) {
      for (bool same : {true, false}) {
        Tensor kern = rng.normal_tensor({k, k, 2, 3});
        Tensor y = conv2d(x, kern, s, same ? Padding::kSame : Padding::kValid);
        Tensor ref = naive_conv(x, kern, s, same);
        REQUIRE(y.shape() == ref.shape());
        CHECK((y - ref).max_abs() < 1e-12);
      }
    }
  }
}

TEST_CASE("parallel conv kernel equals the serial reference bit for bit") {
  Rng rng(6);
  Tensor x = rng.normal_tensor({16, 16, 4});
  Tensor k = rng.normal_tensor({3, 3, 4, 8});
  Tensor b = rng.normal_tensor({8});
  CHECK(conv2d_forward(x, k, &b, 1, Padding::kSame) == conv2d_forward_reference(x, k, &b, 1, Padding::kSame));
  CHECK(conv2d_forward(x, k, &b, 2, Padding::kValid) == conv2d_forward_reference(x, k, &b, 2, Padding::kValid));
}

TEST_CASE("conv rejects bad stride and oversized kernels") {
  Tensor x({4, 4, 1}), k({5, 5, 1, 1});
  CHECK_THROWS_AS(conv2d(x, k, 1, Padding::kValid), ShapeError);
  Tensor k3({3, 3, 1, 1});
  CHECK_THROWS_AS(conv2d(x, k3, 0, Padding::kSame), ShapeError);
  Tensor k2({3, 3, 2, 1});
  CHECK_THROWS_AS(conv2d(x, k2, 1, Padding::kSame), ShapeError);
}

TEST_CASE("every primitive's backward matches central differences") {
  Rng rng(21);
  auto check = [&](Tape& tape, NodeId in, NodeId out, std::vector<std::pair<NodeId, Tensor>> params,
                   const Shape& xshape, bool relu) {
    int tried = 0;
    for (int trial = 0; trial < 5; ++trial) {
      Tensor x = rng.uniform_tensor(xshape, -2.0, 2.0);
      for (auto& [id, p] : params) p = rng.uniform_tensor(p.shape(), -2.0, 2.0);
      Probe probe{tape, in, out, params, Tensor()};
      Bindings b = probe.bind(x);
      auto v = eval_forward(tape, b);
      if (relu && near_kink(tape, v, 1e-3)) continue;
      probe.r = rng.normal_tensor(v[out].shape());
      auto g = probe.grads(x);
      auto fd = finite_diff_check([&](const Tensor& t) { return probe.value(t); }, x, g[in], 1e-5);
      CHECK(fd.max_rel_error < 1e-4);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto pv = params;
        auto fdp = finite_diff_check(
            [&](const Tensor& t) {
              pv[k].second = t;
              Probe q{tape, in, out, pv, probe.r};
              return q.value(x);
            },
            params[k].second, g[params[k].first], 1e-5);
        CHECK(fdp.max_rel_error < 1e-4);
      }
      ++tried;
    }
    CHECK(tried > 0);
  };

  SUBCASE("linear, vector and batched input") {
    for (Shape xs : {Shape{3}, Shape{4, 3}}) {
      Tape t;
      NodeId x = t.input("x"), w = t.param("w", {2, 3}), b = t.param("b", {2});
      NodeId y = t.linear(x, w, b);
      check(t, x, y, {{w, Tensor({2, 3})}, {b, Tensor({2})}}, xs, false);
    }
  }
  SUBCASE("activations") {
    for (auto a : {Activation::kSigmoid, Activation::kTanh, Activation::kRelu, Activation::kIdentity}) {
      Tape t;
      NodeId x = t.input("x");
      NodeId y = t.activate(x, a);
      check(t, x, y, {}, {6}, a == Activation::kRelu);
    }
  }
  SUBCASE("conv, same and valid, strides 1 and 2") {
    for (auto pad : {Padding::kSame, Padding::kValid})
      for (std::size_t s : {1, 2}) {
        Tape t;
        NodeId x = t.input("x"), k = t.param("k", {3, 3, 2, 2}), b = t.param("b", {2});
        NodeId y = t.conv2d(x, k, b, s, pad);
        check(t, x, y, {{k, Tensor({3, 3, 2, 2})}, {b, Tensor({2})}}, {5, 6, 2}, false);
      }
  }
  SUBCASE("add, scale, sum, squared norm, reshape, upsample") {
    Tape t;
    NodeId x = t.input("x");
    NodeId u = t.upsample(x, 2);
    NodeId r = t.reshape(u, {4, 4});
    NodeId a = t.add(t.scale(r, -1.5), t.activate(r, Activation::kTanh));
    NodeId q = t.add(t.sum(a), t.squared_norm(a));
    check(t, x, q, {}, {2, 2, 1}, false);
  }
}

TEST_CASE("random MLP and conv networks agree with central differences") {
  Rng rng(99);
  int checked = 0;
  for (int net_id = 0; net_id < 20; ++net_id) {
    Rng nr = rng.split(static_cast<std::uint64_t>(net_id));
    const bool conv = net_id % 2 == 1;
    Network net = conv ? make_conv_scorer(6, 2, {{3, 3, 1}, {3, 4, 2}}, Activation::kTanh, nr)
                       : make_mlp({3, {6, 5}, 2, Activation::kSigmoid, Activation::kTanh}, nr);
    Tensor x = nr.uniform_tensor(conv ? Shape{6, 6, 2} : Shape{3}, -2.0, 2.0);
    Tensor out = net.forward(x);
    Tensor r = nr.normal_tensor(out.shape());
    auto b = net.backward(x, r);
    auto fd = finite_diff_check([&](const Tensor& t) { return net.forward(t).dot(r); }, x, b.grad_input);
    CHECK(fd.max_rel_error < 1e-4);
    Tensor flat = net.flat_params();
    std::vector<double> g;
    for (const auto& p : b.grad_params) g.insert(g.end(), p.storage().begin(), p.storage().end());
    Network copy = net;
    auto fdp = finite_diff_check(
        [&](const Tensor& t) {
          copy.set_flat_params(t);
          return copy.forward(x).dot(r);
        },
        flat, Tensor::vector(g));
    CHECK(fdp.max_rel_error < 1e-4);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("backward is linear in the seed") {
  Rng rng(8);
  Network net = make_mlp({3, {4}, 2, Activation::kTanh, Activation::kIdentity}, rng);
  Tensor x = rng.normal_tensor({3});
  Tensor r1 = rng.normal_tensor({2}), r2 = rng.normal_tensor({2});
  const double a = 1.7, c = -0.4;
  auto g1 = net.backward(x, r1), g2 = net.backward(x, r2);
  auto g = net.backward(x, a * r1 + c * r2);
  CHECK((g.grad_input - (a * g1.grad_input + c * g2.grad_input)).max_abs() < 1e-12);
  for (std::size_t k = 0; k < g.grad_params.size(); ++k)
    CHECK((g.grad_params[k] - (a * g1.grad_params[k] + c * g2.grad_params[k])).max_abs() < 1e-12);
}

TEST_CASE("identical tapes and leaves give bit-identical outputs") {
  Rng a(12), b(12);
  Network n1 = make_conv_scorer(8, 1, {{3, 4, 1}}, Activation::kRelu, a);
  Network n2 = make_conv_scorer(8, 1, {{3, 4, 1}}, Activation::kRelu, b);
  Tensor x = a.normal_tensor({8, 8, 1});
  CHECK(n1.forward(x) == n2.forward(x));
  auto g1 = n1.backward(x, Tensor::scalar(1.0)), g2 = n2.backward(x, Tensor::scalar(1.0));
  CHECK(g1.grad_input == g2.grad_input);
  CHECK(g1.grad_params == g2.grad_params);
}

TEST_CASE("residual MLP is optional and differentiable") {
  Rng rng(31);
  Network net = make_mlp({2, {4, 4}, 1, Activation::kTanh, Activation::kIdentity, true}, rng);
  std::size_t adds = 0;
  for (const auto& n : net.tape().nodes()) adds += n.op == Op::kAdd;
  CHECK(adds == 1);
  Tensor x = rng.normal_tensor({2});
  auto b = net.backward(x, Tensor::vector({1.0}));
  auto fd = finite_diff_check([&](const Tensor& t) { return net.forward(t)[0]; }, x, b.grad_input);
  CHECK(fd.max_rel_error < 1e-4);
}

TEST_CASE("conv generator follows the texture layout") {
  Rng rng(2);
  ConvGeneratorSpec spec;
  spec.layers = 2;
  spec.first_channels = 4;
  Network g = make_conv_generator(spec, rng);
  Tensor y = g.forward(rng.normal_tensor({49}));
  CHECK(y.shape() == Shape{28, 28, 1});
  for (double v : y.values()) CHECK(std::abs(v) <= 1.0);
}

TEST_CASE("network checkpoint round trip") {
  Rng rng(13);
  Network a = make_mlp({2, {3}, 1}, rng);
  std::stringstream ss;
  a.save(ss);
  Rng other(14);
  Network b = make_mlp({2, {3}, 1}, other);
  b.load(ss);
  CHECK(a.params() == b.params());
}
