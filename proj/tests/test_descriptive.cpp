#include <cmath>
#include <numbers>

#include "doctest.h"
#include "modelzoo/descriptive.hpp"
#include "modelzoo/error.hpp"
#include "modelzoo/kernels.hpp"

using namespace modelzoo;

namespace {

// Indicator features on {0,1}^bits: every bit plus the listed pairwise ANDs.
FeatureMap indicator_map(std::size_t bits, std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  return FeatureMap::custom(bits + pairs.size(), [bits, pairs](const Tensor& x) {
    Tensor h({bits + pairs.size()});
    for (std::size_t j = 0; j < bits; ++j) h[j] = x[j];
    for (std::size_t k = 0; k < pairs.size(); ++k) h[bits + k] = x[pairs[k].first] * x[pairs[k].second];
    return h;
  });
}

std::vector<double> random_table(std::size_t n, Rng& rng, double scale) {
  std::vector<double> t(n);
  for (auto& v : t) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("feature_stats examples") {
  auto m = FeatureMap::raw_moments(2, 1);
  std::vector<Tensor> data{Tensor::vector({1, 1}), Tensor::vector({3, 3})};
  CHECK(feature_stats(data, m) == Tensor::vector({2, 2}));
  auto pinned = FeatureMap::raw_moments(2, 2, true);
  Tensor s = feature_stats(data, pinned);
  CHECK(s[0] == 1.0);
  CHECK(s[3] == 5.0);
  CHECK_THROWS_AS(feature_stats(std::vector<Tensor>{}, m), ShapeError);
}

TEST_CASE("soft projection marginal matches direct interpolated counting") {
  Rng rng(1);
  std::vector<Tensor> data;
  for (int i = 0; i < 1000; ++i) data.push_back(rng.normal_tensor({2}));
  Tensor w = Tensor::vector({0.6, 0.8});
  SoftBins bins{-3.0, 3.0, 13};
  auto m = FeatureMap::projection_marginals({w}, bins);
  Tensor h = feature_stats(data, m);
  // Direct oracle: split each projection between its two neighbouring
  // centres by linear interpolation.
  std::vector<double> counts(13, 0.0);
  for (const auto& x : data) {
    const double v = 0.6 * x[0] + 0.8 * x[1];
    const double u = (v + 3.0) / 0.5;
    if (u < 0.0) {
      counts[0] += std::max(0.0, 1.0 + u) / 1000.0;
      continue;
    }
    if (u > 12.0) {
      counts[12] += std::max(0.0, 13.0 - u) / 1000.0;
      continue;
    }
    const auto lo = static_cast<std::size_t>(std::floor(u));
    const double frac = u - static_cast<double>(lo);
    counts[lo] += (1.0 - frac) / 1000.0;
    if (lo + 1 < 13) counts[lo + 1] += frac / 1000.0;
  }
  for (std::size_t b = 0; b < 13; ++b) CHECK(h[b] == doctest::Approx(counts[b]).epsilon(1e-12));
}

TEST_CASE("feature-map vjps match finite differences") {
  Rng rng(2);
  SoftBins bins{-2.0, 2.0, 7};
  auto proj = FeatureMap::projection_marginals({Tensor::vector({0.6, 0.8}), Tensor::vector({1.0, 0.0})}, bins);
  auto moments = FeatureMap::raw_moments(2, 3, true);
  for (const auto* m : {&proj, &moments}) {
    Tensor theta = rng.normal_tensor({m->dim()});
    Tensor x = Tensor::vector({0.37, -0.61});
    auto fd = finite_diff_check([&](const Tensor& t) { return (*m)(t).dot(theta); }, x, m->vjp(x, theta));
    CHECK(fd.max_rel_error < 1e-6);
  }
  std::vector<Tensor> filters{Tensor({3, 3}, {0, 0, 0, -1, 1, 0, 0, 0, 0}), Tensor({3, 3}, {0, -1, 0, 0, 1, 0, 0, 0, 0})};
  auto fh = FeatureMap::filter_histograms(filters, SoftBins{-1.0, 1.0, 5});
  Tensor img = rng.uniform_tensor({5, 5, 1}, -0.9, 0.9);
  Tensor theta = rng.normal_tensor({fh.dim()});
  auto fd = finite_diff_check([&](const Tensor& t) { return fh(t).dot(theta); }, img, fh.vjp(img, theta), 1e-6);
  CHECK(fd.max_rel_error < 1e-4);
}

TEST_CASE("exact fit: data mean equal to the reference mean gives theta = 0") {
  auto d = Domain::grid_1d(-1.0, 1.0, 201);
  auto m = FeatureMap::raw_moments(1, 1);
  std::vector<Tensor> data{Tensor::vector({-0.5}), Tensor::vector({0.5})};
  auto fit = fit_linear_exact(data, m, d, Reference::uniform(-1.0, 1.0));
  CHECK(std::abs(fit.model.theta[0]) < 1e-12);
}

TEST_CASE("exact fit on a 3-state domain reproduces an indicator frequency of 0.7") {
  auto d = Domain::enumerated({Tensor::vector({0}), Tensor::vector({1}), Tensor::vector({2})});
  auto ind = FeatureMap::custom(1, [](const Tensor& x) { return Tensor::vector({x[0] == 1.0 ? 1.0 : 0.0}); });
  std::vector<Tensor> data;
  for (int i = 0; i < 7; ++i) data.push_back(Tensor::vector({1}));
  data.push_back(Tensor::vector({0}));
  data.push_back(Tensor::vector({2}));
  data.push_back(Tensor::vector({2}));
  auto ref = Reference::table({0.0, 0.0, 0.0});
  auto fit = fit_linear_exact(data, ind, d, ref);
  // Oracle: enumerate the three states directly.
  const double t = fit.model.theta[0];
  const double p1 = std::exp(t) / (2.0 + std::exp(t));
  CHECK(p1 == doctest::Approx(0.7).epsilon(1e-10));
  CHECK(t == doctest::Approx(std::log(0.7 * 2.0 / 0.3)).epsilon(1e-9));
  CHECK(*fit.model.log_z == doctest::Approx(std::log(2.0 + std::exp(t))).epsilon(1e-12));
}

TEST_CASE("boundary-infeasible moments are reported with the coordinate") {
  auto d = Domain::binary_cube(3);
  auto m = indicator_map(3, {});
  std::vector<Tensor> data{Tensor::vector({1, 0, 1}), Tensor::vector({0, 1, 1})};
  try {
    fit_linear_exact(data, m, d, Reference::table(std::vector<double>(8, 0.0)));
    FAIL("expected infeasible");
  } catch (const InfeasibleError& e) {
    CHECK(e.coordinate() == 2);
  }
}

TEST_CASE("exact fit matches moments to 1e-6 with a nondecreasing log-likelihood") {
  Rng rng(3);
  auto d = Domain::binary_cube(10);
  auto m = indicator_map(10, {{0, 1}, {2, 3}});
  auto truth = random_table(d.size(), rng, 1.0);
  auto mass = normalized_log_mass(truth, d);
  std::vector<Tensor> data;
  for (auto s : sample_table(mass, 5000, rng)) data.push_back(d.state(s));
  auto fit = fit_linear_exact(data, m, d, Reference::table(std::vector<double>(d.size(), 0.0)));
  CHECK(fit.moment_gap < 1e-6);
  const auto h = feature_table(m, d);
  Tensor em = exact_moments(fit.model.theta, h, std::vector<double>(d.size(), 0.0), d);
  CHECK((em - feature_stats(data, m)).max_abs() < 1e-6);
  for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
    CHECK(fit.log_likelihood[i] >= fit.log_likelihood[i - 1] - 1e-12);
  // Plain gradient ascent with backtracking is monotone too.
  ExactFitConfig plain;
  plain.newton = false;
  plain.max_iters = 100;
  auto slow = fit_linear_exact(data, m, d, Reference::table(std::vector<double>(d.size(), 0.0)), plain);
  for (std::size_t i = 1; i < slow.log_likelihood.size(); ++i)
    CHECK(slow.log_likelihood[i] >= slow.log_likelihood[i - 1] - 1e-12);
}

TEST_CASE("Pythagorean property on an enumerated domain") {
  Rng rng(4);
  auto d = Domain::binary_cube(6);
  auto m = indicator_map(6, {{0, 5}});
  const std::vector<double> flat(d.size(), 0.0);
  const auto h = feature_table(m, d);
  for (int trial = 0; trial < 10; ++trial) {
    // p in Omega: any distribution; p_hat fits its moments; p_theta random.
    auto p = random_table(d.size(), rng, 1.5);
    auto pm = normalized_log_mass(p, d);
    Tensor hbar({m.dim()});
    for (std::size_t s = 0; s < d.size(); ++s)
      for (std::size_t k = 0; k < m.dim(); ++k) hbar[k] += std::exp(pm[s]) * h[s * m.dim() + k];
    auto fit = fit_linear_exact_moments(hbar, m, d, Reference::table(flat));
    auto phat = model_log_table(fit.model, d);
    LinearDescriptiveModel other{rng.normal_tensor({m.dim()}), m, Reference::table(flat), std::nullopt};
    auto ptheta = model_log_table(other, d);
    const double lhs = exact_kl(p, ptheta, d);
    const double rhs = exact_kl(p, phat, d) + exact_kl(phat, ptheta, d);
    CHECK(std::abs(lhs - rhs) < 1e-8);
  }
}

TEST_CASE("maximum-entropy duality: the fit is closest to the reference among moment matchers") {
  Rng rng(5);
  auto d = Domain::binary_cube(5);
  auto m = indicator_map(5, {{1, 2}});
  auto ref = Reference::table(random_table(d.size(), rng, 0.5));
  const auto h = feature_table(m, d);
  auto p0 = ref.log_table;
  auto target = random_table(d.size(), rng, 1.0);
  auto tm = normalized_log_mass(target, d);
  Tensor hbar({m.dim()});
  for (std::size_t s = 0; s < d.size(); ++s)
    for (std::size_t k = 0; k < m.dim(); ++k) hbar[k] += std::exp(tm[s]) * h[s * m.dim() + k];
  auto fit = fit_linear_exact_moments(hbar, m, d, ref);
  auto phat = model_log_table(fit.model, d);
  const double kl_hat = exact_kl(phat, p0, d);
  for (int trial = 0; trial < 100; ++trial) {
    // Random mixtures re-projected onto Omega by an exact fit with the
    // mixture as its reference.
    auto a = random_table(d.size(), rng, 1.0), b = random_table(d.size(), rng, 1.0);
    const double w = rng.uniform();
    std::vector<double> mix(d.size());
    for (std::size_t s = 0; s < d.size(); ++s) mix[s] = std::log(w * std::exp(a[s]) + (1 - w) * std::exp(b[s]));
    auto proj = fit_linear_exact_moments(hbar, m, d, Reference::table(mix));
    auto p = model_log_table(proj.model, d);
    CHECK(proj.moment_gap < 1e-9);
    CHECK(kl_hat <= exact_kl(p, p0, d) + 1e-8);
  }
}

TEST_CASE("Langevin fit of a 1-D Gaussian agrees with the exact quadrature fit") {
  Rng rng(6);
  std::vector<Tensor> data;
  for (int i = 0; i < 20000; ++i) data.push_back(Tensor::vector({0.5 + 0.7 * rng.normal()}));
  auto m = FeatureMap::raw_moments(1, 2);
  auto ref = Reference::gaussian(1.0);
  auto exact = fit_linear_exact(data, m, Domain::grid_1d(-10.0, 10.0, 4001), ref);
  LangevinConfig lang{0.1, 20};
  LangevinFitConfig cfg;
  cfg.epochs = 300;
  cfg.chains = 500;
  cfg.lr = 0.5;
  auto fit = fit_linear_langevin(data, m, ref, lang, cfg, rng);
  for (std::size_t k = 0; k < 2; ++k)
    CHECK(std::abs(fit.model.theta[k] - exact.model.theta[k]) < 0.05 * std::abs(exact.model.theta[k]));
  CHECK(fit.discrepancy.size() == 300);
  CHECK(fit.discrepancy.back() < fit.discrepancy.front());
}

TEST_CASE("Langevin fit with data drawn from the reference stays at theta = 0") {
  Rng rng(7);
  std::vector<Tensor> data;
  for (int i = 0; i < 20000; ++i) data.push_back(rng.normal_tensor({1}));
  auto m = FeatureMap::raw_moments(1, 1);
  LangevinFitConfig cfg;
  cfg.epochs = 50;
  cfg.chains = 500;
  auto fit = fit_linear_langevin(data, m, Reference::gaussian(1.0), LangevinConfig{0.3, 20}, cfg, rng);
  CHECK(std::abs(fit.model.theta[0]) < 0.05);
}

TEST_CASE("logarithmic decay every 10 iterations") {
  CHECK(log_decay_rate(0.3, 0) == 0.3);
  CHECK(log_decay_rate(0.3, 9) == 0.3);
  CHECK(log_decay_rate(0.3, 10) == doctest::Approx(0.3 / (1.0 + std::log(2.0))));
  CHECK(log_decay_rate(0.3, 25) == doctest::Approx(0.3 / (1.0 + std::log(3.0))));
}

TEST_CASE("projection pursuit") {
  Rng rng(8);
  std::vector<Tensor> data, synth;
  for (int i = 0; i < 2000; ++i) {
    data.push_back(Tensor::vector({(i % 2 ? 5.0 : -5.0) + 0.5 * rng.normal(), rng.normal()}));
    synth.push_back(rng.normal_tensor({2}, 3.0));
  }
  std::vector<Tensor> axes{Tensor::vector({0, 1}), Tensor::vector({1, 0})};
  auto r = pursue_projection(data, synth, axes);
  CHECK(r.best == 1);
  CHECK(!r.converged);
  auto same = pursue_projection(data, data, axes);
  CHECK(same.converged);
  for (double v : same.discrepancy) CHECK(v == 0.0);
}

TEST_CASE("sequential pursuit on a two-cluster set reduces the chosen discrepancy each round") {
  Rng rng(9);
  std::vector<Tensor> data;
  for (int i = 0; i < 4000; ++i) {
    const double s = i % 2 ? 1.0 : -1.0;
    data.push_back(Tensor::vector({1.5 * s + 0.4 * rng.normal(), 1.5 * s + 0.4 * rng.normal()}));
  }
  auto domain = Domain::grid_2d(-4.0, 4.0, 81);
  auto cands = planar_directions(12);
  auto rounds = sequential_pursuit(data, domain, cands, 4, SoftBins{-4.0, 4.0, 17}, 20000, rng);
  REQUIRE(rounds.size() == 4);
  // the first direction separates the clusters along the diagonal
  CHECK(std::abs(rounds[0].direction[0] - rounds[0].direction[1]) < 0.3);
  for (std::size_t i = 1; i < rounds.size(); ++i) CHECK(rounds[i].discrepancy < rounds[i - 1].discrepancy);
}

TEST_CASE("deep EBM gradients") {
  Rng rng(10);
  SUBCASE("zero score gives X / sigma2") {
    Network net = make_mlp({3, {}, 1}, rng);
    for (auto& p : net.params()) p *= 0.0;
    DeepEnergyModel ebm{net, 2.0};
    Tensor x = Tensor::vector({1.0, -2.0, 4.0});
    auto g = deep_ebm_grads(ebm, x);
    CHECK(g.grad_x == 0.5 * x);
    CHECK(g.energy == doctest::Approx(x.squared_norm() / 4.0));
  }
  SUBCASE("linear score gives X / sigma2 - w") {
    Network net = make_mlp({3, {}, 1}, rng);
    net.params()[0] = Tensor({1, 3}, {0.5, -1.0, 2.0});
    DeepEnergyModel ebm{net, 1.0};
    Tensor x = Tensor::vector({1.0, 1.0, 1.0});
    auto g = deep_ebm_grads(ebm, x);
    CHECK(g.grad_x == Tensor::vector({0.5, 2.0, -1.0}));
    CHECK(g.grad_score[0] == Tensor({1, 3}, {1.0, 1.0, 1.0}));
  }
  SUBCASE("random conv net matches finite differences in X and theta") {
    Network net = make_conv_scorer(6, 1, {{3, 4, 1}, {3, 4, 2}}, Activation::kTanh, rng);
    DeepEnergyModel ebm{net, 1.0};
    Tensor x = rng.uniform_tensor({6, 6, 1}, -2.0, 2.0);
    auto g = deep_ebm_grads(ebm, x);
    auto fx = finite_diff_check([&](const Tensor& t) { return deep_ebm_grads(ebm, t).energy; }, x, g.grad_x);
    CHECK(fx.max_rel_error < 1e-4);
    std::vector<double> flat;
    for (const auto& p : g.grad_score) flat.insert(flat.end(), p.storage().begin(), p.storage().end());
    DeepEnergyModel copy = ebm;
    auto fp = finite_diff_check(
        [&](const Tensor& t) {
          copy.score.set_flat_params(t);
          return copy.score.forward(x).item();
        },
        ebm.score.flat_params(), Tensor::vector(flat));
    CHECK(fp.max_rel_error < 1e-4);
  }
  SUBCASE("input shape mismatch is rejected") {
    Network net = make_mlp({3, {}, 1}, rng);
    DeepEnergyModel ebm{net, 1.0};
    CHECK_THROWS_AS(deep_ebm_grads(ebm, Tensor::vector({1.0, 2.0})), ShapeError);
  }
}

TEST_CASE("batched EBM energies equal per-example energies") {
  Rng rng(11);
  DeepEnergyModel ebm{make_mlp({2, {8}, 1}, rng), 1.0};
  std::vector<Tensor> xs;
  for (int i = 0; i < 5; ++i) xs.push_back(rng.normal_tensor({2}));
  std::vector<double> e;
  Tensor g;
  ebm_batch_energy_fn(ebm)(stack(xs), e, g);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto one = deep_ebm_grads(ebm, xs[i]);
    CHECK(e[i] == doctest::Approx(one.energy).epsilon(1e-13));
    CHECK((g.row(i) - one.grad_x).max_abs() < 1e-13);
  }
}

TEST_CASE("data drawn from the model gives an update that shrinks with more synthesized samples") {
  Rng rng(12);
  DeepEnergyModel ebm{make_mlp({2, {8}, 1}, rng, 1.5), 1.0};
  LangevinConfig lang{0.4, 200, true};
  auto draw = [&](std::size_t n, Rng& r) {
    std::vector<Tensor> inits;
    for (std::size_t i = 0; i < n; ++i) inits.push_back(r.normal_tensor({2}));
    return ebm_synthesize(ebm, inits, lang, true, r);
  };
  Rng dr = rng.split("data");
  auto data = draw(2000, dr);
  auto norm = [](const std::vector<Tensor>& ts) {
    double s = 0.0;
    for (const auto& t : ts) s += t.squared_norm();
    return std::sqrt(s);
  };
  double small = 0.0, large = 0.0;
  for (int rep = 0; rep < 5; ++rep) {
    Rng a = rng.split(static_cast<std::uint64_t>(100 + rep)), b = rng.split(static_cast<std::uint64_t>(200 + rep));
    small += norm(ebm_update_direction(ebm, data, draw(20, a), true));
    large += norm(ebm_update_direction(ebm, data, draw(1000, b), true));
  }
  CHECK(large < 0.5 * small);
}

TEST_CASE("deep EBM on an 8-mode ring covers every mode with persistent chains") {
  Rng rng(13);
  std::vector<Tensor> data;
  const double pi = std::numbers::pi;
  for (int i = 0; i < 2000; ++i) {
    const double a = 2.0 * pi * (i % 8) / 8.0;
    data.push_back(Tensor::vector({2.0 * std::cos(a) + 0.15 * rng.normal(), 2.0 * std::sin(a) + 0.15 * rng.normal()}));
  }
  DeepEnergyModel ebm{make_mlp({2, {32, 32}, 1, Activation::kTanh}, rng), 1.0};
  EbmTrainConfig cfg;
  cfg.iterations = 600;
  cfg.lr = 3e-3;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.batched = true;
  cfg.synth_count = 200;
  cfg.decay_every = 1000000;
  LangevinConfig lang{0.1, 30};
  auto log = fit_deep_ebm(ebm, data, InitMode::kPersistent, lang, cfg, rng);
  CHECK(log.size() == 600);
  // Long-run samples from fresh cold chains.
  std::vector<Tensor> inits;
  for (int i = 0; i < 800; ++i) inits.push_back(rng.normal_tensor({2}, 1.0));
  LangevinConfig longrun{0.1, 500};
  auto samples = ebm_synthesize(ebm, inits, longrun, true, rng);
  std::vector<int> counts(8, 0);
  for (const auto& x : samples) {
    double best = 1e9;
    int k = 0;
    for (int j = 0; j < 8; ++j) {
      const double a = 2.0 * pi * j / 8.0;
      const double d = std::hypot(x[0] - 2.0 * std::cos(a), x[1] - 2.0 * std::sin(a));
      if (d < best) best = d, k = j;
    }
    if (best < 0.6) ++counts[static_cast<std::size_t>(k)];
  }
  for (int c : counts) CHECK(c > 20);
}

TEST_CASE("EBM training defaults follow the paper") {
  EbmTrainConfig cfg;
  CHECK(cfg.batch_size == 100);
  CHECK(cfg.lr == 0.3);
}

TEST_CASE("pyramid examples") {
  Tensor c = Tensor::filled({16, 16, 1}, 0.3);
  std::vector<std::size_t> grids{1, 4, 16};
  for (const auto& level : build_pyramid(c, grids))
    for (double v : level.values()) {
      CHECK(v == level[0]);
      CHECK(std::abs(v - 0.3) < 1e-14);
    }
  Tensor two({2, 2, 1}, {0, 2, 4, 6});
  std::vector<std::size_t> g2{1, 2};
  CHECK(build_pyramid(two, g2)[0].item() == 3.0);
  Rng rng(1);
  std::vector<std::size_t> paper{4, 16, 64};
  auto lv = build_pyramid(rng.normal_tensor({64, 64, 1}), paper);
  CHECK(lv[0].shape() == Shape{4, 4, 1});
  CHECK(lv[1].shape() == Shape{16, 16, 1});
  CHECK(lv[2].shape() == Shape{64, 64, 1});
  std::vector<std::size_t> bad{1, 3, 16};
  CHECK_THROWS_AS(build_pyramid(c, bad), ConfigError);
  CHECK_THROWS_AS(build_pyramid(Tensor({4, 8, 1}), g2), ShapeError);
}

TEST_CASE("single-grid pyramid seeds its sampler from the 1x1 histogram") {
  Rng rng(14);
  MultigridConfig cfg;
  cfg.grids = {1, 4};
  cfg.iterations = 3;
  cfg.batch_size = 4;
  cfg.synth_count = 4;
  auto pyr = make_pyramid_models(cfg, 1, rng);
  CHECK(pyr.models.size() == 1);
  std::vector<Tensor> data;
  for (int i = 0; i < 8; ++i) data.push_back(Tensor::filled({4, 4, 1}, 0.5));
  auto log = fit_multigrid(pyr, data, cfg, LangevinConfig{0.3, 2}, rng);
  CHECK(log.size() == 3);
  CHECK(log[0].discrepancy.size() == 1);
  // All seed mass sits in the bin containing 0.5.
  CHECK(pyr.seed_histogram[7] == 1.0);
  LangevinConfig tiny{1e-6, 1};
  Tensor img = sample_multigrid(pyr, tiny, rng);
  CHECK(img.shape() == Shape{4, 4, 1});
  for (double v : img.values()) CHECK(std::abs(v - img[0]) < 1e-4);
  CHECK(img[0] >= 0.4 - 1e-4);
  CHECK(img[0] <= 0.6 + 1e-4);
}
