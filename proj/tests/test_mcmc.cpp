#include <cmath>
#include <sstream>

#include "doctest.h"
#include "modelzoo/error.hpp"
#include "modelzoo/mcmc.hpp"
#include "modelzoo/oracle.hpp"

using namespace modelzoo;

namespace {

EnergyGrad quadratic(const Tensor& x) { return {0.5 * x.squared_norm(), x}; }

// Bimodal 1-D target: equal mixture of N(-1, 0.6^2) and N(1, 0.6^2).
EnergyGrad bimodal(const Tensor& x) {
  const double v = 0.36, a = x[0] - 1.0, b = x[0] + 1.0;
  const double la = -a * a / (2 * v), lb = -b * b / (2 * v);
  const double m = std::max(la, lb);
  const double wa = std::exp(la - m), wb = std::exp(lb - m);
  const double u = -(m + std::log(wa + wb));
  const double g = (wa * a + wb * b) / (v * (wa + wb));
  return {u, Tensor::vector({g})};
}

}  // namespace

TEST_CASE("config validation") {
  LangevinConfig c;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.steps = 1;
  c.step_size = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  auto mg = LangevinConfig::multigrid_default();
  CHECK(mg.step_size == 0.3);
  CHECK(mg.steps == 30);
  CHECK_NOTHROW(mg.validate());
  auto li = LangevinConfig::latent_inference_default();
  CHECK(li.step_size == 0.1);
  CHECK(li.steps == 10);
}

TEST_CASE("constant energy with s = 1 adds exactly one standard normal draw") {
  EnergyFn flat = [](const Tensor& x) { return EnergyGrad{0.0, Tensor(x.shape())}; };
  LangevinConfig cfg{1.0, 1};
  Rng rng(42), twin(42);
  Tensor x0 = Tensor::vector({0.5, -2.0, 3.0});
  auto s = langevin_step(init_chain(x0, flat), flat, cfg, rng);
  for (std::size_t i = 0; i < 3; ++i) CHECK(s.point[i] == x0[i] + twin.normal());
  CHECK(s.age == 1);
}

TEST_CASE("quadratic energy contracts the mean by 1 - s^2/2") {
  LangevinConfig cfg{0.4, 1};
  cfg.noise_scale = 0.0;
  Rng rng(1);
  Tensor x0 = Tensor::vector({2.0, -1.0});
  auto s = langevin_step(init_chain(x0, quadratic), quadratic, cfg, rng);
  for (std::size_t i = 0; i < 2; ++i) CHECK(s.point[i] == doctest::Approx((1.0 - 0.08) * x0[i]).epsilon(1e-15));
  CHECK(s.energy == doctest::Approx(0.5 * s.point.squared_norm()));
}

TEST_CASE("MH-corrected chains on a standard Gaussian recover its moments") {
  // At s = 0.1 one chain's autocorrelation time is ~400 steps, so a single
  // 1e5-step chain has a mean standard error above the tolerance; 64
  // independent 1e5-step chains are pooled instead.
  LangevinConfig cfg{0.1, 1, true};
  const Rng root(2024);
  double sum = 0.0, sq = 0.0;
  const int n = 100000, chains = 64;
  for (int c = 0; c < chains; ++c) {
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    auto s = init_chain(Tensor::vector({0.0}), quadratic);
    for (int i = 0; i < n; ++i) {
      s = langevin_step(std::move(s), quadratic, cfg, rng);
      sum += s.point[0];
      sq += s.point[0] * s.point[0];
    }
  }
  const double total = static_cast<double>(n) * chains;
  const double mean = sum / total, var = sq / total - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("MH chain occupancy matches a grid-discretized bimodal target") {
  // Occupancy is histogrammed on cells centred at quadrature nodes and
  // compared with the exact cell masses.
  auto grid = Domain::grid_1d(-4.0, 4.0, 41);
  const double h = 8.0 / 40.0;
  std::vector<double> lp = grid.tabulate([](const Tensor& x) { return -bimodal(x).energy; });
  auto mass = normalized_log_mass(lp, grid);
  LangevinConfig cfg{0.8, 1, true};
  Rng rng(77);
  auto s = init_chain(Tensor::vector({0.0}), bimodal);
  std::vector<double> counts(grid.size(), 0.0);
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    s = langevin_step(std::move(s), bimodal, cfg, rng);
    const long k = std::lround((s.point[0] + 4.0) / h);
    if (k >= 0 && k < static_cast<long>(grid.size())) counts[static_cast<std::size_t>(k)] += 1.0 / n;
  }
  double tv = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) tv += 0.5 * std::abs(counts[k] - std::exp(mass[k]));
  CHECK(tv < 0.02);
  CHECK(s.accepted > n / 2);
}

TEST_CASE("zero-temperature steps strictly decrease a quadratic energy") {
  Tensor a = Tensor::vector({3.0, 0.5});
  EnergyFn fn = [&](const Tensor& x) {
    double u = 0.0;
    Tensor g(x.shape());
    for (std::size_t i = 0; i < 2; ++i) {
      u += 0.5 * a[i] * x[i] * x[i];
      g[i] = a[i] * x[i];
    }
    return EnergyGrad{u, g};
  };
  LangevinConfig cfg{0.3, 1};
  cfg.noise_scale = 0.0;
  Rng rng(3);
  auto s = init_chain(Tensor::vector({1.5, -2.0}), fn);
  for (int i = 0; i < 50; ++i) {
    const double before = s.energy;
    s = langevin_step(std::move(s), fn, cfg, rng);
    CHECK(s.energy < before);
  }
}

TEST_CASE("fixed seed gives bit-identical trajectories") {
  LangevinConfig cfg{0.5, 20, true};
  std::vector<Tensor> inits{Tensor::vector({1.0, 2.0}), Tensor::vector({-3.0, 0.0})};
  auto a = run_chains(inits, quadratic, cfg, Rng(9));
  auto b = run_chains(inits, quadratic, cfg, Rng(9));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].point == b[i].point);
  auto c = run_chains(inits, quadratic, cfg, Rng(10));
  CHECK(!(a[0].point == c[0].point));
}

TEST_CASE("parallel run_chains equals the serial reference") {
  LangevinConfig cfg{0.3, 15, true};
  Rng init(4);
  std::vector<Tensor> inits;
  for (int i = 0; i < 32; ++i) inits.push_back(init.normal_tensor({3}, 2.0));
  auto a = run_chains(inits, quadratic, cfg, Rng(5));
  auto b = run_chains_serial(inits, quadratic, cfg, Rng(5));
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].point == b[i].point);
    CHECK(a[i].accepted == b[i].accepted);
  }
}

TEST_CASE("batched chains reproduce per-chain results exactly") {
  BatchEnergyFn batch = [](const Tensor& xs, std::vector<double>& e, Tensor& g) {
    const std::size_t n = xs.extent(0), d = xs.extent(1);
    e.assign(n, 0.0);
    g = Tensor(xs.shape());
    for (std::size_t i = 0; i < n; ++i) {
      auto r = bimodal(Tensor::vector({xs[i * d]}));
      e[i] = r.energy;
      g[i * d] = r.grad[0];
    }
  };
  for (bool mh : {false, true}) {
    LangevinConfig cfg{0.6, 25, mh};
    Rng init(6);
    std::vector<Tensor> inits;
    for (int i = 0; i < 20; ++i) inits.push_back(init.normal_tensor({1}));
    auto per = run_chains(inits, bimodal, cfg, Rng(8));
    auto bat = run_chains_batched(stack(inits), batch, cfg, Rng(8));
    for (std::size_t i = 0; i < per.size(); ++i) {
      CHECK(bat.points[i] == per[i].point[0]);
      CHECK(bat.accepted[i] == per[i].accepted);
    }
  }
}

TEST_CASE("one step of run_chains equals langevin_step per chain") {
  LangevinConfig cfg{0.3, 1};
  std::vector<Tensor> inits{Tensor::vector({1.0}), Tensor::vector({2.0})};
  Rng root(12);
  auto out = run_chains(inits, quadratic, cfg, root);
  for (std::size_t i = 0; i < inits.size(); ++i) {
    Rng stream = root.split(i);
    auto s = langevin_step(init_chain(inits[i], quadratic), quadratic, cfg, stream);
    CHECK(out[i].point == s.point);
  }
}

TEST_CASE("100 chains on a correlated 2-D Gaussian recover its covariance") {
  // Precision matrix P; covariance is its inverse.
  const double p00 = 2.0, p01 = -0.8, p11 = 1.0;
  EnergyFn fn = [&](const Tensor& x) {
    Tensor g = Tensor::vector({p00 * x[0] + p01 * x[1], p01 * x[0] + p11 * x[1]});
    return EnergyGrad{0.5 * x.dot(g), g};
  };
  const double det = p00 * p11 - p01 * p01;
  const double c00 = p11 / det, c01 = -p01 / det, c11 = p00 / det;
  LangevinConfig cfg{0.5, 10, true};
  Rng rng(31);
  std::vector<Tensor> pts;
  for (int i = 0; i < 100; ++i) pts.push_back(rng.normal_tensor({2}, 3.0));
  double s00 = 0, s01 = 0, s11 = 0, m0 = 0, m1 = 0;
  int count = 0;
  for (int round = 0; round < 60; ++round) {
    auto out = run_chains(pts, fn, cfg, rng.split(static_cast<std::uint64_t>(round)));
    for (std::size_t i = 0; i < out.size(); ++i) {
      pts[i] = out[i].point;
      if (round < 10) continue;
      m0 += pts[i][0];
      m1 += pts[i][1];
      s00 += pts[i][0] * pts[i][0];
      s01 += pts[i][0] * pts[i][1];
      s11 += pts[i][1] * pts[i][1];
      ++count;
    }
  }
  m0 /= count;
  m1 /= count;
  CHECK(std::abs(s00 / count - m0 * m0 - c00) < 0.1 * c00);
  CHECK(std::abs(s11 / count - m1 * m1 - c11) < 0.1 * c11);
  CHECK(std::abs(s01 / count - m0 * m1 - c01) < 0.1 * std::sqrt(c00 * c11));
}

TEST_CASE("divergence is flagged for runaway chains") {
  EnergyFn steep = [](const Tensor& x) { return EnergyGrad{-x[0] * x[0] * x[0] * x[0], Tensor::vector({-4.0 * x[0] * x[0] * x[0]})}; };
  LangevinConfig cfg{1.0, 50};
  auto out = run_chains(std::vector<Tensor>{Tensor::vector({3.0})}, steep, cfg, Rng(1));
  CHECK(out[0].diverged);
  EnergyFn nan_grad = [](const Tensor&) { return EnergyGrad{0.0, Tensor::vector({std::nan("")})}; };
  auto s = init_chain(Tensor::vector({0.0}), nan_grad);
  CHECK(s.diverged);
}

TEST_CASE("chain pool modes") {
  Rng rng(5);
  std::vector<Tensor> batch{Tensor::vector({1.0, 2.0}), Tensor::vector({3.0, 4.0})};

  SUBCASE("cd copies the observed batch") {
    ChainPool pool(InitMode::kCd, {2});
    auto inits = pool.draw(2, batch, rng);
    CHECK(inits == batch);
  }
  SUBCASE("persistent falls back to cold, then round-trips stored samples") {
    ChainPool pool(InitMode::kPersistent, {2});
    auto first = pool.draw(3, batch, rng);
    CHECK(pool.fell_back_to_cold());
    CHECK(first.size() == 3);
    std::vector<Tensor> stored{Tensor::vector({9.0, -9.0}), Tensor::vector({0.5, 0.25})};
    pool.store(stored);
    CHECK(pool.draw(2, batch, rng) == stored);
  }
  SUBCASE("cold draws from the reference Gaussian") {
    ChainPool pool(InitMode::kCold, {1}, 4.0);
    auto inits = pool.draw(20000, {}, rng);
    double sq = 0.0;
    for (const auto& x : inits) sq += x[0] * x[0];
    CHECK(sq / 20000.0 == doctest::Approx(4.0).epsilon(0.05));
  }
  SUBCASE("generator-init decodes fresh latent draws plus noise") {
    ChainPool pool(InitMode::kGeneratorInit, {2});
    auto decode = [](Rng& r) {
      const double h = r.normal();
      return Tensor::vector({2.0 * h + 0.1 * r.normal(), -h + 0.1 * r.normal()});
    };
    Rng a(8), b(8);
    auto inits = pool.draw(3, {}, a, decode);
    for (const auto& x : inits) CHECK(x == decode(b));
    CHECK_THROWS_AS(pool.draw(1, {}, a), ConfigError);
  }
  CHECK(parse_init_mode("generator-init") == InitMode::kGeneratorInit);
  CHECK_THROWS_AS(parse_init_mode("warm"), ConfigError);
}

TEST_CASE("trace CSV has a header and one row per step") {
  LangevinConfig cfg{0.2, 5};
  Rng rng(2);
  auto rows = run_chain_traced(Tensor::vector({1.0, 1.0}), quadratic, cfg, rng);
  std::ostringstream out;
  write_trace_csv(out, rows);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,energy,x0,x1");
  int n = 0;
  while (std::getline(in, line)) ++n;
  CHECK(n == 6);
}
