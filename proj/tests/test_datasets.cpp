#include <cmath>
#include <string>

#include "doctest.h"
#include "modelzoo/datasets.hpp"
#include "modelzoo/error.hpp"
#include "modelzoo/generative.hpp"

using namespace modelzoo;

TEST_CASE("ring mixture has k centres on the circle") {
  Rng rng(1);
  auto ds = gaussian_mixture_2d(2000, 8, 2.0, 0.05, rng);
  const Tensor& c = ds.truth.at("centers");
  CHECK(c.shape() == Shape{8, 2});
  CHECK(c.at({0, 0}) == 2.0);
  CHECK(c.at({0, 1}) == 0.0);
  for (std::size_t j = 0; j < 8; ++j) CHECK(std::hypot(c.at({j, 0}), c.at({j, 1})) == doctest::Approx(2.0).epsilon(1e-14));
  // Every point sits near its labelled centre.
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    const auto j = ds.labels[i];
    CHECK(std::hypot(ds.examples[i][0] - c.at({j, 0}), ds.examples[i][1] - c.at({j, 1})) < 0.5);
  }
}

TEST_CASE("stripe textures have period 4 along the columns") {
  Rng rng(2);
  auto ds = procedural_textures(5, 16, TextureKind::kStripes, rng);
  for (const auto& img : ds.examples) {
    CHECK(img.shape() == Shape{16, 16, 1});
    // Column autocorrelation of the centred image at lags 1..4.
    double mean = 0.0;
    for (double v : img.values()) mean += v / 256.0;
    auto corr = [&](std::size_t lag) {
      double num = 0.0, den = 0.0;
      for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) {
          const double a = img.at({r, c, 0}) - mean;
          den += a * a;
          if (c + lag < 16) num += a * (img.at({r, c + lag, 0}) - mean);
        }
      return num / den * 16.0 / static_cast<double>(16 - lag);
    };
    CHECK(corr(4) > 0.9);
    CHECK(corr(2) < -0.9);
    CHECK(std::abs(corr(1)) < 0.1);
    for (double v : img.values()) CHECK(std::abs(v) <= 1.0);
  }
}

TEST_CASE("fa-synthetic stores the true loadings") {
  Rng rng(3);
  auto ds = fa_synthetic(5000, 20, 3, 0.1, rng);
  CHECK(ds.truth.at("W").shape() == Shape{20, 3});
  CHECK(ds.truth.at("sigma2").item() == 0.1);
  // Sample second moment of coordinate 0 against W W^T + sigma2.
  const Tensor& W = ds.truth.at("W");
  double want = 0.1, got = 0.0;
  for (std::size_t k = 0; k < 3; ++k) want += W.at({0, k}) * W.at({0, k});
  for (const auto& x : ds.examples) got += x[0] * x[0] / 5000.0;
  CHECK(std::abs(got - want) < 0.1 * want);
}

TEST_CASE("sparse codes, ratings masks and blobs") {
  Rng rng(4);
  auto sp = sparse_synthetic(50, 16, 24, 3, 0.0, rng);
  const Tensor& D = sp.truth.at("dictionary");
  for (std::size_t k = 0; k < 24; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < 16; ++j) s += D.at({j, k}) * D.at({j, k});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto mr = masked_ratings(400, 10, 2, 0.3, rng);
  double hidden = 0.0;
  for (const auto& m : mr.masks) for (double v : m.values()) hidden += (v == 0.0) / 4000.0;
  CHECK(std::abs(hidden - 0.3) < 0.03);
  auto bl = labeled_blobs(300, 3, 0.5, rng);
  CHECK(bl.labels.size() == 300);
  CHECK(bl.name == "labeled-blobs");
}

TEST_CASE("rbm-synthetic draws follow the exact marginal") {
  Rng rng(5);
  auto ds = rbm_synthetic(20000, 3, 2, rng);
  RbmModel m = RbmModel::zeros(3, 2);
  const Tensor& W = ds.truth.at("W");
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t k = 0; k < 2; ++k) m.W(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = W.at({j, k});
    m.b(static_cast<Eigen::Index>(j)) = ds.truth.at("b")[j];
  }
  for (std::size_t k = 0; k < 2; ++k) m.c(static_cast<Eigen::Index>(k)) = ds.truth.at("c")[k];
  const double logz = rbm_exact_logz(m);
  std::vector<double> freq(8, 0.0);
  for (const auto& x : ds.examples) freq[static_cast<std::size_t>(x[0] + 2 * x[1] + 4 * x[2])] += 1.0 / 20000.0;
  double tv = 0.0;
  for (std::size_t s = 0; s < 8; ++s) {
    Eigen::VectorXd x(3);
    for (std::size_t j = 0; j < 3; ++j) x(static_cast<Eigen::Index>(j)) = static_cast<double>((s >> j) & 1u);
    tv += 0.5 * std::abs(freq[s] - std::exp(rbm_log_marginal_unnorm(m, x) - logz));
  }
  CHECK(tv < 0.02);
}

TEST_CASE("dataset dispatch is deterministic and rejects unknown names") {
  DatasetSpec spec;
  spec.name = "two-moons";
  spec.n = 100;
  Rng a(7), b(7);
  auto x = make_dataset(spec, a), y = make_dataset(spec, b);
  for (std::size_t i = 0; i < 100; ++i) CHECK((x.examples[i] - y.examples[i]).max_abs() == 0.0);
  spec.name = "mnist";
  try {
    make_dataset(spec, a);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("two-spirals") != std::string::npos);
  }
  for (const auto& name : dataset_names()) {
    DatasetSpec s;
    s.name = name;
    s.n = 10;
    s.p = name == "rbm-synthetic" ? 6 : s.p;
    CHECK(make_dataset(s, a).examples.size() == 10);
  }
}
