#include "modelzoo/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Dense>

#include "modelzoo/error.hpp"
#include "modelzoo/generative.hpp"

namespace modelzoo {

namespace {

constexpr double kPi = std::numbers::pi;

Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at({static_cast<std::size_t>(i), static_cast<std::size_t>(j)}) = m(i, j);
  return t;
}

Eigen::MatrixXd normal_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = sd * rng.normal();
  return m;
}

Tensor eigen_vector(const Eigen::VectorXd& v) { return Tensor::vector(std::vector<double>(v.data(), v.data() + v.size())); }

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw ConfigError("gen_data", std::string(what) + " must be positive");
}

}  // namespace

TextureKind parse_texture_kind(const std::string& name) {
  if (name == "stripes") return TextureKind::kStripes;
  if (name == "checker") return TextureKind::kChecker;
  if (name == "blobs") return TextureKind::kBlobs;
  throw ConfigError("gen_data", "unknown texture kind '" + name + "' (valid: stripes, checker, blobs)");
}

const char* texture_kind_name(TextureKind k) {
  switch (k) {
    case TextureKind::kStripes: return "stripes";
    case TextureKind::kChecker: return "checker";
    case TextureKind::kBlobs: return "blobs";
  }
  return "?";
}

const std::vector<std::string>& dataset_names() {
  static const std::vector<std::string> names{"gaussian-mixture-2d", "two-moons",       "two-spirals",
                                              "fa-synthetic",        "sparse-synthetic", "rbm-synthetic",
                                              "masked-ratings",      "procedural-textures", "labeled-blobs"};
  return names;
}

Dataset make_dataset(const DatasetSpec& s, Rng& rng) {
  require_positive(s.n, "n");
  if (s.name == "gaussian-mixture-2d") return gaussian_mixture_2d(s.n, s.k, s.radius, s.sd, rng);
  if (s.name == "two-moons") return two_moons(s.n, s.sd, rng);
  if (s.name == "two-spirals") return two_spirals(s.n, s.sd, rng);
  if (s.name == "fa-synthetic") return fa_synthetic(s.n, s.p, s.d, s.sigma2, rng);
  if (s.name == "sparse-synthetic") return sparse_synthetic(s.n, s.p, s.d, s.sparsity, s.sd, rng);
  if (s.name == "rbm-synthetic") return rbm_synthetic(s.n, s.p, s.d, rng);
  if (s.name == "masked-ratings") return masked_ratings(s.n, s.p, s.rank, s.mask_rate, rng);
  if (s.name == "procedural-textures") return procedural_textures(s.n, s.size, s.texture, rng);
  if (s.name == "labeled-blobs") return labeled_blobs(s.n, s.k, s.sd, rng);
  std::string valid;
  for (const auto& n : dataset_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("gen_data", "unknown dataset '" + s.name + "' (valid: " + valid + ")");
}

std::vector<Tensor> ring_centers(std::size_t k, double radius) {
  std::vector<Tensor> c;
  for (std::size_t j = 0; j < k; ++j) {
    const double a = 2.0 * kPi * static_cast<double>(j) / static_cast<double>(k);
    c.push_back(Tensor::vector({radius * std::cos(a), radius * std::sin(a)}));
  }
  return c;
}

Dataset gaussian_mixture_2d(std::size_t n, std::size_t k, double radius, double sd, Rng& rng) {
  require_positive(k, "k");
  if (!(radius > 0.0) || !(sd > 0.0)) throw ConfigError("gen_data", "radius and sd must be positive");
  Dataset ds{"gaussian-mixture-2d", {}, {}, {}, {}};
  const auto centers = ring_centers(k, radius);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = rng.index(k);
    ds.examples.push_back(Tensor::vector({centers[j][0] + sd * rng.normal(), centers[j][1] + sd * rng.normal()}));
    ds.labels.push_back(j);
  }
  Tensor c({k, 2});
  for (std::size_t j = 0; j < k; ++j) c.at({j, 0}) = centers[j][0], c.at({j, 1}) = centers[j][1];
  ds.truth["centers"] = c;
  ds.truth["sd"] = Tensor::scalar(sd);
  return ds;
}

Dataset two_moons(std::size_t n, double noise, Rng& rng) {
  Dataset ds{"two-moons", {}, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const double t = kPi * rng.uniform();
    double x = std::cos(t), y = std::sin(t);
    if (label == 1) x = 1.0 - x, y = 0.5 - y;
    ds.examples.push_back(Tensor::vector({x + noise * rng.normal(), y + noise * rng.normal()}));
    ds.labels.push_back(label);
  }
  return ds;
}

Dataset two_spirals(std::size_t n, double noise, Rng& rng) {
  Dataset ds{"two-spirals", {}, {}, {}, {}};
  const double turns = 3.0 * kPi;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const double t = 0.25 + (turns - 0.25) * rng.uniform();
    const double sgn = label ? -1.0 : 1.0;
    ds.examples.push_back(Tensor::vector({sgn * t * std::cos(t) / turns + noise * rng.normal(),
                                          sgn * t * std::sin(t) / turns + noise * rng.normal()}));
    ds.labels.push_back(label);
  }
  return ds;
}

Dataset fa_synthetic(std::size_t n, std::size_t p, std::size_t d, double sigma2, Rng& rng) {
  require_positive(p, "p");
  require_positive(d, "d");
  if (d >= p) throw ConfigError("gen_data", "fa-synthetic needs d < p");
  if (!(sigma2 > 0.0)) throw ConfigError("gen_data", "sigma2 must be positive");
  Dataset ds{"fa-synthetic", {}, {}, {}, {}};
  const Eigen::MatrixXd W = normal_matrix(p, d, rng);
  const double sd = std::sqrt(sigma2);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd h(d), e(p);
    for (auto& v : h) v = rng.normal();
    for (auto& v : e) v = sd * rng.normal();
    ds.examples.push_back(eigen_vector(W * h + e));
  }
  ds.truth["W"] = matrix_tensor(W);
  ds.truth["sigma2"] = Tensor::scalar(sigma2);
  return ds;
}

Dataset sparse_synthetic(std::size_t n, std::size_t p, std::size_t d, std::size_t sparsity, double sd, Rng& rng) {
  require_positive(p, "p");
  require_positive(d, "d");
  if (sparsity == 0 || sparsity > d) throw ConfigError("gen_data", "sparsity must be in [1, d]");
  Dataset ds{"sparse-synthetic", {}, {}, {}, {}};
  Eigen::MatrixXd D = normal_matrix(p, d, rng);
  D.colwise().normalize();
  std::vector<std::size_t> idx(d);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Eigen::VectorXd code = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    // Partial Fisher-Yates for the support.
    for (std::size_t s = 0; s < sparsity; ++s) {
      std::swap(idx[s], idx[s + rng.index(d - s)]);
      code(static_cast<Eigen::Index>(idx[s])) = rng.normal();
    }
    Eigen::VectorXd x = D * code;
    for (auto& v : x) v += sd * rng.normal();
    ds.examples.push_back(eigen_vector(x));
  }
  ds.truth["dictionary"] = matrix_tensor(D);
  return ds;
}

Dataset rbm_synthetic(std::size_t n, std::size_t p, std::size_t d, Rng& rng) {
  require_positive(p, "p");
  require_positive(d, "d");
  if (p > 20) throw SizeError("gen_data", "rbm-synthetic enumerates 2^p visible states; p must be <= 20");
  RbmModel m = RbmModel::zeros(p, d);
  m.W = normal_matrix(p, d, rng);
  for (auto& v : m.b) v = 0.5 * rng.normal();
  for (auto& v : m.c) v = 0.5 * rng.normal();
  const std::size_t states = std::size_t{1} << p;
  std::vector<double> cdf(states);
  auto state = [&](std::size_t s) {
    Eigen::VectorXd x(p);
    for (std::size_t j = 0; j < p; ++j) x(static_cast<Eigen::Index>(j)) = static_cast<double>((s >> j) & 1u);
    return x;
  };
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < states; ++s) top = std::max(top, cdf[s] = rbm_log_marginal_unnorm(m, state(s)));
  double acc = 0.0;
  for (auto& c : cdf) c = acc += std::exp(c - top);
  Dataset ds{"rbm-synthetic", {}, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * acc;
    const auto s = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    ds.examples.push_back(eigen_vector(state(std::min(s, states - 1))));
  }
  ds.truth["W"] = matrix_tensor(m.W);
  ds.truth["b"] = eigen_vector(m.b);
  ds.truth["c"] = eigen_vector(m.c);
  return ds;
}

Dataset masked_ratings(std::size_t n, std::size_t p, std::size_t rank, double mask_rate, Rng& rng) {
  require_positive(p, "p");
  require_positive(rank, "rank");
  if (!(mask_rate >= 0.0 && mask_rate < 1.0)) throw ConfigError("gen_data", "mask_rate must be in [0, 1)");
  const Eigen::MatrixXd U = normal_matrix(n, rank, rng);
  const Eigen::MatrixXd V = normal_matrix(p, rank, rng, 1.0 / std::sqrt(static_cast<double>(rank)));
  const Eigen::MatrixXd X = U * V.transpose();
  Dataset ds{"masked-ratings", {}, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    ds.examples.push_back(eigen_vector(X.row(static_cast<Eigen::Index>(i)).transpose()));
    Tensor mask({p});
    for (std::size_t j = 0; j < p; ++j) mask[j] = rng.bernoulli(mask_rate) ? 0.0 : 1.0;
    ds.masks.push_back(mask);
  }
  ds.truth["U"] = matrix_tensor(U);
  ds.truth["V"] = matrix_tensor(V);
  return ds;
}

Dataset procedural_textures(std::size_t n, std::size_t size, TextureKind kind, Rng& rng) {
  if (size < 4) throw ConfigError("gen_data", "texture size must be at least 4");
  Dataset ds{"procedural-textures", {}, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img({size, size, 1});
    const std::size_t phase = rng.index(4);
    std::vector<std::array<double, 3>> bumps;
    if (kind == TextureKind::kBlobs)
      for (int b = 0; b < 4; ++b)
        bumps.push_back({rng.uniform(0, static_cast<double>(size)), rng.uniform(0, static_cast<double>(size)),
                         rng.uniform(1.5, 3.0)});
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t c = 0; c < size; ++c) {
        double v = 0.0;
        switch (kind) {
          case TextureKind::kStripes:
            v = std::cos(2.0 * kPi * static_cast<double>(c + phase) / 4.0);
            break;
          case TextureKind::kChecker:
            v = (((r + phase) / 2 + (c + phase) / 2) % 2) ? 0.8 : -0.8;
            break;
          case TextureKind::kBlobs: {
            double s = 0.0;
            for (const auto& b : bumps) {
              const double dr = static_cast<double>(r) - b[0], dc = static_cast<double>(c) - b[1];
              s += std::exp(-(dr * dr + dc * dc) / (2.0 * b[2] * b[2]));
            }
            v = 2.0 * std::min(s, 1.0) - 1.0;
            break;
          }
        }
        img.at({r, c, 0}) = std::clamp(v + 0.05 * rng.normal(), -1.0, 1.0);
      }
    ds.examples.push_back(img);
  }
  return ds;
}

Dataset labeled_blobs(std::size_t n, std::size_t k, double sd, Rng& rng) {
  if (k < 2) throw ConfigError("gen_data", "labeled-blobs needs at least 2 classes");
  auto ds = gaussian_mixture_2d(n, k, 3.0, sd, rng);
  ds.name = "labeled-blobs";
  return ds;
}

}  // namespace modelzoo
