#include "modelzoo/generative.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "modelzoo/error.hpp"
#include "modelzoo/oracle.hpp"

namespace modelzoo {

namespace {

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

Eigen::VectorXd to_vec(const Tensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}

Tensor to_tensor(const Eigen::VectorXd& v, const Shape& shape) {
  return Tensor(shape, std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::MatrixXd second_moment(std::span<const Tensor> data) {
  Eigen::MatrixXd X = to_matrix(data);
  return (X.transpose() * X) / static_cast<double>(X.rows());
}

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
}

}  // namespace

Eigen::MatrixXd to_matrix(std::span<const Tensor> data) {
  if (data.empty()) throw ShapeError("to_matrix", "empty data");
  const std::size_t p = data[0].size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].size() != p) throw ShapeError("to_matrix", "examples differ in size");
    for (std::size_t j = 0; j < p; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data[i][j];
  }
  return X;
}

std::vector<Tensor> from_matrix(const Eigen::MatrixXd& rows) {
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    Eigen::VectorXd r = rows.row(i).transpose();
    out.push_back(to_tensor(r, {static_cast<std::size_t>(r.size())}));
  }
  return out;
}

double principal_angle_deg(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) throw ShapeError("principal_angle", "spans live in different spaces");
  auto basis = [](const Eigen::MatrixXd& m) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
    return Eigen::MatrixXd(qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  };
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(basis(a).transpose() * basis(b));
  const double smin = std::min(1.0, svd.singularValues().minCoeff());
  return std::acos(smin) * 180.0 / std::numbers::pi;
}

// --- factor analysis -------------------------------------------------------

void FactorAnalysisModel::validate() const {
  if (!(sigma2 > 0.0)) throw ConfigError("factor_analysis", "sigma2 must be positive");
  if (W.cols() > W.rows()) throw ConfigError("factor_analysis", "latent dimension exceeds data dimension");
  if (!W.allFinite()) throw NumericError("factor_analysis", "non-finite loadings");
}

double fa_log_likelihood(const FactorAnalysisModel& model, const Eigen::MatrixXd& S) {
  const auto p = model.W.rows();
  Eigen::MatrixXd C = model.W * model.W.transpose();
  C.diagonal().array() += model.sigma2;
  Eigen::LLT<Eigen::MatrixXd> llt(C);
  if (llt.info() != Eigen::Success) throw NumericError("fa_log_likelihood", "covariance not positive definite");
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double tr = llt.solve(S).trace();
  return -0.5 * (static_cast<double>(p) * std::log(2.0 * std::numbers::pi) + logdet + tr);
}

double fa_log_likelihood(const FactorAnalysisModel& model, std::span<const Tensor> data) {
  return fa_log_likelihood(model, second_moment(data));
}

FaFit fit_factor_analysis_from(const Eigen::MatrixXd& S, FactorAnalysisModel init, const EmConfig& cfg) {
  init.validate();
  FaFit fit;
  FactorAnalysisModel m = std::move(init);
  const auto p = m.W.rows(), d = m.W.cols();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  double ll = fa_log_likelihood(m, S);
  fit.log_likelihood.push_back(ll);
  for (int it = 0; it < cfg.max_iters; ++it) {
    Eigen::MatrixXd M = m.W.transpose() * m.W + m.sigma2 * I;
    Eigen::MatrixXd Minv = M.llt().solve(I);
    Eigen::MatrixXd SW = S * m.W;
    Eigen::MatrixXd inner = m.sigma2 * I + Minv * m.W.transpose() * SW;
    Eigen::MatrixXd Wn = inner.transpose().partialPivLu().solve(SW.transpose()).transpose();
    double s2 = (S - SW * Minv * Wn.transpose()).trace() / static_cast<double>(p);
    if (!(s2 > cfg.sigma2_floor)) {
      s2 = cfg.sigma2_floor;
      fit.floored = true;
    }
    m.W = std::move(Wn);
    m.sigma2 = s2;
    const double next = fa_log_likelihood(m, S);
    fit.log_likelihood.push_back(next);
    const double gain = next - ll;
    ll = next;
    if (fit.floored || std::abs(gain) < cfg.tolerance) break;
  }
  fit.model = std::move(m);
  return fit;
}

FaFit fit_factor_analysis(std::span<const Tensor> data, std::size_t d, const EmConfig& cfg, Rng& rng) {
  if (data.size() <= d) throw ConfigError("fit_factor_analysis", "need more examples than latent dimensions");
  const Eigen::MatrixXd S = second_moment(data);
  const auto p = S.rows();
  if (static_cast<Eigen::Index>(d) > p) throw ConfigError("fit_factor_analysis", "d must not exceed p");
  const double scale = S.trace() / static_cast<double>(p);
  FactorAnalysisModel init;
  init.W.resize(p, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < init.W.size(); ++i) init.W.data()[i] = std::sqrt(scale) * rng.normal();
  init.sigma2 = std::max(scale, cfg.sigma2_floor);
  return fit_factor_analysis_from(S, std::move(init), cfg);
}

GaussianPosterior fa_posterior(const FactorAnalysisModel& model, const Tensor& x) {
  model.validate();
  if (static_cast<Eigen::Index>(x.size()) != model.W.rows()) throw ShapeError("fa_posterior", "x has the wrong length");
  const auto d = model.W.cols();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd M = model.W.transpose() * model.W + model.sigma2 * I;
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  GaussianPosterior post;
  post.mean = llt.solve(model.W.transpose() * to_vec(x));
  post.cov = model.sigma2 * llt.solve(I);
  return post;
}

// --- sparse coding ---------------------------------------------------------

void SparseCoder::validate() const {
  if (lambda < 0.0) throw ConfigError("sparse_coding", "lambda must be nonnegative");
  for (Eigen::Index j = 0; j < W.cols(); ++j)
    if (std::abs(W.col(j).norm() - 1.0) > 1e-9)
      throw ConfigError("sparse_coding", "dictionary column " + std::to_string(j) + " is not unit norm");
}

double SparseCoder::objective(const Eigen::VectorXd& x, const Eigen::VectorXd& h) const {
  return (x - W * h).squaredNorm() + lambda * h.lpNorm<1>();
}

Eigen::VectorXd sparse_infer(const SparseCoder& coder, const Eigen::VectorXd& x, int iters,
                             const Eigen::VectorXd* warm, std::vector<double>* trace) {
  coder.validate();
  if (x.size() != coder.W.rows()) throw ShapeError("sparse_infer", "x has the wrong length");
  const Eigen::MatrixXd G = coder.W.transpose() * coder.W;
  const Eigen::VectorXd Wx = coder.W.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G, Eigen::EigenvaluesOnly);
  const double L = 2.0 * std::max(es.eigenvalues().maxCoeff(), 1e-12);
  const double t = 1.0 / L, thresh = coder.lambda * t;
  Eigen::VectorXd h = warm ? *warm : Eigen::VectorXd::Zero(coder.W.cols());
  Eigen::VectorXd best = h;
  double best_obj = coder.objective(x, h);
  for (int it = 0; it < iters; ++it) {
    Eigen::VectorXd z = h - t * 2.0 * (G * h - Wx);
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      const double v = z(k);
      h(k) = v > thresh ? v - thresh : (v < -thresh ? v + thresh : 0.0);
    }
    const double obj = coder.objective(x, h);
    if (trace) trace->push_back(obj);
    if (obj <= best_obj) {
      best_obj = obj;
      best = h;
    }
  }
  return best;
}

SparseFit fit_sparse_coding(std::span<const Tensor> data, std::size_t d, double lambda,
                            const SparseTrainConfig& cfg, Rng& rng) {
  const Eigen::MatrixXd X = to_matrix(data).transpose();  // p x n
  const auto p = X.rows(), n = X.cols();
  const auto D = static_cast<Eigen::Index>(d);
  auto random_column = [&]() {
    for (int tries = 0; tries < 100; ++tries) {
      Eigen::VectorXd v = X.col(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
      if (v.norm() > 1e-12) return Eigen::VectorXd(v.normalized());
    }
    return Eigen::VectorXd(to_vec(rng.normal_tensor({static_cast<std::size_t>(p)})).normalized());
  };
  SparseFit fit;
  fit.coder.lambda = lambda;
  fit.coder.W.resize(p, D);
  // Seeding in the k-means++ manner: a data point is drawn with weight
  // 1 - max cos^2 against the columns chosen so far.
  Eigen::MatrixXd U = X;
  for (Eigen::Index i = 0; i < n; ++i)
    if (U.col(i).norm() > 1e-12) U.col(i).normalize();
  std::vector<double> weight(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) weight[static_cast<std::size_t>(i)] = U.col(i).norm() > 0.0 ? 1.0 : 0.0;
  for (Eigen::Index j = 0; j < D; ++j) {
    const double total = std::accumulate(weight.begin(), weight.end(), 0.0);
    if (total <= 1e-12) {
      fit.coder.W.col(j) = random_column();
      continue;
    }
    double u = rng.uniform() * total;
    Eigen::Index pick = 0;
    while (pick + 1 < n && (u -= weight[static_cast<std::size_t>(pick)]) > 0.0) ++pick;
    fit.coder.W.col(j) = U.col(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double c = U.col(i).dot(U.col(pick));
      weight[static_cast<std::size_t>(i)] = std::min(weight[static_cast<std::size_t>(i)], std::max(0.0, 1.0 - c * c));
    }
  }
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(D, n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const SparseCoder& coder = fit.coder;
#pragma omp parallel for schedule(static)
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd warm = H.col(i);
      H.col(i) = sparse_infer(coder, X.col(i), cfg.infer_iters, &warm);
    }
    for (Eigen::Index j = 0; j < D; ++j) {
      if (H.row(j).cwiseAbs().maxCoeff() == 0.0) {
        fit.coder.W.col(j) = random_column();
        ++fit.dead_resets;
      }
    }
    // Column-wise exact minimization over the unit sphere with codes fixed.
    Eigen::MatrixXd E = X - fit.coder.W * H;
    for (Eigen::Index j = 0; j < D; ++j) {
      const Eigen::RowVectorXd hj = H.row(j);
      if (hj.squaredNorm() == 0.0) continue;
      E += fit.coder.W.col(j) * hj;
      Eigen::VectorXd u = E * hj.transpose();
      if (u.norm() > 0.0) fit.coder.W.col(j) = u.normalized();
      E -= fit.coder.W.col(j) * hj;
    }
    fit.objective.push_back(E.squaredNorm() + lambda * H.cwiseAbs().sum());
  }
  fit.codes = std::move(H);
  return fit;
}

// --- ICA, NMF, masked MF -----------------------------------------------------

LinearVariant parse_linear_variant(const std::string& name) {
  if (name == "ica") return LinearVariant::kIca;
  if (name == "nmf") return LinearVariant::kNmf;
  if (name == "mf-masked") return LinearVariant::kMaskedMf;
  throw ConfigError("linear_variant", "unknown variant '" + name + "' (valid: ica, nmf, mf-masked)");
}

const char* linear_variant_name(LinearVariant v) {
  switch (v) {
    case LinearVariant::kIca: return "ica";
    case LinearVariant::kNmf: return "nmf";
    case LinearVariant::kMaskedMf: return "mf-masked";
  }
  return "?";
}

double ica_log_likelihood(const Eigen::MatrixXd& A, const Eigen::MatrixXd& X) {
  // X is p x n. Logistic density: log p(s) = -|s| - 2 log(1 + exp(-|s|)).
  const Eigen::MatrixXd S = A * X;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < S.size(); ++i) {
    const double a = std::abs(S.data()[i]);
    acc += -a - 2.0 * std::log1p(std::exp(-a));
  }
  return acc / static_cast<double>(X.cols()) + std::log(std::abs(A.determinant()));
}

IcaFit fit_ica(std::span<const Tensor> data, const IcaConfig& cfg) {
  const Eigen::MatrixXd X = to_matrix(data).transpose();
  const auto p = X.rows();
  const double n = static_cast<double>(X.cols());
  IcaFit fit;
  fit.A = Eigen::MatrixXd::Identity(p, p);
  double ll = ica_log_likelihood(fit.A, X);
  fit.log_likelihood.push_back(ll);
  double lr = cfg.lr;
  for (int it = 0; it < cfg.iters; ++it) {
    const Eigen::MatrixXd S = fit.A * X;
    const Eigen::MatrixXd psi = S.unaryExpr([](double s) { return -std::tanh(0.5 * s); });
    // Natural gradient of the mean log-likelihood.
    const Eigen::MatrixXd dir = (Eigen::MatrixXd::Identity(p, p) + psi * S.transpose() / n) * fit.A;
    bool moved = false;
    for (int tries = 0; tries < 40; ++tries) {
      Eigen::MatrixXd trial = fit.A + lr * dir;
      if (std::abs(trial.determinant()) >= 1e-12) {
        const double next = ica_log_likelihood(trial, X);
        if (next >= ll) {
          fit.A = std::move(trial);
          ll = next;
          moved = true;
          break;
        }
      }
      lr *= 0.5;
      ++fit.halvings;
    }
    fit.log_likelihood.push_back(ll);
    if (!moved) break;
  }
  return fit;
}

double amari_error(const Eigen::MatrixXd& P) {
  const Eigen::MatrixXd Q = P.cwiseAbs();
  const auto m = Q.rows();
  if (m < 2) return 0.0;
  double rows = 0.0, cols = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) rows += Q.row(i).sum() / Q.row(i).maxCoeff() - 1.0;
  for (Eigen::Index j = 0; j < m; ++j) cols += Q.col(j).sum() / Q.col(j).maxCoeff() - 1.0;
  return (rows + cols) / (2.0 * static_cast<double>(m) * static_cast<double>(m - 1));
}

Factorization fit_nmf(const Eigen::MatrixXd& X, const FactorizeConfig& cfg, Rng& rng) {
  if ((X.array() < 0.0).any()) throw ConfigError("nmf", "data must be nonnegative");
  if (!X.allFinite()) throw NumericError("nmf", "non-finite data");
  const auto r = static_cast<Eigen::Index>(cfg.rank);
  const double scale = std::sqrt(std::max(X.mean(), 1e-12) / static_cast<double>(r));
  Factorization f;
  f.W = Eigen::MatrixXd(X.rows(), r);
  f.H = Eigen::MatrixXd(r, X.cols());
  for (Eigen::Index i = 0; i < f.W.size(); ++i) f.W.data()[i] = scale * rng.uniform(0.1, 1.0);
  for (Eigen::Index i = 0; i < f.H.size(); ++i) f.H.data()[i] = scale * rng.uniform(0.1, 1.0);
  // Hierarchical ALS: each row of H and column of W is an exact nonnegative
  // block minimizer, so the objective cannot rise.
  for (int it = 0; it < cfg.iters; ++it) {
    const Eigen::MatrixXd A = f.W.transpose() * X, B = f.W.transpose() * f.W;
    for (Eigen::Index k = 0; k < r; ++k) {
      if (B(k, k) <= 0.0) continue;
      f.H.row(k) = (f.H.row(k) + (A.row(k) - B.row(k) * f.H) / B(k, k)).cwiseMax(0.0);
    }
    const Eigen::MatrixXd C = X * f.H.transpose(), D = f.H * f.H.transpose();
    for (Eigen::Index k = 0; k < r; ++k) {
      if (D(k, k) <= 0.0) continue;
      f.W.col(k) = (f.W.col(k) + (C.col(k) - f.W * D.col(k)) / D(k, k)).cwiseMax(0.0);
    }
    f.objective.push_back((X - f.W * f.H).squaredNorm());
  }
  return f;
}

Factorization fit_masked_mf(const Eigen::MatrixXd& X, const Eigen::MatrixXd& mask,
                            const FactorizeConfig& cfg, Rng& rng) {
  if (mask.rows() != X.rows() || mask.cols() != X.cols()) throw ShapeError("mf-masked", "mask shape differs from data");
  const auto r = static_cast<Eigen::Index>(cfg.rank);
  Factorization f;
  f.W = Eigen::MatrixXd(X.rows(), r);
  f.H = Eigen::MatrixXd(r, X.cols());
  for (Eigen::Index i = 0; i < f.W.size(); ++i) f.W.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < f.H.size(); ++i) f.H.data()[i] = rng.normal();
  auto masked_error = [&]() {
    return ((X - f.W * f.H).array() * (mask.array() != 0.0).cast<double>()).square().sum();
  };
  // Least-squares solve restricted to the observed entries of one line.
  auto solve = [r](const Eigen::MatrixXd& basis, const Eigen::VectorXd& target, const Eigen::VectorXd& m,
                   const Eigen::VectorXd& current) {
    std::vector<Eigen::Index> obs;
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (m(i) != 0.0) obs.push_back(i);
    if (obs.empty()) return current;
    Eigen::MatrixXd Bo(static_cast<Eigen::Index>(obs.size()), r);
    Eigen::VectorXd to(static_cast<Eigen::Index>(obs.size()));
    for (std::size_t k = 0; k < obs.size(); ++k) {
      Bo.row(static_cast<Eigen::Index>(k)) = basis.row(obs[k]);
      to(static_cast<Eigen::Index>(k)) = target(obs[k]);
    }
    return Eigen::VectorXd(Bo.completeOrthogonalDecomposition().solve(to));
  };
  for (int it = 0; it < cfg.iters; ++it) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) f.H.col(j) = solve(f.W, X.col(j), mask.col(j), f.H.col(j));
    const Eigen::MatrixXd Ht = f.H.transpose();
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      f.W.row(i) = solve(Ht, X.row(i).transpose(), mask.row(i).transpose(), f.W.row(i).transpose()).transpose();
    f.objective.push_back(masked_error());
  }
  return f;
}

// --- RBM -------------------------------------------------------------------

RbmModel RbmModel::zeros(std::size_t p, std::size_t d, RbmVisible visible) {
  RbmModel m;
  m.W = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(d));
  m.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  m.c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  m.visible = visible;
  return m;
}

void RbmModel::validate() const {
  if (b.size() != W.rows() || c.size() != W.cols()) throw ShapeError("rbm", "bias sizes do not match W");
  if (!W.allFinite() || !b.allFinite() || !c.allFinite()) throw NumericError("rbm", "non-finite weights");
  if (!(sigma2 > 0.0)) throw ConfigError("rbm", "sigma2 must be positive");
}

namespace {

double visible_scale(const RbmModel& m) { return m.visible == RbmVisible::kGaussian ? m.sigma2 : 1.0; }

void require_enumerable(const RbmModel& m, const char* op) {
  if (m.p() + m.d() > kRbmExactBound)
    throw SizeError(op, "exact RBM computations need p + d <= " + std::to_string(kRbmExactBound) + ", got " +
                            std::to_string(m.p() + m.d()));
}

Eigen::VectorXd bits(std::size_t code, std::size_t n) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) v(static_cast<Eigen::Index>(j)) = static_cast<double>((code >> j) & 1U);
  return v;
}

// Log-weight of a hidden configuration with the visibles summed or integrated out.
double hidden_log_weight(const RbmModel& m, const Eigen::VectorXd& h) {
  const Eigen::VectorXd a = m.W * h;
  if (m.visible == RbmVisible::kGaussian) {
    const double p = static_cast<double>(m.p());
    return m.c.dot(h) + 0.5 * p * std::log(2.0 * std::numbers::pi * m.sigma2) +
           ((m.b + a).squaredNorm() - m.b.squaredNorm()) / (2.0 * m.sigma2);
  }
  double acc = m.c.dot(h);
  for (Eigen::Index j = 0; j < a.size(); ++j) acc += softplus(m.b(j) + a(j));
  return acc;
}

}  // namespace

Eigen::VectorXd rbm_hidden_probs(const RbmModel& m, const Eigen::VectorXd& x) {
  if (x.size() != m.W.rows()) throw ShapeError("rbm", "visible vector has the wrong length");
  Eigen::VectorXd z = m.c + m.W.transpose() * x / visible_scale(m);
  return z.unaryExpr([](double v) { return sigmoid(v); });
}

Eigen::VectorXd rbm_visible_mean(const RbmModel& m, const Eigen::VectorXd& h) {
  if (h.size() != m.W.cols()) throw ShapeError("rbm", "hidden vector has the wrong length");
  Eigen::VectorXd z = m.b + m.W * h;
  if (m.visible == RbmVisible::kGaussian) return z;
  return z.unaryExpr([](double v) { return sigmoid(v); });
}

GibbsState rbm_gibbs_step(const RbmModel& m, const Eigen::VectorXd& x, Rng& rng) {
  GibbsState s;
  const Eigen::VectorXd q = rbm_hidden_probs(m, x);
  s.h = q.unaryExpr([&rng](double v) { return rng.uniform() < v ? 1.0 : 0.0; });
  const Eigen::VectorXd mu = rbm_visible_mean(m, s.h);
  if (m.visible == RbmVisible::kGaussian) {
    const double sd = std::sqrt(m.sigma2);
    s.x = mu.unaryExpr([&rng, sd](double v) { return v + sd * rng.normal(); });
  } else {
    s.x = mu.unaryExpr([&rng](double v) { return rng.uniform() < v ? 1.0 : 0.0; });
  }
  return s;
}

double rbm_log_joint(const RbmModel& m, const Eigen::VectorXd& x, const Eigen::VectorXd& h) {
  if (m.visible == RbmVisible::kGaussian)
    return -(x - m.b).squaredNorm() / (2.0 * m.sigma2) + m.c.dot(h) + x.dot(m.W * h) / m.sigma2;
  return x.dot(m.W * h) + m.b.dot(x) + m.c.dot(h);
}

double rbm_log_marginal_unnorm(const RbmModel& m, const Eigen::VectorXd& x) {
  const Eigen::VectorXd z = m.c + m.W.transpose() * x / visible_scale(m);
  double acc = m.visible == RbmVisible::kGaussian ? -(x - m.b).squaredNorm() / (2.0 * m.sigma2) : m.b.dot(x);
  for (Eigen::Index k = 0; k < z.size(); ++k) acc += softplus(z(k));
  return acc;
}

double rbm_exact_logz(const RbmModel& m) {
  m.validate();
  require_enumerable(m, "rbm_exact_logz");
  std::vector<double> terms;
  if (m.visible == RbmVisible::kGaussian || m.d() <= m.p()) {
    terms.resize(std::size_t{1} << m.d());
    for (std::size_t s = 0; s < terms.size(); ++s) terms[s] = hidden_log_weight(m, bits(s, m.d()));
  } else {
    terms.resize(std::size_t{1} << m.p());
    for (std::size_t s = 0; s < terms.size(); ++s) terms[s] = rbm_log_marginal_unnorm(m, bits(s, m.p()));
  }
  return log_sum_exp(terms);
}

double RbmGradient::dot(const RbmGradient& o) const {
  return (W.array() * o.W.array()).sum() + b.dot(o.b) + c.dot(o.c);
}

RbmGradient rbm_data_expectations(const RbmModel& m, const Eigen::MatrixXd& data) {
  if (data.cols() != m.W.rows()) throw ShapeError("rbm", "data rows have the wrong length");
  if (data.rows() == 0) throw ShapeError("rbm", "empty data");
  RbmGradient g{Eigen::MatrixXd::Zero(m.W.rows(), m.W.cols()), Eigen::VectorXd::Zero(m.b.size()),
                Eigen::VectorXd::Zero(m.c.size())};
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const Eigen::VectorXd x = data.row(i).transpose();
    const Eigen::VectorXd q = rbm_hidden_probs(m, x);
    g.W += x * q.transpose();
    g.b += x;
    g.c += q;
  }
  const double inv = 1.0 / static_cast<double>(data.rows());
  g.W *= inv;
  g.b *= inv;
  g.c *= inv;
  return g;
}

RbmGradient rbm_model_expectations(const RbmModel& m) {
  if (m.visible != RbmVisible::kBinary) throw ConfigError("rbm", "exact expectations need binary visibles");
  const double logz = rbm_exact_logz(m);
  RbmGradient g{Eigen::MatrixXd::Zero(m.W.rows(), m.W.cols()), Eigen::VectorXd::Zero(m.b.size()),
                Eigen::VectorXd::Zero(m.c.size())};
  if (m.d() <= m.p()) {
    for (std::size_t s = 0; s < (std::size_t{1} << m.d()); ++s) {
      const Eigen::VectorXd h = bits(s, m.d());
      const double w = std::exp(hidden_log_weight(m, h) - logz);
      const Eigen::VectorXd ex = rbm_visible_mean(m, h);
      g.W += w * ex * h.transpose();
      g.b += w * ex;
      g.c += w * h;
    }
  } else {
    for (std::size_t s = 0; s < (std::size_t{1} << m.p()); ++s) {
      const Eigen::VectorXd x = bits(s, m.p());
      const double w = std::exp(rbm_log_marginal_unnorm(m, x) - logz);
      const Eigen::VectorXd q = rbm_hidden_probs(m, x);
      g.W += w * x * q.transpose();
      g.b += w * x;
      g.c += w * q;
    }
  }
  return g;
}

RbmGradient rbm_exact_gradient(const RbmModel& m, const Eigen::MatrixXd& data) {
  RbmGradient g = rbm_data_expectations(m, data);
  const RbmGradient e = rbm_model_expectations(m);
  g.W -= e.W;
  g.b -= e.b;
  g.c -= e.c;
  return g;
}

RbmGradient rbm_cd_gradient(const RbmModel& m, const Eigen::MatrixXd& data, int k, Rng& rng) {
  if (k < 1) throw ConfigError("rbm", "CD needs k >= 1");
  RbmGradient g{Eigen::MatrixXd::Zero(m.W.rows(), m.W.cols()), Eigen::VectorXd::Zero(m.b.size()),
                Eigen::VectorXd::Zero(m.c.size())};
  const double s = visible_scale(m);
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const Eigen::VectorXd x0 = data.row(i).transpose();
    Eigen::VectorXd x = x0;
    for (int step = 0; step < k; ++step) x = rbm_gibbs_step(m, x, rng).x;
    const Eigen::VectorXd q0 = rbm_hidden_probs(m, x0), qk = rbm_hidden_probs(m, x);
    g.W += (x0 * q0.transpose() - x * qk.transpose()) / s;
    g.b += (x0 - x) / s;
    g.c += q0 - qk;
  }
  const double inv = 1.0 / static_cast<double>(data.rows());
  g.W *= inv;
  g.b *= inv;
  g.c *= inv;
  return g;
}

double rbm_log_likelihood(const RbmModel& m, const Eigen::MatrixXd& data) {
  const double logz = rbm_exact_logz(m);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < data.rows(); ++i) acc += rbm_log_marginal_unnorm(m, data.row(i).transpose());
  return acc / static_cast<double>(data.rows()) - logz;
}

RbmFit fit_rbm(const Eigen::MatrixXd& data, RbmModel init, const RbmFitConfig& cfg, Rng& rng) {
  init.validate();
  RbmFit fit;
  fit.model = std::move(init);
  // Exact mode only needs the distinct rows with their weights.
  Eigen::MatrixXd rows = data;
  std::vector<double> weights(static_cast<std::size_t>(data.rows()), 1.0);
  if (cfg.method == RbmFitMethod::kExact) {
    require_enumerable(fit.model, "fit_rbm");
    std::map<std::vector<double>, double> counts;
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
      std::vector<double> key(static_cast<std::size_t>(data.cols()));
      for (Eigen::Index j = 0; j < data.cols(); ++j) key[static_cast<std::size_t>(j)] = data(i, j);
      counts[key] += 1.0;
    }
    rows.resize(static_cast<Eigen::Index>(counts.size()), data.cols());
    weights.clear();
    Eigen::Index r = 0;
    for (const auto& [key, w] : counts) {
      for (Eigen::Index j = 0; j < data.cols(); ++j) rows(r, j) = key[static_cast<std::size_t>(j)];
      weights.push_back(w / static_cast<double>(data.rows()));
      ++r;
    }
  }
  for (int it = 0; it < cfg.iters; ++it) {
    RbmGradient g;
    if (cfg.method == RbmFitMethod::kExact) {
      g = RbmGradient{Eigen::MatrixXd::Zero(fit.model.W.rows(), fit.model.W.cols()),
                      Eigen::VectorXd::Zero(fit.model.b.size()), Eigen::VectorXd::Zero(fit.model.c.size())};
      for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        const Eigen::VectorXd x = rows.row(i).transpose();
        const Eigen::VectorXd q = rbm_hidden_probs(fit.model, x);
        const double w = weights[static_cast<std::size_t>(i)];
        g.W += w * x * q.transpose();
        g.b += w * x;
        g.c += w * q;
      }
      const RbmGradient e = rbm_model_expectations(fit.model);
      g.W -= e.W;
      g.b -= e.b;
      g.c -= e.c;
    } else {
      g = rbm_cd_gradient(fit.model, rows, cfg.k, rng);
    }
    const double gmax = std::max({g.W.cwiseAbs().maxCoeff(), g.b.cwiseAbs().maxCoeff(),
                                  g.c.size() ? g.c.cwiseAbs().maxCoeff() : 0.0});
    fit.grad_norm.push_back(g.norm());
    fit.iterations = it;
    if (cfg.method == RbmFitMethod::kExact && gmax < cfg.tolerance) break;
    fit.model.W += cfg.lr * g.W;
    fit.model.b += cfg.lr * g.b;
    fit.model.c += cfg.lr * g.c;
    fit.iterations = it + 1;
  }
  fit.model.validate();
  return fit;
}

// --- deep generator ----------------------------------------------------------

GeneratorModel linear_generator(const Eigen::MatrixXd& W, double sigma2) {
  Rng rng(0);
  const auto p = static_cast<std::size_t>(W.rows()), d = static_cast<std::size_t>(W.cols());
  Network net = make_mlp({d, {}, p}, rng);
  Tensor w({p, d});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < d; ++j) w.at({i, j}) = W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  net.params()[0] = w;
  net.params()[1] = Tensor({p});
  return {std::move(net), {d}, sigma2, true};
}

GeneratorModel mlp_generator(std::size_t d, std::vector<std::size_t> hidden, std::size_t p, Rng& rng,
                             double sigma2, Activation act) {
  return {make_mlp({d, std::move(hidden), p, act, Activation::kIdentity}, rng), {d}, sigma2, true};
}

GeneratorModel conv_generator(const ConvGeneratorSpec& spec, Rng& rng, double sigma2) {
  return {make_conv_generator(spec, rng), {spec.latent_side * spec.latent_side}, sigma2, false};
}

namespace {

void check_latent(const GeneratorModel& gen, const Tensor& h, const char* op) {
  if (h.shape() != gen.latent_shape)
    throw ShapeError(op, "latent has shape " + shape_string(h.shape()) + ", expected " +
                             shape_string(gen.latent_shape));
}

}  // namespace

Tensor generator_decode(const GeneratorModel& gen, const Tensor& h) {
  check_latent(gen, h, "generator_decode");
  return gen.decoder.forward(h);
}

Tensor generator_decode(const GeneratorModel& gen, const Tensor& h, Rng& rng) {
  Tensor x = generator_decode(gen, h);
  x += rng.normal_tensor(x.shape(), std::sqrt(gen.sigma2));
  return x;
}

EnergyGrad latent_energy(const GeneratorModel& gen, const Tensor& x, const Tensor& h) {
  check_latent(gen, h, "latent_energy");
  const double inv = 1.0 / gen.sigma2;
  double rss = 0.0;
  auto b = gen.decoder.backward_with(h, [&](const Tensor& out) {
    if (out.shape() != x.shape())
      throw ShapeError("latent_energy", "x has shape " + shape_string(x.shape()) + ", decoder gives " +
                                            shape_string(out.shape()));
    Tensor r = out - x;
    rss = r.squared_norm();
    return inv * r;
  });
  return {0.5 * inv * rss + 0.5 * h.squared_norm(), b.grad_input + h};
}

Tensor infer_latent(const GeneratorModel& gen, const Tensor& x, const LangevinConfig& lang, Rng& rng,
                    const std::optional<Tensor>& init, std::size_t* resets) {
  lang.validate();
  const EnergyFn fn = [&](const Tensor& h) { return latent_energy(gen, x, h); };
  ChainState state = init_chain(init ? *init : rng.normal_tensor(gen.latent_shape), fn);
  for (int step = 0; step < lang.steps; ++step) {
    state = langevin_step(std::move(state), fn, lang, rng);
    if (state.diverged) {
      if (resets) ++*resets;
      state = init_chain(rng.normal_tensor(gen.latent_shape), fn);
    }
  }
  return state.point;
}

std::size_t infer_latents(const GeneratorModel& gen, std::span<const Tensor> data, std::vector<Tensor>& latents,
                          const LangevinConfig& lang, const Rng& rng, bool batched) {
  if (latents.size() != data.size()) throw ShapeError("infer_latents", "one latent per example required");
  if (data.empty()) return 0;
  std::size_t resets = 0;
  if (batched) {
    if (!gen.batchable) throw ConfigError("infer_latents", "decoder does not accept batches");
    const Tensor X = stack(data);
    const double inv = 1.0 / gen.sigma2;
    BatchEnergyFn fn = [&](const Tensor& H, std::vector<double>& energies, Tensor& grads) {
      const std::size_t n = H.extent(0);
      std::vector<double> rss(n, 0.0);
      auto b = gen.decoder.backward_with(H, [&](const Tensor& out) {
        if (out.shape() != X.shape()) throw ShapeError("infer_latents", "decoder output does not match data");
        Tensor r = out - X;
        const std::size_t p = out.size() / n;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j) rss[i] += r[i * p + j] * r[i * p + j];
        return inv * r;
      });
      const std::size_t d = H.size() / n;
      energies.assign(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double hh = 0.0;
        for (std::size_t j = 0; j < d; ++j) hh += H[i * d + j] * H[i * d + j];
        energies[i] = 0.5 * inv * rss[i] + 0.5 * hh;
      }
      grads = b.grad_input + H;
    };
    auto out = run_chains_batched(stack(latents), fn, lang, rng);
    auto rows = unstack(out.points);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (out.diverged[i]) {
        ++resets;
        Rng r = rng.split("reset").split(i);
        latents[i] = r.normal_tensor(gen.latent_shape);
      } else {
        latents[i] = std::move(rows[i]);
      }
    }
    return resets;
  }
  std::vector<std::size_t> counts(data.size(), 0);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng r = rng.split(i);
    latents[i] = infer_latent(gen, data[i], lang, r, latents[i], &counts[i]);
  }
  for (auto c : counts) resets += c;
  return resets;
}

std::vector<Tensor> decoder_loss_grads(const GeneratorModel& gen, std::span<const Tensor> data,
                                       std::span<const Tensor> latents, bool batched) {
  if (data.empty() || data.size() != latents.size()) throw ShapeError("decoder_loss_grads", "need matching data and latents");
  const double scale = 1.0 / (gen.sigma2 * static_cast<double>(data.size()));
  if (batched) {
    if (!gen.batchable) throw ConfigError("decoder_loss_grads", "decoder does not accept batches");
    const Tensor X = stack(data);
    auto b = gen.decoder.backward_with(stack(latents), [&](const Tensor& out) { return scale * (out - X); });
    return std::move(b.grad_params);
  }
  std::vector<std::vector<Tensor>> per(data.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto b = gen.decoder.backward_with(latents[i], [&](const Tensor& out) { return scale * (out - data[i]); });
    per[i] = std::move(b.grad_params);
  }
  auto acc = gen.decoder.zero_like_params();
  for (const auto& g : per)
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
  return acc;
}

double reconstruction_error(const GeneratorModel& gen, std::span<const Tensor> data, std::span<const Tensor> latents) {
  if (data.empty() || data.size() != latents.size()) throw ShapeError("reconstruction_error", "need matching data and latents");
  std::vector<double> errs(data.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < data.size(); ++i)
    errs[i] = (generator_decode(gen, latents[i]) - data[i]).squared_norm() / static_cast<double>(data[i].size());
  return compensated_sum(errs) / static_cast<double>(data.size());
}

std::vector<AbpEpoch> fit_generator_abp(GeneratorModel& gen, std::span<const Tensor> data,
                                        std::vector<Tensor>& latents, const LangevinConfig& lang,
                                        const AbpConfig& cfg, Rng& rng,
                                        const std::function<void(const AbpEpoch&)>& on_epoch) {
  if (data.empty()) throw ShapeError("fit_generator_abp", "empty data");
  if (latents.size() != data.size()) {
    latents.clear();
    for (std::size_t i = 0; i < data.size(); ++i) latents.push_back(rng.normal_tensor(gen.latent_shape));
  }
  const bool batched = cfg.batched && gen.batchable;
  const std::size_t n = data.size();
  const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  Optimizer opt(cfg.optimizer);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<AbpEpoch> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    AbpEpoch row;
    row.epoch = epoch;
    Rng ep = rng.split(static_cast<std::uint64_t>(epoch));
    if (cfg.cold_restart_every > 0 && epoch > 0 && epoch % cfg.cold_restart_every == 0) {
      Rng cold = ep.split("cold");
      for (auto& h : latents) h = cold.normal_tensor(gen.latent_shape);
      row.cold_restart = true;
    }
    if (bs < n) {
      Rng sh = ep.split("shuffle");
      shuffle_indices(order, sh);
    }
    for (std::size_t start = 0, chunk = 0; start < n; start += bs, ++chunk) {
      const std::size_t stop = std::min(n, start + bs);
      std::vector<Tensor> xb, hb;
      for (std::size_t k = start; k < stop; ++k) {
        xb.push_back(data[order[k]]);
        hb.push_back(latents[order[k]]);
      }
      row.resets += infer_latents(gen, xb, hb, lang, ep.split(chunk), batched);
      for (std::size_t k = start; k < stop; ++k) latents[order[k]] = hb[k - start];
      auto grads = decoder_loss_grads(gen, xb, hb, batched);
      for (const auto& g : grads) g.require_finite("fit_generator_abp");
      opt.step(gen.decoder.params(), grads, cfg.lr);
    }
    row.recon_error = reconstruction_error(gen, data, latents);
    double norms = 0.0;
    for (const auto& h : latents) norms += std::sqrt(h.squared_norm());
    row.latent_norm = norms / static_cast<double>(n);
    if (on_epoch) on_epoch(row);
    log.push_back(row);
  }
  return log;
}

}  // namespace modelzoo
