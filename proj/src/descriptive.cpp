#include "modelzoo/descriptive.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "modelzoo/error.hpp"
#include "modelzoo/kernels.hpp"

namespace modelzoo {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_nonempty(std::span<const Tensor> data, const char* context) {
  if (data.empty()) throw ShapeError(context, "data must be nonempty");
  for (const auto& x : data)
    if (x.shape() != data[0].shape()) throw ShapeError(context, "data shapes differ");
}

// Conv response of a single-channel image with a [k, k] filter, same padding.
Tensor filter_response(const Tensor& image, const Tensor& filter) {
  const std::size_t k = filter.extent(0);
  return conv2d(image, filter.reshaped({k, k, 1, 1}), 1, Padding::kSame);
}

}  // namespace

const char* feature_kind_name(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::kRawMoments: return "raw-moments";
    case FeatureKind::kProjectionMarginals: return "projection-marginals";
    case FeatureKind::kFilterHistograms: return "filter-histograms";
    case FeatureKind::kCustom: return "custom";
  }
  return "?";
}

double SoftBins::weight(std::size_t b, double v) const {
  return std::max(0.0, 1.0 - std::abs(v - center(b)) / width());
}

double SoftBins::weight_derivative(std::size_t b, double v) const {
  const double d = v - center(b);
  if (std::abs(d) >= width()) return 0.0;
  if (d == 0.0) return 0.0;
  return d > 0.0 ? -1.0 / width() : 1.0 / width();
}

FeatureMap FeatureMap::raw_moments(std::size_t input_dim, int order, bool pin_constant) {
  if (order < 1) throw ConfigError("descriptive", "moment order must be at least 1");
  FeatureMap m;
  m.kind_ = FeatureKind::kRawMoments;
  const std::size_t off = pin_constant ? 1 : 0;
  m.dim_ = off + input_dim * static_cast<std::size_t>(order);
  m.eval_ = [input_dim, order, off, dim = m.dim_](const Tensor& x) {
    if (x.size() != input_dim) throw ShapeError("feature_map", "raw-moment input size mismatch");
    Tensor h({dim});
    if (off) h[0] = 1.0;
    for (int o = 1; o <= order; ++o)
      for (std::size_t j = 0; j < input_dim; ++j)
        h[off + static_cast<std::size_t>(o - 1) * input_dim + j] = std::pow(x[j], o);
    return h;
  };
  m.vjp_ = [input_dim, order, off](const Tensor& x, const Tensor& theta) {
    Tensor g(x.shape());
    for (int o = 1; o <= order; ++o)
      for (std::size_t j = 0; j < input_dim; ++j)
        g[j] += theta[off + static_cast<std::size_t>(o - 1) * input_dim + j] * o * std::pow(x[j], o - 1);
    return g;
  };
  return m;
}

FeatureMap FeatureMap::projection_marginals(std::vector<Tensor> rows, SoftBins bins) {
  if (bins.bins < 2 || !(bins.hi > bins.lo)) throw ConfigError("descriptive", "soft bins need >= 2 bins and hi > lo");
  FeatureMap m;
  m.kind_ = FeatureKind::kProjectionMarginals;
  m.rows_ = std::move(rows);
  m.bins_ = bins;
  m.dim_ = m.rows_.size() * bins.bins;
  const auto rows_copy = m.rows_;
  m.eval_ = [rows_copy, bins, dim = m.dim_](const Tensor& x) {
    Tensor h({std::max<std::size_t>(dim, 1)});
    for (std::size_t r = 0; r < rows_copy.size(); ++r) {
      const double v = rows_copy[r].dot(x);
      for (std::size_t b = 0; b < bins.bins; ++b) h[r * bins.bins + b] = bins.weight(b, v);
    }
    return h;
  };
  m.vjp_ = [rows_copy, bins](const Tensor& x, const Tensor& theta) {
    Tensor g(x.shape());
    for (std::size_t r = 0; r < rows_copy.size(); ++r) {
      const double v = rows_copy[r].dot(x);
      double c = 0.0;
      for (std::size_t b = 0; b < bins.bins; ++b) c += theta[r * bins.bins + b] * bins.weight_derivative(b, v);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += c * rows_copy[r][j];
    }
    return g;
  };
  return m;
}

FeatureMap FeatureMap::filter_histograms(std::vector<Tensor> filters, SoftBins bins) {
  if (bins.bins < 2 || !(bins.hi > bins.lo)) throw ConfigError("descriptive", "soft bins need >= 2 bins and hi > lo");
  for (const auto& f : filters)
    if (f.rank() != 2 || f.extent(0) != f.extent(1)) throw ShapeError("feature_map", "filters must be square [k, k]");
  FeatureMap m;
  m.kind_ = FeatureKind::kFilterHistograms;
  m.rows_ = filters;
  m.bins_ = bins;
  m.dim_ = filters.size() * bins.bins;
  m.eval_ = [filters, bins, dim = m.dim_](const Tensor& x) {
    if (x.rank() != 3 || x.extent(2) != 1) throw ShapeError("feature_map", "filter histograms need [H, W, 1] images");
    Tensor h({dim});
    const double inv = 1.0 / static_cast<double>(x.extent(0) * x.extent(1));
    for (std::size_t f = 0; f < filters.size(); ++f) {
      Tensor r = filter_response(x, filters[f]);
      for (double v : r.values())
        for (std::size_t b = 0; b < bins.bins; ++b) h[f * bins.bins + b] += inv * bins.weight(b, v);
    }
    return h;
  };
  m.vjp_ = [filters, bins](const Tensor& x, const Tensor& theta) {
    Tensor g(x.shape());
    const double inv = 1.0 / static_cast<double>(x.extent(0) * x.extent(1));
    for (std::size_t f = 0; f < filters.size(); ++f) {
      const std::size_t k = filters[f].extent(0);
      Tensor kern = filters[f].reshaped({k, k, 1, 1});
      Tensor r = conv2d(x, kern, 1, Padding::kSame);
      Tensor dr(r.shape());
      for (std::size_t i = 0; i < r.size(); ++i) {
        double c = 0.0;
        for (std::size_t b = 0; b < bins.bins; ++b) c += theta[f * bins.bins + b] * bins.weight_derivative(b, r[i]);
        dr[i] = inv * c;
      }
      g += conv2d_backward(x, kern, dr, 1, Padding::kSame, true).input;
    }
    return g;
  };
  return m;
}

FeatureMap FeatureMap::custom(std::size_t dim, EvalFn eval, VjpFn vjp) {
  if (!eval) throw ConfigError("descriptive", "custom feature map needs an evaluator");
  FeatureMap m;
  m.kind_ = FeatureKind::kCustom;
  m.dim_ = dim;
  m.eval_ = std::move(eval);
  m.vjp_ = std::move(vjp);
  return m;
}

Tensor FeatureMap::operator()(const Tensor& x) const {
  if (dim_ == 0) return Tensor({1});
  Tensor h = eval_(x);
  if (h.size() != dim_) throw ShapeError("feature_map", "feature map returned " + std::to_string(h.size()) +
                                                            " values, expected " + std::to_string(dim_));
  return h;
}

Tensor FeatureMap::vjp(const Tensor& x, const Tensor& theta) const {
  if (dim_ == 0) return Tensor(x.shape());
  if (!vjp_) throw ConfigError("feature_map", std::string(feature_kind_name(kind_)) + " map is not differentiable");
  return vjp_(x, theta);
}

FeatureMap FeatureMap::with_row(Tensor row) const {
  if (kind_ != FeatureKind::kProjectionMarginals) throw ConfigError("feature_map", "only projection maps grow rows");
  auto rows = rows_;
  rows.push_back(std::move(row));
  return projection_marginals(std::move(rows), bins_);
}

Tensor feature_stats(std::span<const Tensor> data, const FeatureMap& map) {
  require_nonempty(data, "feature_stats");
  std::vector<std::vector<double>> cols(std::max<std::size_t>(map.dim(), 1));
  for (const auto& x : data) {
    Tensor h = map(x);
    for (std::size_t k = 0; k < h.size(); ++k) cols[k].push_back(h[k]);
  }
  Tensor mean({cols.size()});
  for (std::size_t k = 0; k < cols.size(); ++k)
    mean[k] = compensated_sum(cols[k]) / static_cast<double>(data.size());
  mean.require_finite("feature_stats");
  return mean;
}

// --- linear descriptive model ----------------------------------------------

double Reference::log_density(const Tensor& x) const {
  switch (kind) {
    case Kind::kGaussian: return -x.squared_norm() / (2.0 * sigma2);
    case Kind::kUniform:
      for (double v : x.values())
        if (v < lo || v > hi) return kNegInf;
      return 0.0;
    case Kind::kTable: throw ConfigError("reference", "table reference is only defined on its domain");
  }
  return 0.0;
}

Tensor Reference::grad_log_density(const Tensor& x) const {
  if (kind == Kind::kGaussian) return (-1.0 / sigma2) * x;
  if (kind == Kind::kUniform) return Tensor(x.shape());
  throw ConfigError("reference", "table reference has no gradient");
}

std::vector<double> Reference::tabulate(const Domain& domain) const {
  if (kind == Kind::kTable) {
    if (log_table.size() != domain.size()) throw ShapeError("reference", "table size does not match domain");
    return log_table;
  }
  return domain.tabulate([this](const Tensor& x) { return log_density(x); });
}

double LinearDescriptiveModel::unnormalized_log_density(const Tensor& x) const {
  return map(x).dot(theta) + reference.log_density(x);
}

EnergyGrad LinearDescriptiveModel::energy(const Tensor& x) const {
  EnergyGrad eg;
  eg.energy = -unnormalized_log_density(x);
  eg.grad = map.vjp(x, theta);
  eg.grad += reference.grad_log_density(x);
  eg.grad *= -1.0;
  return eg;
}

std::vector<double> feature_table(const FeatureMap& map, const Domain& domain) {
  const std::size_t d = map.dim();
  std::vector<double> table(domain.size() * d);
  for (std::size_t s = 0; s < domain.size(); ++s) {
    Tensor h = map(domain.state(s));
    std::copy(h.storage().begin(), h.storage().end(), table.begin() + static_cast<std::ptrdiff_t>(s * d));
  }
  return table;
}

namespace {

std::vector<double> tilted_table(const Tensor& theta, std::span<const double> h_table,
                                 std::span<const double> log_p0) {
  const std::size_t d = theta.size();
  std::vector<double> lp(log_p0.size());
  for (std::size_t s = 0; s < lp.size(); ++s) {
    if (log_p0[s] == kNegInf) {
      lp[s] = kNegInf;
      continue;
    }
    double a = log_p0[s];
    for (std::size_t k = 0; k < d; ++k) a += theta[k] * h_table[s * d + k];
    lp[s] = a;
  }
  return lp;
}

struct MomentInfo {
  double log_z = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

MomentInfo moments_with_cov(const Tensor& theta, std::span<const double> h_table,
                            std::span<const double> log_p0, const Domain& domain, bool want_cov) {
  const std::size_t d = theta.size();
  auto lp = tilted_table(theta, h_table, log_p0);
  MomentInfo m;
  m.log_z = brute_force_logz(lp, domain);
  if (!std::isfinite(m.log_z)) throw NumericError("fit_linear_exact", "log Z is not finite");
  std::vector<double> w(lp.size());
  for (std::size_t s = 0; s < lp.size(); ++s) w[s] = std::exp(lp[s] + domain.log_weight(s) - m.log_z);
  std::vector<double> col(lp.size());
  m.mean.resize(static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t s = 0; s < lp.size(); ++s) col[s] = w[s] * h_table[s * d + k];
    m.mean(static_cast<Eigen::Index>(k)) = compensated_sum(col);
  }
  if (want_cov) {
    m.cov.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) {
        const double ma = m.mean(static_cast<Eigen::Index>(a)), mb = m.mean(static_cast<Eigen::Index>(b));
        for (std::size_t s = 0; s < lp.size(); ++s)
          col[s] = w[s] * (h_table[s * d + a] - ma) * (h_table[s * d + b] - mb);
        const double c = compensated_sum(col);
        m.cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = c;
        m.cov(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = c;
      }
  }
  return m;
}

}  // namespace

Tensor exact_moments(const Tensor& theta, std::span<const double> h_table,
                     std::span<const double> log_p0, const Domain& domain) {
  auto m = moments_with_cov(theta, h_table, log_p0, domain, false);
  return Tensor::vector(std::vector<double>(m.mean.data(), m.mean.data() + m.mean.size()));
}

double exact_log_z(const Tensor& theta, std::span<const double> h_table,
                   std::span<const double> log_p0, const Domain& domain) {
  return brute_force_logz(tilted_table(theta, h_table, log_p0), domain);
}

ExactFit fit_linear_exact_moments(const Tensor& hbar, const FeatureMap& map, const Domain& domain,
                                  const Reference& reference, const ExactFitConfig& cfg) {
  const std::size_t d = map.dim();
  if (hbar.size() != d) throw ShapeError("fit_linear_exact", "moment vector size does not match feature map");
  hbar.require_finite("fit_linear_exact");
  const auto h_table = feature_table(map, domain);
  const auto log_p0 = reference.tabulate(domain);

  // Coordinate-wise feasibility: hbar_k must sit strictly inside the range of
  // h_k over states carrying reference mass, unless h_k is constant there.
  for (std::size_t k = 0; k < d; ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t s = 0; s < domain.size(); ++s) {
      if (log_p0[s] == kNegInf) continue;
      lo = std::min(lo, h_table[s * d + k]);
      hi = std::max(hi, h_table[s * d + k]);
    }
    const double scale = std::max({1.0, std::abs(lo), std::abs(hi)});
    const double slack = 1e-12 * scale;
    if (hi - lo <= slack) {
      if (std::abs(hbar[k] - lo) > 1e-9 * scale)
        throw InfeasibleError("fit_linear_exact", "feature " + std::to_string(k) + " is constant on the domain but the target differs", k);
      continue;
    }
    if (hbar[k] <= lo + slack || hbar[k] >= hi - slack)
      throw InfeasibleError("fit_linear_exact",
                            "target moment of feature " + std::to_string(k) + " lies on the boundary of its range [" +
                                std::to_string(lo) + ", " + std::to_string(hi) + "]",
                            k);
  }

  ExactFit fit;
  Tensor theta({d});
  const Eigen::Map<const Eigen::VectorXd> target(hbar.data(), static_cast<Eigen::Index>(d));
  auto objective = [&](const Tensor& th, const MomentInfo& m) {
    return th.dot(hbar) - m.log_z;
  };
  MomentInfo cur = moments_with_cov(theta, h_table, log_p0, domain, cfg.newton);
  double value = objective(theta, cur);
  fit.log_likelihood.push_back(value);
  for (int it = 0; it < cfg.max_iters; ++it) {
    Eigen::VectorXd g = target - cur.mean;
    if (g.lpNorm<Eigen::Infinity>() < cfg.tolerance) break;
    Eigen::VectorXd dir = g;
    if (cfg.newton) {
      Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(cur.cov);
      cod.setThreshold(1e-13);
      dir = cod.solve(g);
      if (!dir.allFinite() || dir.dot(g) <= 0.0) dir = g;
    }
    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      Tensor trial = theta;
      for (std::size_t k = 0; k < d; ++k) trial[k] += step * dir(static_cast<Eigen::Index>(k));
      MomentInfo next;
      try {
        next = moments_with_cov(trial, h_table, log_p0, domain, cfg.newton);
      } catch (const NumericError&) {
        step *= 0.5;
        continue;
      }
      const double v = objective(trial, next);
      // Near the optimum the Armijo gain drops below the rounding of log Z;
      // a step that shrinks the moment gap without a visible loss is taken.
      const double noise = 1e-13 * std::max(1.0, std::abs(value));
      const bool armijo = v >= value + 1e-4 * step * g.dot(dir);
      const bool flat = v >= value - noise &&
                        (target - next.mean).lpNorm<Eigen::Infinity>() < g.lpNorm<Eigen::Infinity>();
      if (armijo || flat) {
        theta = std::move(trial);
        cur = std::move(next);
        value = v;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    fit.iterations = it + 1;
    fit.log_likelihood.push_back(value);
    if (!moved) break;
  }
  fit.moment_gap = (target - cur.mean).lpNorm<Eigen::Infinity>();
  fit.model.theta = theta;
  fit.model.map = map;
  fit.model.reference = reference;
  fit.model.log_z = cur.log_z;
  return fit;
}

ExactFit fit_linear_exact(std::span<const Tensor> data, const FeatureMap& map, const Domain& domain,
                          const Reference& reference, const ExactFitConfig& cfg) {
  return fit_linear_exact_moments(feature_stats(data, map), map, domain, reference, cfg);
}

std::vector<double> model_log_table(const LinearDescriptiveModel& model, const Domain& domain) {
  const auto h = feature_table(model.map, domain);
  return tilted_table(model.theta, h, model.reference.tabulate(domain));
}

LangevinFit fit_linear_langevin(std::span<const Tensor> data, const FeatureMap& map,
                                const Reference& reference, const LangevinConfig& lang,
                                const LangevinFitConfig& cfg, Rng& rng) {
  require_nonempty(data, "fit_linear_langevin");
  if (!map.differentiable()) throw ConfigError("fit_linear_langevin", "feature map must be differentiable");
  if (reference.kind != Reference::Kind::kGaussian)
    throw ConfigError("fit_linear_langevin", "Langevin fitting needs a Gaussian reference");
  lang.validate();
  const Tensor hbar = feature_stats(data, map);
  LangevinFit out;
  out.model.theta = Tensor({map.dim()});
  out.model.map = map;
  out.model.reference = reference;

  ChainPool pool(InitMode::kPersistent, data[0].shape(), reference.sigma2);
  Tensor avg({map.dim()});
  int averaged = 0;
  const int tail_start = static_cast<int>(std::floor((1.0 - cfg.average_tail) * cfg.epochs));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.split(static_cast<std::uint64_t>(epoch));
    const auto& model = out.model;
    EnergyFn energy = [&model](const Tensor& x) { return model.energy(x); };
    std::vector<Tensor> inits = pool.draw(cfg.chains, {}, erng);
    auto chains = run_chains(inits, energy, lang, erng.split("chains"));
    bool diverged = std::any_of(chains.begin(), chains.end(), [](const ChainState& c) { return c.diverged; });
    if (diverged) {
      ++out.retries;
      inits = pool.cold(cfg.chains, erng);
      chains = run_chains(inits, energy, lang, erng.split("retry"));
      if (std::any_of(chains.begin(), chains.end(), [](const ChainState& c) { return c.diverged; }))
        throw NumericError("fit_linear_langevin", "chains diverged twice in epoch " + std::to_string(epoch));
    }
    std::vector<Tensor> synth;
    synth.reserve(chains.size());
    for (auto& c : chains) synth.push_back(std::move(c.point));
    Tensor diff = hbar - feature_stats(synth, map);
    pool.store(std::move(synth));
    out.discrepancy.push_back(std::sqrt(diff.squared_norm()));
    const double eta = log_decay_rate(cfg.lr, epoch, cfg.decay_every);
    out.model.theta += eta * diff;
    if (epoch >= tail_start) {
      avg += out.model.theta;
      ++averaged;
    }
  }
  if (averaged > 0) out.model.theta = (1.0 / averaged) * avg;
  return out;
}

// --- projection pursuit -----------------------------------------------------

double projection_discrepancy(std::span<const Tensor> data, std::span<const Tensor> synth,
                              const Tensor& direction, std::size_t bins) {
  if (data.empty() || synth.empty()) throw ShapeError("pursue_projection", "point sets must be nonempty");
  std::vector<double> a, b;
  for (const auto& x : data) a.push_back(direction.dot(x));
  for (const auto& x : synth) b.push_back(direction.dot(x));
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  const double lo = std::min(*amin, *bmin), hi = std::max(*amax, *bmax);
  if (!(hi > lo)) return 0.0;
  auto hist = [&](const std::vector<double>& v) {
    std::vector<double> h(bins, 0.0);
    for (double x : v) {
      auto k = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
      h[std::min(k, bins - 1)] += 1.0 / static_cast<double>(v.size());
    }
    return h;
  };
  auto ha = hist(a), hb = hist(b);
  double l1 = 0.0;
  for (std::size_t k = 0; k < bins; ++k) l1 += std::abs(ha[k] - hb[k]);
  return l1;
}

PursuitResult pursue_projection(std::span<const Tensor> data, std::span<const Tensor> synth,
                                std::span<const Tensor> candidates, std::size_t bins) {
  if (candidates.empty()) throw ConfigError("pursue_projection", "no candidate directions");
  if (data.empty() || synth.empty()) throw ShapeError("pursue_projection", "point sets must be nonempty");
  if (data[0].size() < 2) throw ShapeError("pursue_projection", "dimension must be at least 2");
  PursuitResult r;
  for (const auto& c : candidates) r.discrepancy.push_back(projection_discrepancy(data, synth, c, bins));
  r.best = static_cast<std::size_t>(std::max_element(r.discrepancy.begin(), r.discrepancy.end()) - r.discrepancy.begin());
  r.converged = r.discrepancy[r.best] <= 1e-12;
  return r;
}

std::vector<Tensor> planar_directions(std::size_t count) {
  std::vector<Tensor> out;
  const double pi = std::acos(-1.0);
  for (std::size_t i = 0; i < count; ++i) {
    const double a = pi * static_cast<double>(i) / static_cast<double>(count);
    out.push_back(Tensor::vector({std::cos(a), std::sin(a)}));
  }
  return out;
}

std::vector<std::size_t> sample_table(std::span<const double> log_mass, std::size_t n, Rng& rng) {
  std::vector<double> cdf(log_mass.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < cdf.size(); ++i) {
    acc += std::exp(log_mass[i]);
    cdf[i] = acc;
  }
  std::vector<std::size_t> out(n);
  for (auto& o : out) {
    const double u = rng.uniform() * acc;
    o = std::min<std::size_t>(static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()),
                              cdf.size() - 1);
  }
  return out;
}

std::vector<PursuitRound> sequential_pursuit(std::span<const Tensor> data, const Domain& domain,
                                             std::span<const Tensor> candidates, std::size_t rounds,
                                             SoftBins bins, std::size_t synth_count, Rng& rng) {
  require_nonempty(data, "sequential_pursuit");
  const Reference ref = Reference::gaussian(1.0);
  FeatureMap map = FeatureMap::projection_marginals({}, bins);
  LinearDescriptiveModel model{Tensor({1}), map, ref, std::nullopt};
  std::vector<double> log_table = ref.tabulate(domain);
  std::vector<PursuitRound> out;
  for (std::size_t r = 0; r < rounds; ++r) {
    auto mass = normalized_log_mass(log_table, domain);
    Rng rr = rng.split(r);
    std::vector<Tensor> synth;
    for (auto s : sample_table(mass, synth_count, rr)) synth.push_back(domain.state(s));
    auto res = pursue_projection(data, synth, candidates, bins.bins * 2);
    if (res.converged) break;
    out.push_back({candidates[res.best], res.discrepancy[res.best]});
    map = map.with_row(candidates[res.best]);
    // Empty soft bins would put the target on the hull boundary; blend in a
    // sliver of the reference moments to keep it interior.
    Tensor hbar = feature_stats(data, map);
    const auto h_ref = feature_table(map, domain);
    Tensor ref_mean = exact_moments(Tensor({map.dim()}), h_ref, ref.tabulate(domain), domain);
    hbar = (1.0 - 1e-3) * hbar + 1e-3 * ref_mean;
    auto fit = fit_linear_exact_moments(hbar, map, domain, ref);
    log_table = model_log_table(fit.model, domain);
  }
  return out;
}

// --- deep energy model --------------------------------------------------------

EbmGrads deep_ebm_grads(const DeepEnergyModel& model, const Tensor& x) {
  auto b = model.score.backward_with(x, [](const Tensor& out) {
    if (out.size() != 1) throw ShapeError("deep_ebm_grads", "score network must return one value per example");
    return Tensor::filled(out.shape(), 1.0);
  });
  EbmGrads g;
  g.energy = x.squared_norm() / (2.0 * model.sigma2) - b.output.item();
  g.grad_x = (1.0 / model.sigma2) * x;
  g.grad_x -= b.grad_input;
  g.grad_score = std::move(b.grad_params);
  return g;
}

EnergyFn ebm_energy_fn(const DeepEnergyModel& model) {
  return [&model](const Tensor& x) {
    auto b = model.score.backward_with(x, [](const Tensor& out) { return Tensor::filled(out.shape(), 1.0); });
    EnergyGrad eg;
    eg.energy = x.squared_norm() / (2.0 * model.sigma2) - b.output.item();
    eg.grad = (1.0 / model.sigma2) * x;
    eg.grad -= b.grad_input;
    return eg;
  };
}

BatchEnergyFn ebm_batch_energy_fn(const DeepEnergyModel& model) {
  return [&model](const Tensor& xs, std::vector<double>& energies, Tensor& grads) {
    auto b = model.score.backward_with(xs, [](const Tensor& out) { return Tensor::filled(out.shape(), 1.0); });
    const std::size_t n = xs.extent(0);
    const std::size_t dim = xs.size() / n;
    if (b.output.size() != n) throw ShapeError("ebm_batch_energy", "score network must return one value per row");
    energies.assign(n, 0.0);
    grads = Tensor(xs.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double v = xs[i * dim + j];
        sq += v * v;
        grads[i * dim + j] = v / model.sigma2 - b.grad_input[i * dim + j];
      }
      energies[i] = sq / (2.0 * model.sigma2) - b.output[i];
    }
  };
}

std::vector<Tensor> mean_score_grads(const DeepEnergyModel& model, std::span<const Tensor> xs,
                                     bool batched) {
  if (xs.empty()) throw ShapeError("mean_score_grads", "empty batch");
  const double inv = 1.0 / static_cast<double>(xs.size());
  if (batched) {
    Tensor batch = stack(xs);
    auto b = model.score.backward_with(batch, [](const Tensor& out) { return Tensor::filled(out.shape(), 1.0); });
    for (auto& g : b.grad_params) g *= inv;
    return std::move(b.grad_params);
  }
  auto acc = model.score.zero_like_params();
  for (const auto& x : xs) {
    auto b = model.score.backward_with(x, [](const Tensor& out) { return Tensor::filled(out.shape(), 1.0); });
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += b.grad_params[k];
  }
  for (auto& g : acc) g *= inv;
  return acc;
}

std::vector<Tensor> ebm_update_direction(const DeepEnergyModel& model, std::span<const Tensor> data,
                                         std::span<const Tensor> synth, bool batched) {
  auto pos = mean_score_grads(model, data, batched);
  auto neg = mean_score_grads(model, synth, batched);
  for (std::size_t k = 0; k < pos.size(); ++k) pos[k] -= neg[k];
  return pos;
}

std::vector<Tensor> ebm_synthesize(const DeepEnergyModel& model, std::vector<Tensor> inits,
                                   const LangevinConfig& lang, bool batched, Rng& rng,
                                   std::size_t* diverged) {
  std::size_t bad = 0;
  std::vector<Tensor> out;
  out.reserve(inits.size());
  const Rng stream = rng.split("langevin");
  if (batched) {
    auto b = run_chains_batched(stack(inits), ebm_batch_energy_fn(model), lang, stream);
    out = unstack(b.points);
    for (std::size_t i = 0; i < out.size(); ++i)
      if (b.diverged[i]) {
        ++bad;
        out[i] = rng.normal_tensor(out[i].shape(), std::sqrt(model.sigma2));
      }
  } else {
    auto chains = run_chains(inits, ebm_energy_fn(model), lang, stream);
    for (auto& c : chains) {
      if (c.diverged) {
        ++bad;
        out.push_back(rng.normal_tensor(c.point.shape(), std::sqrt(model.sigma2)));
      } else {
        out.push_back(std::move(c.point));
      }
    }
  }
  if (diverged) *diverged = bad;
  return out;
}

std::vector<Tensor> draw_batch(std::span<const Tensor> data, std::size_t n, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(n);
  if (n >= data.size()) {
    out.assign(data.begin(), data.end());
    return out;
  }
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
    out.push_back(data[idx[i]]);
  }
  return out;
}

double mean_energy(const DeepEnergyModel& model, std::span<const Tensor> xs, bool batched) {
  if (batched) {
    std::vector<double> e;
    Tensor g;
    ebm_batch_energy_fn(model)(stack(xs), e, g);
    return compensated_sum(e) / static_cast<double>(e.size());
  }
  std::vector<double> e;
  for (const auto& x : xs) e.push_back(x.squared_norm() / (2.0 * model.sigma2) - model.score.forward(x).item());
  return compensated_sum(e) / static_cast<double>(e.size());
}

namespace {

double norm_of(const std::vector<Tensor>& ts) {
  double s = 0.0;
  for (const auto& t : ts) s += t.squared_norm();
  return std::sqrt(s);
}

}  // namespace

std::vector<EbmIteration> fit_deep_ebm(
    DeepEnergyModel& model, std::span<const Tensor> data, InitMode init_mode,
    const LangevinConfig& lang, const EbmTrainConfig& cfg, Rng& rng,
    const std::function<void(const EbmIteration&, std::span<const Tensor>)>& on_iter) {
  require_nonempty(data, "fit_deep_ebm");
  lang.validate();
  ChainPool pool(init_mode, data[0].shape(), model.sigma2);
  Optimizer opt(cfg.optimizer);
  std::vector<EbmIteration> log;
  for (int it = 0; it < cfg.iterations; ++it) {
    Rng irng = rng.split(static_cast<std::uint64_t>(it));
    auto batch = draw_batch(data, cfg.batch_size, irng);
    auto inits = pool.draw(cfg.synth_count, batch, irng);
    EbmIteration row;
    row.iteration = it + 1;
    auto synth = ebm_synthesize(model, std::move(inits), lang, cfg.batched, irng, &row.diverged);
    auto dir = ebm_update_direction(model, batch, synth, cfg.batched);
    row.mean_u_data = mean_energy(model, batch, cfg.batched);
    row.mean_u_synth = mean_energy(model, synth, cfg.batched);
    row.value = row.mean_u_synth - row.mean_u_data;
    row.update_norm = norm_of(dir);
    for (auto& g : dir) g *= -1.0;
    opt.step(model.score.params(), dir, log_decay_rate(cfg.lr, it, cfg.decay_every));
    if (on_iter) on_iter(row, synth);
    if (init_mode == InitMode::kPersistent) pool.store(std::move(synth));
    log.push_back(row);
  }
  return log;
}

// --- multi-grid ---------------------------------------------------------------

void check_grids(std::span<const std::size_t> grids) {
  if (grids.empty()) throw ConfigError("pyramid", "grid list is empty");
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i] == 0) throw ConfigError("pyramid", "grid sizes must be positive");
    if (i > 0 && (grids[i] <= grids[i - 1] || grids[i] % grids[i - 1] != 0))
      throw ConfigError("pyramid", "grid sizes must increase and each must divide the next");
  }
}

Tensor block_average(const Tensor& image, std::size_t size) {
  if (image.rank() != 3 || image.extent(0) != image.extent(1))
    throw ShapeError("pyramid", "image must be square [S, S, C], got " + shape_string(image.shape()));
  const std::size_t s = image.extent(0), c = image.extent(2);
  if (size == 0 || s % size != 0) throw ShapeError("pyramid", "grid size must divide the image size");
  const std::size_t f = s / size;
  Tensor out({size, size, c});
  const double inv = 1.0 / static_cast<double>(f * f);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      for (std::size_t k = 0; k < c; ++k) out[((i / f) * size + j / f) * c + k] += inv * image[(i * s + j) * c + k];
  return out;
}

std::vector<Tensor> build_pyramid(const Tensor& image, std::span<const std::size_t> grids) {
  check_grids(grids);
  if (image.rank() != 3 || image.extent(0) != image.extent(1))
    throw ShapeError("pyramid", "image must be square [S, S, C]");
  if (grids.back() != image.extent(0)) throw ShapeError("pyramid", "finest grid must equal the image size");
  std::vector<Tensor> out;
  for (auto g : grids) out.push_back(block_average(image, g));
  return out;
}

Tensor image_diagnostics(const Tensor& image) {
  const std::size_t h = image.extent(0), w = image.extent(1), c = image.extent(2);
  const SoftBins bins{-1.0, 1.0, 8};
  Tensor d({11});
  const double inv = 1.0 / static_cast<double>(image.size());
  for (double v : image.values()) {
    d[0] += inv * v;
    for (std::size_t b = 0; b < bins.bins; ++b) d[1 + b] += inv * bins.weight(b, std::clamp(v, -1.0, 1.0));
  }
  double dx = 0.0, dy = 0.0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < c; ++k) {
        const double v = image[(i * w + j) * c + k];
        if (j + 1 < w) dx += std::abs(image[(i * w + j + 1) * c + k] - v);
        if (i + 1 < h) dy += std::abs(image[((i + 1) * w + j) * c + k] - v);
      }
  if (w > 1) d[9] = dx / static_cast<double>(h * (w - 1) * c);
  if (h > 1) d[10] = dy / static_cast<double>((h - 1) * w * c);
  return d;
}

std::vector<double> unit_histogram(std::span<const double> values, std::size_t bins) {
  std::vector<double> h(bins, 0.0);
  if (values.empty()) return h;
  for (double v : values) {
    const double u = (std::clamp(v, -1.0, 1.0) + 1.0) / 2.0;
    h[std::min(bins - 1, static_cast<std::size_t>(u * static_cast<double>(bins)))] += 1.0;
  }
  for (auto& x : h) x /= static_cast<double>(values.size());
  return h;
}

GridPyramid make_pyramid_models(const MultigridConfig& cfg, std::size_t channels, Rng& rng) {
  check_grids(cfg.grids);
  if (cfg.grids.front() != 1) throw ConfigError("pyramid", "the coarsest grid must be 1x1");
  GridPyramid pyr;
  pyr.grids = cfg.grids;
  pyr.channels = channels;
  for (std::size_t g = 1; g < cfg.grids.size(); ++g) {
    const std::size_t size = cfg.grids[g];
    std::vector<ConvLayerSpec> layers{{3, cfg.base_channels, 1}};
    if (size >= 8) layers.push_back({3, cfg.base_channels * 2, 2});
    if (size >= 16) layers.push_back({3, cfg.base_channels * 2, 2});
    Rng mr = rng.split(static_cast<std::uint64_t>(g));
    pyr.models.push_back({make_conv_scorer(size, channels, layers, Activation::kRelu, mr, 0.5), cfg.sigma2});
  }
  return pyr;
}

double sample_seed_value(const GridPyramid& pyr, Rng& rng) {
  if (pyr.seed_histogram.empty()) return 0.0;
  double u = rng.uniform();
  std::size_t b = 0;
  for (; b + 1 < pyr.seed_histogram.size(); ++b) {
    if (u < pyr.seed_histogram[b]) break;
    u -= pyr.seed_histogram[b];
  }
  const double width = 2.0 / static_cast<double>(pyr.seed_histogram.size());
  return -1.0 + width * (static_cast<double>(b) + rng.uniform());
}

std::vector<std::vector<Tensor>> sample_multigrid_levels(const GridPyramid& pyr, std::size_t n,
                                                         const LangevinConfig& lang, Rng& rng) {
  std::vector<std::vector<Tensor>> levels(pyr.grids.size());
  for (std::size_t i = 0; i < n; ++i) {
    Tensor seed({1, 1, pyr.channels});
    for (auto& v : seed.values()) v = sample_seed_value(pyr, rng);
    levels[0].push_back(std::move(seed));
  }
  for (std::size_t g = 1; g < pyr.grids.size(); ++g) {
    const std::size_t factor = pyr.grids[g] / pyr.grids[g - 1];
    std::vector<Tensor> inits;
    for (const auto& x : levels[g - 1]) inits.push_back(upsample_nearest(x, factor));
    Rng gr = rng.split(static_cast<std::uint64_t>(g));
    levels[g] = ebm_synthesize(pyr.models[g - 1], std::move(inits), lang, false, gr);
  }
  return levels;
}

Tensor sample_multigrid(const GridPyramid& pyr, const LangevinConfig& lang, Rng& rng) {
  return sample_multigrid_levels(pyr, 1, lang, rng).back().front();
}

std::vector<MultigridIteration> fit_multigrid(GridPyramid& pyr, std::span<const Tensor> data,
                                              const MultigridConfig& cfg, const LangevinConfig& lang,
                                              Rng& rng) {
  require_nonempty(data, "fit_multigrid");
  lang.validate();
  check_grids(pyr.grids);
  const std::size_t levels = pyr.grids.size();
  std::vector<std::vector<Tensor>> observed(levels);
  for (const auto& img : data) {
    auto p = build_pyramid(img, pyr.grids);
    for (std::size_t g = 0; g < levels; ++g) observed[g].push_back(std::move(p[g]));
  }
  std::vector<double> seeds;
  for (const auto& x : observed[0])
    for (double v : x.values()) seeds.push_back(v);
  pyr.seed_histogram = unit_histogram(seeds, pyr.seed_bins);

  std::vector<Tensor> target(levels);
  for (std::size_t g = 0; g < levels; ++g) {
    target[g] = Tensor({11});
    for (const auto& x : observed[g]) target[g] += image_diagnostics(x);
    target[g] *= 1.0 / static_cast<double>(observed[g].size());
  }

  std::vector<Optimizer> opts(pyr.models.size(), Optimizer(cfg.optimizer));
  std::vector<MultigridIteration> log;
  for (int it = 0; it < cfg.iterations; ++it) {
    Rng irng = rng.split(static_cast<std::uint64_t>(it));
    auto synth = sample_multigrid_levels(pyr, cfg.synth_count, lang, irng);
    std::vector<std::size_t> pick(std::min(cfg.batch_size, data.size()));
    {
      std::vector<std::size_t> idx(data.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < pick.size(); ++i) {
        std::swap(idx[i], idx[i + irng.index(idx.size() - i)]);
        pick[i] = idx[i];
      }
    }
    MultigridIteration row;
    row.iteration = it + 1;
    // All grids are updated from the same synthesis pass, separately.
    for (std::size_t g = 1; g < levels; ++g) {
      std::vector<Tensor> obs;
      for (auto i : pick) obs.push_back(observed[g][i]);
      auto& model = pyr.models[g - 1];
      Tensor diag({11});
      for (const auto& x : synth[g]) diag += image_diagnostics(x);
      diag *= 1.0 / static_cast<double>(synth[g].size());
      row.discrepancy.push_back(std::sqrt((diag - target[g]).squared_norm()));
      row.value.push_back(mean_energy(model, synth[g], false) - mean_energy(model, obs, false));
      auto dir = ebm_update_direction(model, obs, synth[g], false);
      for (auto& d : dir) d *= -1.0;
      opts[g - 1].step(model.score.params(), dir, cfg.lr);
    }
    log.push_back(std::move(row));
  }
  return log;
}

}  // namespace modelzoo
