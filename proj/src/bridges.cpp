#include "modelzoo/bridges.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "modelzoo/error.hpp"

namespace modelzoo {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void add_into(std::vector<Tensor>& acc, const std::vector<Tensor>& g, double c) {
  for (std::size_t k = 0; k < acc.size(); ++k) {
    auto a = acc[k].values();
    auto b = g[k].values();
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += c * b[j];
  }
}

std::vector<Tensor> negated(std::vector<Tensor> g) {
  for (auto& t : g) t *= -1.0;
  return g;
}

bool all_finite(const std::vector<Tensor>& ts) {
  return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

double mean_of(std::span<const double> v) { return compensated_sum(v) / static_cast<double>(v.size()); }

// Sums per-example gradient lists in index order so the result does not
// depend on the thread count.
std::vector<Tensor> ordered_mean(const std::vector<std::vector<Tensor>>& per, std::vector<Tensor> zero) {
  const double inv = 1.0 / static_cast<double>(per.size());
  for (const auto& g : per) add_into(zero, g, inv);
  return zero;
}

Rng fresh_stream(Rng& rng) { return rng.split(rng.engine()()); }

}  // namespace

// --- introspective learning ------------------------------------------------------

double TiltedModel::tilt_value(const Tensor& x, std::size_t t) const {
  return tilts.at(t).theta.dot(map(x)) + tilts[t].offset;
}

double TiltedModel::log_density(const Tensor& x, std::size_t upto) const {
  if (upto > tilts.size()) throw ConfigError("tilted_model", "tilt index out of range");
  double v = base.log_density(x);
  if (upto == 0) return v;
  const Tensor h = map(x);
  for (std::size_t t = 0; t < upto; ++t) v += tilts[t].theta.dot(h) + tilts[t].offset;
  return v;
}

EnergyGrad TiltedModel::energy(const Tensor& x) const {
  EnergyGrad eg;
  eg.energy = -log_density(x);
  eg.grad = base.grad_log_density(x);
  if (!tilts.empty()) {
    Tensor theta(tilts[0].theta.shape());
    for (const auto& t : tilts) theta += t.theta;
    eg.grad += map.vjp(x, theta);
  }
  eg.grad *= -1.0;
  return eg;
}

std::vector<double> TiltedModel::log_table(const Domain& domain) const {
  std::vector<double> out = base.tabulate(domain);
  if (tilts.empty()) return out;
  for (std::size_t s = 0; s < domain.size(); ++s) {
    const Tensor h = map(domain.state(s));
    for (const auto& t : tilts) out[s] += t.theta.dot(h) + t.offset;
  }
  return out;
}

std::vector<double> empirical_mass(std::span<const Tensor> data, const Domain& domain) {
  if (data.empty()) throw ShapeError("empirical_mass", "empty data");
  std::map<std::vector<double>, std::size_t> index;
  for (std::size_t s = 0; s < domain.size(); ++s) index.emplace(domain.state(s).storage(), s);
  std::vector<double> mass(domain.size(), 0.0);
  for (const auto& x : data) {
    auto it = index.find(x.storage());
    if (it == index.end()) throw ConfigError("empirical_mass", "example does not coincide with a domain state");
    mass[it->second] += 1.0;
  }
  for (auto& m : mass) m /= static_cast<double>(data.size());
  return mass;
}

namespace {

// Mean weighted logistic loss at the fitted parameters, without the penalty.
double log_loss(const LogisticFit& fit, std::span<const Tensor> features, std::span<const int> labels,
                std::span<const double> weights) {
  std::vector<double> terms(features.size());
  double wsum = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double m = labels[i] * logistic_score(fit, features[i]);
    // -log sigmoid(m), stable for both signs.
    terms[i] = weights[i] * (m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m)));
    wsum += weights[i];
  }
  return compensated_sum(terms) / wsum;
}

IntrospectiveRound make_round(int r, const LogisticFit& fit, double loss) {
  IntrospectiveRound row;
  row.round = r;
  row.log_loss = loss;
  row.theta_norm = std::sqrt(fit.theta.squared_norm());
  row.offset = fit.b;
  row.converged = loss > std::numbers::ln2 - 1e-6;
  return row;
}

}  // namespace

IntrospectiveFit introspective_fit_exact(std::span<const double> data_mass, const Domain& domain,
                                         const FeatureMap& map, const Reference& base,
                                         const IntrospectiveConfig& cfg) {
  if (data_mass.size() != domain.size()) throw ShapeError("introspective_fit", "mass table must cover the domain");
  double total = 0.0;
  for (double m : data_mass) {
    if (!(m >= 0.0)) throw ConfigError("introspective_fit", "data mass must be nonnegative");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("introspective_fit", "data mass must sum to 1");
  if (cfg.rounds < 1) throw ConfigError("introspective_fit", "rounds must be positive");

  IntrospectiveFit fit{TiltedModel{map, base, {}}, {}, 0.0, false};
  std::vector<Tensor> states_h;
  for (const auto& s : domain.states()) states_h.push_back(map(s));
  std::vector<double> cur = base.tabulate(domain);
  std::vector<double> data_log(data_mass.size());
  for (std::size_t s = 0; s < data_mass.size(); ++s)
    data_log[s] = data_mass[s] > 0.0 ? std::log(data_mass[s]) - domain.log_weight(s)
                                     : -std::numeric_limits<double>::infinity();
  fit.initial_kl = exact_kl(data_log, cur, domain);

  for (int r = 1; r <= cfg.rounds; ++r) {
    const auto neg = normalized_log_mass(cur, domain);
    std::vector<Tensor> feats;
    std::vector<int> labels;
    std::vector<double> weights;
    for (std::size_t s = 0; s < domain.size(); ++s) {
      if (data_mass[s] > 0.0) {
        feats.push_back(states_h[s]);
        labels.push_back(1);
        weights.push_back(data_mass[s]);
      }
      const double q = std::exp(neg[s]);
      if (q > 0.0) {
        feats.push_back(states_h[s]);
        labels.push_back(-1);
        weights.push_back(q);
      }
    }
    const auto lf = fit_logistic(feats, labels, weights, cfg.logistic);
    auto row = make_round(r, lf, log_loss(lf, feats, labels, weights));
    if (row.converged) {
      row.kl = fit.log.empty() ? fit.initial_kl : fit.log.back().kl;
      fit.log.push_back(row);
      fit.converged = true;
      break;
    }
    fit.model.tilts.push_back({lf.theta, lf.b});
    for (std::size_t s = 0; s < domain.size(); ++s) cur[s] += lf.theta.dot(states_h[s]) + lf.b;
    row.kl = exact_kl(data_log, cur, domain);
    fit.log.push_back(row);
  }
  return fit;
}

IntrospectiveFit introspective_fit_langevin(
    std::span<const Tensor> data, const FeatureMap& map, const Reference& base, const LangevinConfig& lang,
    const IntrospectiveConfig& cfg, Rng& rng,
    const std::function<void(const IntrospectiveRound&, std::span<const Tensor>)>& on_round) {
  if (data.empty()) throw ShapeError("introspective_fit", "empty data");
  if (base.kind != Reference::Kind::kGaussian)
    throw ConfigError("introspective_fit", "Langevin mode needs a Gaussian base density");
  if (!map.differentiable()) throw ConfigError("introspective_fit", "Langevin mode needs a differentiable feature map");
  if (cfg.rounds < 1) throw ConfigError("introspective_fit", "rounds must be positive");
  lang.validate();

  const std::size_t m = cfg.negatives ? cfg.negatives : data.size();
  const double sd = std::sqrt(base.sigma2);
  IntrospectiveFit fit{TiltedModel{map, base, {}}, {}, 0.0, false};
  std::vector<Tensor> data_h;
  for (const auto& x : data) data_h.push_back(map(x));

  std::vector<Tensor> negatives;
  for (std::size_t i = 0; i < m; ++i) negatives.push_back(rng.normal_tensor(data[0].shape(), sd));

  for (int r = 1; r <= cfg.rounds; ++r) {
    Rng rr = rng.split(static_cast<std::uint64_t>(r));
    if (!cfg.persistent)
      for (auto& x : negatives) x = rr.normal_tensor(data[0].shape(), sd);
    if (!fit.model.tilts.empty()) {
      const TiltedModel& model = fit.model;
      auto chains = run_chains(negatives, [&model](const Tensor& x) { return model.energy(x); }, lang,
                               rr.split("langevin"));
      for (std::size_t i = 0; i < m; ++i)
        negatives[i] = chains[i].diverged ? rr.normal_tensor(data[0].shape(), sd) : std::move(chains[i].point);
    }
    std::vector<Tensor> feats = data_h;
    std::vector<int> labels(data.size(), 1);
    std::vector<double> weights(data.size(), 1.0 / static_cast<double>(data.size()));
    for (const auto& x : negatives) {
      feats.push_back(map(x));
      labels.push_back(-1);
      weights.push_back(1.0 / static_cast<double>(m));
    }
    const auto lf = fit_logistic(feats, labels, weights, cfg.logistic);
    auto row = make_round(r, lf, log_loss(lf, feats, labels, weights));
    row.kl = std::numeric_limits<double>::quiet_NaN();
    if (on_round) on_round(row, negatives);
    fit.log.push_back(row);
    if (row.converged) {
      fit.converged = true;
      break;
    }
    fit.model.tilts.push_back({lf.theta, lf.b});
  }
  return fit;
}

FeatureMap rbf_feature_map(std::vector<Tensor> centers, double bandwidth) {
  if (centers.empty()) throw ConfigError("rbf_features", "need at least one centre");
  if (!(bandwidth > 0.0)) throw ConfigError("rbf_features", "bandwidth must be positive");
  const double inv = 1.0 / (bandwidth * bandwidth);
  auto eval = [centers, inv](const Tensor& x) {
    Tensor h({centers.size()});
    for (std::size_t k = 0; k < centers.size(); ++k) h[k] = std::exp(-0.5 * inv * (x - centers[k]).squared_norm());
    return h;
  };
  auto vjp = [centers, inv](const Tensor& x, const Tensor& theta) {
    Tensor g(x.shape());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      Tensor diff = x - centers[k];
      const double c = -theta[k] * inv * std::exp(-0.5 * inv * diff.squared_norm());
      diff *= c;
      g += diff;
    }
    return g;
  };
  const std::size_t dim = centers.size();
  return FeatureMap::custom(dim, eval, vjp);
}

// --- inference model -------------------------------------------------------------

InferenceModel::Posterior InferenceModel::encode(const Tensor& x) const {
  const Tensor out = encoder.forward(x);
  if (out.size() != 2 * latent_dim)
    throw ShapeError("inference_model", "encoder must output 2d = " + std::to_string(2 * latent_dim) + " values");
  Posterior p{Tensor({latent_dim}), Tensor({latent_dim})};
  for (std::size_t j = 0; j < latent_dim; ++j) {
    p.mean[j] = out[j];
    p.log_var[j] = out[latent_dim + j];
  }
  return p;
}

double InferenceModel::log_density(const Tensor& x, const Tensor& h) const {
  const auto post = encode(x);
  if (h.size() != latent_dim) throw ShapeError("inference_model", "latent size mismatch");
  double v = 0.0;
  for (std::size_t j = 0; j < latent_dim; ++j) {
    const double r = h[j] - post.mean[j];
    v -= 0.5 * (kLog2Pi + post.log_var[j] + r * r * std::exp(-post.log_var[j]));
  }
  return v;
}

InferenceModel linear_encoder(std::size_t p, std::size_t d, Rng& rng, double gain) {
  return {make_mlp({p, {}, 2 * d}, rng, gain), d};
}

InferenceModel mlp_encoder(std::size_t p, std::vector<std::size_t> hidden, std::size_t d, Rng& rng, Activation act) {
  return {make_mlp({p, std::move(hidden), 2 * d, act, Activation::kIdentity}, rng), d};
}

InferenceModel affine_encoder(const Eigen::MatrixXd& A, const Eigen::VectorXd& m, const Eigen::VectorXd& log_var) {
  const auto d = static_cast<std::size_t>(A.rows()), p = static_cast<std::size_t>(A.cols());
  if (m.size() != A.rows() || log_var.size() != A.rows()) throw ShapeError("affine_encoder", "size mismatch");
  Rng rng(0);
  InferenceModel inf = linear_encoder(p, d, rng);
  Tensor W({2 * d, p}), b({2 * d});
  for (std::size_t j = 0; j < d; ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    for (std::size_t i = 0; i < p; ++i) W.at({j, i}) = A(r, static_cast<Eigen::Index>(i));
    b[j] = m(r);
    b[d + j] = log_var(r);
  }
  inf.encoder.params()[0] = std::move(W);
  inf.encoder.params()[1] = std::move(b);
  return inf;
}

// --- VAE -----------------------------------------------------------------------------

namespace {

void check_pair(const GeneratorModel& gen, const InferenceModel& inf, const char* op) {
  if (inf.latent_dim != gen.latent_dim())
    throw ShapeError(op, "encoder latent size " + std::to_string(inf.latent_dim) + " differs from the generator's " +
                             std::to_string(gen.latent_dim()));
}

struct ExampleElbo {
  double recon = 0.0;
  double recon_var = 0.0;  // sample variance of the per-draw terms
  double kl = 0.0;
  double sd = 0.0;
  double dlog_sigma2 = 0.0;
  std::vector<Tensor> dec, enc;
};

ExampleElbo example_elbo(const GeneratorModel& gen, const InferenceModel& inf, const Tensor& x, Rng& r,
                         std::size_t mc, bool grads) {
  const std::size_t d = inf.latent_dim;
  const auto post = inf.encode(x);
  Tensor sd({d});
  for (std::size_t j = 0; j < d; ++j) sd[j] = std::exp(0.5 * post.log_var[j]);
  ExampleElbo e;
  Tensor seed({2 * d});
  for (std::size_t j = 0; j < d; ++j) {
    e.kl += 0.5 * (post.mean[j] * post.mean[j] + std::exp(post.log_var[j]) - 1.0 - post.log_var[j]);
    e.sd += sd[j] / static_cast<double>(d);
    seed[j] = -post.mean[j];
    seed[d + j] = -0.5 * (std::exp(post.log_var[j]) - 1.0);
  }
  if (grads) e.dec = gen.decoder.zero_like_params();
  const double inv_m = 1.0 / static_cast<double>(mc);
  const double p = static_cast<double>(x.size());
  std::vector<double> draws;
  for (std::size_t s = 0; s < mc; ++s) {
    const Tensor eps = r.normal_tensor({d});
    Tensor h(gen.latent_shape);
    for (std::size_t j = 0; j < d; ++j) h[j] = post.mean[j] + sd[j] * eps[j];
    double sq = 0.0;
    if (grads) {
      auto b = gen.decoder.backward_with(h, [&](const Tensor& out) {
        if (out.size() != x.size()) throw ShapeError("vae_elbo", "decoder output size differs from the data");
        Tensor res = x.reshaped(out.shape()) - out;
        sq = res.squared_norm();
        res *= 1.0 / gen.sigma2;
        return res;
      });
      add_into(e.dec, b.grad_params, inv_m);
      for (std::size_t j = 0; j < d; ++j) {
        seed[j] += inv_m * b.grad_input[j];
        seed[d + j] += inv_m * 0.5 * b.grad_input[j] * eps[j] * sd[j];
      }
      e.dlog_sigma2 += inv_m * (-0.5 * p + sq / (2.0 * gen.sigma2));
    } else {
      const Tensor out = generator_decode(gen, h);
      if (out.size() != x.size()) throw ShapeError("vae_elbo", "decoder output size differs from the data");
      sq = (x.reshaped(out.shape()) - out).squared_norm();
    }
    draws.push_back(-0.5 * p * (kLog2Pi + std::log(gen.sigma2)) - sq / (2.0 * gen.sigma2));
  }
  e.recon = mean_of(draws);
  if (mc > 1) {
    double v = 0.0;
    for (double t : draws) v += (t - e.recon) * (t - e.recon);
    e.recon_var = v / static_cast<double>(mc - 1);
  }
  if (grads) e.enc = inf.encoder.backward(x, seed).grad_params;
  return e;
}

}  // namespace

ElboEstimate vae_elbo(const GeneratorModel& gen, const InferenceModel& inf, std::span<const Tensor> data,
                      const Rng& stream, std::size_t mc_samples, bool with_gradients) {
  check_pair(gen, inf, "vae_elbo");
  if (data.empty()) throw ShapeError("vae_elbo", "empty data");
  if (mc_samples == 0) throw ConfigError("vae_elbo", "mc_samples must be positive");
  std::vector<ExampleElbo> per(data.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng r = stream.split(i);
    per[i] = example_elbo(gen, inf, data[i], r, mc_samples, with_gradients);
  }
  const double n = static_cast<double>(data.size());
  ElboEstimate est;
  std::vector<double> rec, kl, sd, dls, var;
  for (const auto& e : per) {
    rec.push_back(e.recon);
    kl.push_back(e.kl);
    sd.push_back(e.sd);
    dls.push_back(e.dlog_sigma2);
    var.push_back(e.recon_var);
  }
  est.recon = mean_of(rec);
  est.kl = mean_of(kl);
  est.elbo = est.recon - est.kl;
  est.encoder_sd = mean_of(sd);
  est.standard_error = std::sqrt(compensated_sum(var) / static_cast<double>(mc_samples)) / n;
  if (with_gradients) {
    est.grad_decoder = gen.decoder.zero_like_params();
    est.grad_encoder = inf.encoder.zero_like_params();
    for (const auto& e : per) {
      add_into(est.grad_decoder, e.dec, 1.0 / n);
      add_into(est.grad_encoder, e.enc, 1.0 / n);
    }
    est.grad_log_sigma2 = mean_of(dls);
  }
  return est;
}

ElboEstimate vae_elbo(const GeneratorModel& gen, const InferenceModel& inf, std::span<const Tensor> data, Rng& rng,
                      std::size_t mc_samples) {
  return vae_elbo(gen, inf, data, fresh_stream(rng), mc_samples, true);
}

Eigen::MatrixXd decoder_weight(const GeneratorModel& gen) {
  const auto& ps = gen.decoder.params();
  if (ps.size() != 2 || ps[0].rank() != 2) throw ConfigError("decoder_weight", "decoder is not a single linear layer");
  Eigen::MatrixXd W(static_cast<Eigen::Index>(ps[0].extent(0)), static_cast<Eigen::Index>(ps[0].extent(1)));
  for (Eigen::Index i = 0; i < W.rows(); ++i)
    for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = ps[0].at({static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
  return W;
}

Eigen::VectorXd decoder_bias(const GeneratorModel& gen) {
  const auto& ps = gen.decoder.params();
  if (ps.size() != 2 || ps[0].rank() != 2) throw ConfigError("decoder_bias", "decoder is not a single linear layer");
  return Eigen::Map<const Eigen::VectorXd>(ps[1].data(), static_cast<Eigen::Index>(ps[1].size()));
}

double linear_vae_elbo(const Eigen::MatrixXd& W, const Eigen::VectorXd& b, double sigma2, const InferenceModel& inf,
                       std::span<const Tensor> data) {
  if (data.empty()) throw ShapeError("linear_vae_elbo", "empty data");
  if (static_cast<std::size_t>(W.cols()) != inf.latent_dim) throw ShapeError("linear_vae_elbo", "latent size mismatch");
  const auto p = W.rows();
  const Eigen::VectorXd col_sq = W.colwise().squaredNorm().transpose();
  std::vector<double> terms(data.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto post = inf.encode(data[i]);
    const Eigen::Map<const Eigen::VectorXd> x(data[i].data(), p);
    const Eigen::Map<const Eigen::VectorXd> mu(post.mean.data(), W.cols());
    const Eigen::Map<const Eigen::VectorXd> lv(post.log_var.data(), W.cols());
    const Eigen::VectorXd var = lv.array().exp();
    const double sq = (x - W * mu - b).squaredNorm() + var.dot(col_sq);
    const double recon = -0.5 * static_cast<double>(p) * (kLog2Pi + std::log(sigma2)) - sq / (2.0 * sigma2);
    const double kl = 0.5 * (mu.squaredNorm() + var.sum() - static_cast<double>(W.cols()) - lv.sum());
    terms[i] = recon - kl;
  }
  return mean_of(terms);
}

std::vector<VaeEpoch> fit_vae(GeneratorModel& gen, InferenceModel& inf, std::span<const Tensor> data,
                              const VaeConfig& cfg, Rng& rng, const std::function<void(const VaeEpoch&)>& on_epoch) {
  check_pair(gen, inf, "fit_vae");
  if (data.empty()) throw ShapeError("fit_vae", "empty data");
  if (cfg.epochs < 1 || !(cfg.lr > 0.0) || !(cfg.lr_final > 0.0)) throw ConfigError("fit_vae", "bad schedule");
  Optimizer opt(cfg.optimizer);
  const std::size_t nd = gen.decoder.params().size(), ne = inf.encoder.params().size();
  const std::size_t bs = cfg.batch_size == 0 || cfg.batch_size > data.size() ? data.size() : cfg.batch_size;
  std::vector<VaeEpoch> log;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    const double frac = cfg.epochs > 1 ? static_cast<double>(ep) / (cfg.epochs - 1) : 0.0;
    const double lr = cfg.lr * std::pow(cfg.lr_final / cfg.lr, frac);
    Rng er = rng.split(static_cast<std::uint64_t>(ep));
    if (bs < data.size())
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[er.index(i)]);
    VaeEpoch row;
    row.epoch = ep + 1;
    double weight = 0.0;
    for (std::size_t start = 0, chunk = 0; start < data.size(); start += bs, ++chunk) {
      std::vector<Tensor> batch;
      for (std::size_t i = start; i < std::min(start + bs, data.size()); ++i) batch.push_back(data[order[i]]);
      const auto est = vae_elbo(gen, inf, batch, er.split(chunk), cfg.mc_samples, true);
      const double w = static_cast<double>(batch.size());
      row.elbo += w * est.elbo;
      row.standard_error += w * w * est.standard_error * est.standard_error;
      row.recon += w * est.recon;
      row.kl += w * est.kl;
      row.encoder_sd += w * est.encoder_sd;
      weight += w;
      std::vector<Tensor> params, grads;
      for (auto& t : gen.decoder.params()) params.push_back(std::move(t));
      for (auto& t : inf.encoder.params()) params.push_back(std::move(t));
      params.push_back(Tensor::scalar(std::log(gen.sigma2)));
      grads = negated(est.grad_decoder);
      for (auto& g : negated(est.grad_encoder)) grads.push_back(std::move(g));
      grads.push_back(Tensor::scalar(cfg.learn_sigma2 ? -est.grad_log_sigma2 : 0.0));
      const bool finite = all_finite(grads);
      if (finite) opt.step(params, grads, lr);
      for (std::size_t k = 0; k < nd; ++k) gen.decoder.params()[k] = std::move(params[k]);
      for (std::size_t k = 0; k < ne; ++k) inf.encoder.params()[k] = std::move(params[nd + k]);
      if (cfg.learn_sigma2) gen.sigma2 = std::max(1e-8, std::exp(params.back().item()));
      if (!finite) throw NumericError("fit_vae", "non-finite ELBO gradient at epoch " + std::to_string(ep + 1));
    }
    row.elbo /= weight;
    row.standard_error = std::sqrt(row.standard_error) / weight;
    row.recon /= weight;
    row.kl /= weight;
    row.encoder_sd /= weight;
    row.sigma2 = gen.sigma2;
    row.collapse_warning = row.encoder_sd < 1e-4;
    if (on_epoch) on_epoch(row);
    log.push_back(row);
  }
  return log;
}

// --- adversarial and triangle ----------------------------------------------------------

namespace {

struct SleepExample {
  Tensor h, x;
  double u = 0.0, log_rho = 0.0;
  std::vector<Tensor> dec, enc, score;
};

SleepExample sleep_example(const DeepEnergyModel& ebm, const GeneratorModel& gen, const InferenceModel& inf, Rng& r) {
  SleepExample s;
  s.h = r.normal_tensor(gen.latent_shape);
  const Tensor g = gen.decoder.forward(s.h);
  s.x = g + r.normal_tensor(g.shape(), std::sqrt(gen.sigma2));
  const auto eg = deep_ebm_grads(ebm, s.x);
  s.u = eg.energy;
  s.score = eg.grad_score;
  const std::size_t d = inf.latent_dim;
  auto enc = inf.encoder.backward_with(s.x, [&](const Tensor& out) {
    if (out.size() != 2 * d) throw ShapeError("sleep_terms", "encoder output size mismatch");
    Tensor seed({2 * d});
    for (std::size_t j = 0; j < d; ++j) {
      const double r2 = (s.h[j] - out[j]) * (s.h[j] - out[j]);
      const double prec = std::exp(-out[d + j]);
      s.log_rho -= 0.5 * (kLog2Pi + out[d + j] + r2 * prec);
      seed[j] = (s.h[j] - out[j]) * prec;
      seed[d + j] = 0.5 * (r2 * prec - 1.0);
    }
    return seed;
  });
  s.enc = std::move(enc.grad_params);
  Tensor seed = enc.grad_input;
  seed -= eg.grad_x;
  s.dec = gen.decoder.backward(s.h, seed.reshaped(g.shape())).grad_params;
  return s;
}

}  // namespace

SleepTerms sleep_terms(const DeepEnergyModel& ebm, const GeneratorModel& gen, const InferenceModel& inf,
                       std::size_t n, const Rng& stream) {
  check_pair(gen, inf, "sleep_terms");
  if (n == 0) throw ConfigError("sleep_terms", "need at least one generator sample");
  std::vector<SleepExample> per(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = stream.split(i);
    per[i] = sleep_example(ebm, gen, inf, r);
  }
  SleepTerms t;
  std::vector<double> u, lr;
  std::vector<std::vector<Tensor>> dec, enc, score;
  for (auto& s : per) {
    u.push_back(s.u);
    lr.push_back(s.log_rho);
    dec.push_back(std::move(s.dec));
    enc.push_back(std::move(s.enc));
    score.push_back(std::move(s.score));
    t.latents.push_back(std::move(s.h));
    t.samples.push_back(std::move(s.x));
  }
  t.mean_u = mean_of(u);
  t.mean_log_rho = mean_of(lr);
  t.grad_decoder = ordered_mean(dec, gen.decoder.zero_like_params());
  t.grad_encoder = ordered_mean(enc, inf.encoder.zero_like_params());
  t.grad_score = ordered_mean(score, ebm.score.zero_like_params());
  return t;
}

double joint_negentropy(const GeneratorModel& gen) {
  const double d = static_cast<double>(gen.latent_dim());
  const double p = static_cast<double>(generator_decode(gen, Tensor(gen.latent_shape)).size());
  return -0.5 * d * (1.0 + kLog2Pi) - 0.5 * p * (1.0 + kLog2Pi + std::log(gen.sigma2));
}

namespace {

void apply(Optimizer& opt, std::vector<Tensor>& params, const std::vector<Tensor>& descent, double lr) {
  opt.step(params, descent, lr);
}

}  // namespace

AdversarialStep acd_step(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                         std::span<const Tensor> batch, const AdversarialConfig& cfg, AdversarialState& state,
                         Rng& rng) {
  if (batch.empty()) throw ShapeError("acd_step", "empty batch");
  const Rng stream = fresh_stream(rng);
  auto sleep = sleep_terms(ebm, gen, inf, cfg.gen_samples, stream);
  auto theta_dir = mean_score_grads(ebm, batch, false);
  add_into(theta_dir, sleep.grad_score, -1.0);
  AdversarialStep row;
  row.mean_u_data = mean_energy(ebm, batch, false);
  row.mean_u_gen = sleep.mean_u;
  row.mean_log_rho = sleep.mean_log_rho;
  const bool finite = std::isfinite(row.mean_u_data) && std::isfinite(row.mean_u_gen) &&
                      std::isfinite(row.mean_log_rho) && all_finite(theta_dir) && all_finite(sleep.grad_decoder) &&
                      all_finite(sleep.grad_encoder);
  if (!finite) {
    row.skipped = true;
    state.lr_scale *= 0.5;
    ++state.skipped;
    return row;
  }
  apply(state.theta, ebm.score.params(), negated(std::move(theta_dir)), cfg.lr_theta * state.lr_scale);
  apply(state.alpha, gen.decoder.params(), negated(std::move(sleep.grad_decoder)), cfg.lr_alpha * state.lr_scale);
  apply(state.phi, inf.encoder.params(), negated(std::move(sleep.grad_encoder)), cfg.lr_phi * state.lr_scale);
  return row;
}

TriangleTerms triangle_terms(const DeepEnergyModel& ebm, const GeneratorModel& gen, const InferenceModel& inf,
                             std::span<const Tensor> batch, const Rng& stream, std::size_t mc_samples,
                             std::size_t gen_samples) {
  if (batch.empty()) throw ShapeError("triangle", "empty batch");
  TriangleTerms t;
  t.elbo = vae_elbo(gen, inf, batch, stream.split("wake"), mc_samples, true);
  t.sleep = sleep_terms(ebm, gen, inf, gen_samples, stream.split("sleep"));
  t.mean_u_data = mean_energy(ebm, batch, false);
  t.grad_score_data = mean_score_grads(ebm, batch, false);
  t.value = -t.elbo.elbo + joint_negentropy(gen) + t.sleep.mean_u - t.sleep.mean_log_rho - t.mean_u_data;
  return t;
}

AdversarialStep triangle_step(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                              std::span<const Tensor> batch, const AdversarialConfig& cfg, AdversarialState& state,
                              Rng& rng) {
  auto t = triangle_terms(ebm, gen, inf, batch, fresh_stream(rng), cfg.mc_samples, cfg.gen_samples);
  AdversarialStep row;
  row.mean_u_data = t.mean_u_data;
  row.mean_u_gen = t.sleep.mean_u;
  row.mean_log_rho = t.sleep.mean_log_rho;
  row.elbo = t.elbo.elbo;
  row.value = t.value;
  // theta ascends the value: dT/dtheta = E_data[df] - E_gen[df].
  auto theta_up = std::move(t.grad_score_data);
  add_into(theta_up, t.sleep.grad_score, -1.0);
  // alpha and phi descend: dT = -dELBO - d E[-U + log rho] (resp. - d E[log rho]).
  auto alpha_down = negated(std::move(t.elbo.grad_decoder));
  add_into(alpha_down, t.sleep.grad_decoder, -1.0);
  auto phi_down = negated(std::move(t.elbo.grad_encoder));
  add_into(phi_down, t.sleep.grad_encoder, -1.0);
  const bool finite = std::isfinite(row.value) && all_finite(theta_up) && all_finite(alpha_down) && all_finite(phi_down);
  if (!finite) {
    row.skipped = true;
    state.lr_scale *= 0.5;
    ++state.skipped;
    return row;
  }
  apply(state.theta, ebm.score.params(), negated(std::move(theta_up)), cfg.lr_theta * state.lr_scale);
  apply(state.alpha, gen.decoder.params(), alpha_down, cfg.lr_alpha * state.lr_scale);
  apply(state.phi, inf.encoder.params(), phi_down, cfg.lr_phi * state.lr_scale);
  return row;
}

namespace {

template <typename StepFn>
std::vector<AdversarialStep> adversarial_loop(std::span<const Tensor> data, const AdversarialConfig& cfg, Rng& rng,
                                              const AdversarialCallback& on_iter, StepFn&& step) {
  if (data.empty()) throw ShapeError("adversarial_fit", "empty data");
  if (cfg.iterations < 1 || cfg.batch_size == 0 || cfg.gen_samples == 0)
    throw ConfigError("adversarial_fit", "iterations, batch_size and gen_samples must be positive");
  AdversarialState state{Optimizer(cfg.optimizer), Optimizer(cfg.optimizer), Optimizer(cfg.optimizer), 1.0, 0};
  std::vector<AdversarialStep> log;
  for (int it = 0; it < cfg.iterations; ++it) {
    Rng ir = rng.split(static_cast<std::uint64_t>(it));
    auto batch = draw_batch(data, cfg.batch_size, ir);
    auto row = step(batch, state, ir);
    row.iteration = it + 1;
    if (on_iter) on_iter(row);
    log.push_back(row);
  }
  return log;
}

}  // namespace

std::vector<AdversarialStep> fit_acd(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                                     std::span<const Tensor> data, const AdversarialConfig& cfg, Rng& rng,
                                     const AdversarialCallback& on_iter) {
  check_pair(gen, inf, "fit_acd");
  return adversarial_loop(data, cfg, rng, on_iter, [&](std::span<const Tensor> batch, AdversarialState& st, Rng& r) {
    return acd_step(ebm, gen, inf, batch, cfg, st, r);
  });
}

std::vector<AdversarialStep> fit_triangle(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                                          std::span<const Tensor> data, const AdversarialConfig& cfg, Rng& rng,
                                          const AdversarialCallback& on_iter) {
  check_pair(gen, inf, "fit_triangle");
  return adversarial_loop(data, cfg, rng, on_iter, [&](std::span<const Tensor> batch, AdversarialState& st, Rng& r) {
    return triangle_step(ebm, gen, inf, batch, cfg, st, r);
  });
}

// --- cooperative learning ------------------------------------------------------------

std::vector<Tensor> generator_samples(const GeneratorModel& gen, std::size_t n, Rng& rng, bool noise) {
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor h = rng.normal_tensor(gen.latent_shape);
    out.push_back(noise ? generator_decode(gen, h, rng) : generator_decode(gen, h));
  }
  return out;
}

std::vector<CoopIteration> coop_fit(DeepEnergyModel& ebm, GeneratorModel& gen, std::span<const Tensor> data,
                                    const LangevinConfig& lang, const CoopConfig& cfg, Rng& rng,
                                    const std::function<void(const CoopIteration&, std::span<const Tensor>)>& on_iter) {
  if (data.empty()) throw ShapeError("coop_fit", "empty data");
  if (cfg.iterations < 1 || cfg.synth == 0 || cfg.batch_size == 0)
    throw ConfigError("coop_fit", "iterations, synth and batch_size must be positive");
  lang.validate();
  if (cfg.rigorous) cfg.infer_lang.validate();
  Optimizer opt_theta(cfg.optimizer), opt_alpha(cfg.optimizer);
  const bool gen_batched = cfg.batched && gen.batchable;
  std::vector<CoopIteration> log;
  for (int it = 0; it < cfg.iterations; ++it) {
    Rng ir = rng.split(static_cast<std::uint64_t>(it));
    auto batch = draw_batch(data, cfg.batch_size, ir);
    std::vector<Tensor> latents, drafts;
    for (std::size_t i = 0; i < cfg.synth; ++i) {
      latents.push_back(ir.normal_tensor(gen.latent_shape));
      drafts.push_back(cfg.decoder_noise ? generator_decode(gen, latents.back(), ir)
                                         : generator_decode(gen, latents.back()));
    }
    CoopIteration row;
    row.iteration = it + 1;
    auto revised = ebm_synthesize(ebm, std::move(drafts), lang, cfg.batched, ir, &row.diverged);
    row.mean_u_data = mean_energy(ebm, batch, cfg.batched);
    row.mean_u_synth = mean_energy(ebm, revised, cfg.batched);
    row.energy_gap = row.mean_u_data - row.mean_u_synth;

    auto update_theta = [&] {
      if (cfg.freeze_ebm) return;
      auto dir = ebm_update_direction(ebm, batch, revised, cfg.batched);
      opt_theta.step(ebm.score.params(), negated(std::move(dir)), cfg.lr_theta);
    };
    auto update_alpha = [&] {
      if (cfg.rigorous) infer_latents(gen, revised, latents, cfg.infer_lang, ir.split("infer"), gen_batched);
      row.recon_error = reconstruction_error(gen, revised, latents);
      opt_alpha.step(gen.decoder.params(), decoder_loss_grads(gen, revised, latents, gen_batched), cfg.lr_alpha);
    };
    if (cfg.alpha_first) {
      update_alpha();
      update_theta();
    } else {
      update_theta();
      update_alpha();
    }
    if (on_iter) on_iter(row, revised);
    log.push_back(row);
  }
  return log;
}

std::vector<double> nearest_center_fractions(std::span<const Tensor> samples, std::span<const Tensor> centers) {
  if (centers.empty() || samples.empty()) throw ShapeError("mode_coverage", "need samples and centres");
  std::vector<double> frac(centers.size(), 0.0);
  for (const auto& x : samples) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const double dd = (x - centers[k]).squared_norm();
      if (dd < bd) {
        bd = dd;
        best = k;
      }
    }
    frac[best] += 1.0 / static_cast<double>(samples.size());
  }
  return frac;
}

}  // namespace modelzoo
