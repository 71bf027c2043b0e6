#include "modelzoo/discriminative.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "modelzoo/error.hpp"
#include "modelzoo/oracle.hpp"

namespace modelzoo {

namespace {

double log_sigmoid(double t) { return t >= 0.0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t)); }

double sigmoid(double t) { return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }

}  // namespace

// --- logistic regression -----------------------------------------------------

LogisticFit fit_logistic(std::span<const Tensor> features, std::span<const int> labels, const LogisticConfig& cfg) {
  std::vector<double> ones(features.size(), 1.0);
  return fit_logistic(features, labels, ones, cfg);
}

LogisticFit fit_logistic(std::span<const Tensor> features, std::span<const int> labels,
                         std::span<const double> weights, const LogisticConfig& cfg) {
  const std::size_t n = features.size();
  if (n == 0 || labels.size() != n || weights.size() != n)
    throw ShapeError("fit_logistic", "features, labels and weights must have one entry per example");
  const std::size_t d = features[0].size();
  const auto D = static_cast<Eigen::Index>(d + 1);
  Eigen::MatrixXd Z(static_cast<Eigen::Index>(n), D);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n)), w(static_cast<Eigen::Index>(n));
  double wpos = 0.0, wneg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (features[i].size() != d) throw ShapeError("fit_logistic", "feature vectors differ in length");
    if (labels[i] != 1 && labels[i] != -1) throw ConfigError("fit_logistic", "labels must be +1 or -1");
    if (!(weights[i] >= 0.0)) throw ConfigError("fit_logistic", "weights must be nonnegative");
    for (std::size_t j = 0; j < d; ++j) Z(r, static_cast<Eigen::Index>(j)) = features[i][j];
    Z(r, D - 1) = 1.0;
    y(r) = labels[i];
    w(r) = weights[i];
    (labels[i] > 0 ? wpos : wneg) += weights[i];
  }
  if (!Z.allFinite()) throw NumericError("fit_logistic", "non-finite features");
  if (wpos <= 0.0 || wneg <= 0.0) throw ConfigError("fit_logistic", "both classes must be present");
  w /= (wpos + wneg);
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(D, cfg.ridge);
  penalty(D - 1) = 0.0;

  auto objective = [&](const Eigen::VectorXd& beta) {
    const Eigen::VectorXd s = Z * beta;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < s.size(); ++i) acc += w(i) * log_sigmoid(y(i) * s(i));
    return acc - 0.5 * beta.dot(penalty.cwiseProduct(beta));
  };

  LogisticFit fit;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(D);
  double value = objective(beta);
  fit.log_likelihood.push_back(value);
  for (int it = 0; it < cfg.max_iters; ++it) {
    const Eigen::VectorXd s = Z * beta;
    Eigen::VectorXd r(s.size()), curv(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      const double p = sigmoid(s(i));
      r(i) = w(i) * ((y(i) > 0 ? 1.0 : 0.0) - p);
      curv(i) = w(i) * p * (1.0 - p);
    }
    const Eigen::VectorXd g = Z.transpose() * r - penalty.cwiseProduct(beta);
    fit.grad_norm = g.cwiseAbs().maxCoeff();
    if (fit.grad_norm < cfg.tolerance) {
      // A strictly separating score has no finite unpenalized optimum; the
      // gradient just decays exponentially along the ray.
      if (cfg.ridge == 0.0 && (y.array() * s.array()).minCoeff() > 0.0) {
        fit.separable = true;
        break;
      }
      fit.converged = true;
      break;
    }
    Eigen::MatrixXd H = Z.transpose() * curv.asDiagonal() * Z;
    H.diagonal() += penalty;
    Eigen::VectorXd dir = H.ldlt().solve(g);
    if (!dir.allFinite() || dir.dot(g) <= 0.0) dir = g;
    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      Eigen::VectorXd trial = beta + step * dir;
      const double v = objective(trial);
      if (v >= value + 1e-4 * step * g.dot(dir)) {
        beta = std::move(trial);
        value = v;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    fit.log_likelihood.push_back(value);
    if (beta.head(D - 1).norm() > cfg.separable_bound) {
      fit.separable = true;
      break;
    }
    if (!moved) break;
  }
  fit.theta = Tensor({d}, std::vector<double>(beta.data(), beta.data() + d));
  fit.b = beta(D - 1);
  return fit;
}

double logistic_score(const LogisticFit& fit, const Tensor& features) { return fit.theta.dot(features) + fit.b; }

// --- classifiers ---------------------------------------------------------------

void Classifier::validate() const {
  if (bias.size() < 2) throw ConfigError("classifier", "need at least two categories");
  if (bias[0] != 0.0) throw ConfigError("classifier", "category 0 must have zero bias");
  if (map) {
    if (theta.size() != bias.size()) throw ShapeError("classifier", "one parameter vector per category required");
    for (const auto& t : theta)
      if (t.size() != map->dim()) throw ShapeError("classifier", "parameter length differs from the feature map");
    if (theta[0].max_abs() != 0.0) throw ConfigError("classifier", "category 0 must have zero parameters");
  } else if (score.size() != bias.size()) {
    throw ShapeError("classifier", "one score function per category required");
  }
}

std::vector<double> Classifier::logits(const Tensor& x) const {
  std::vector<double> out(bias.size(), 0.0);
  if (map) {
    const Tensor h = (*map)(x);
    for (std::size_t k = 1; k < out.size(); ++k) out[k] = theta[k].dot(h) + bias[k];
  } else {
    for (std::size_t k = 1; k < out.size(); ++k) out[k] = score[k](x) + bias[k];
  }
  return out;
}

Classifier linear_classifier(FeatureMap map, std::vector<Tensor> theta, std::vector<double> bias) {
  Classifier c;
  c.map = std::move(map);
  c.theta = std::move(theta);
  c.bias = std::move(bias);
  c.validate();
  return c;
}

Classifier general_classifier(std::vector<ScoreFn> score, std::vector<double> bias) {
  Classifier c;
  c.score = std::move(score);
  c.bias = std::move(bias);
  c.validate();
  return c;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::exp(logits[k] - m);
  const double z = compensated_sum(p);
  for (auto& v : p) v /= z;
  return p;
}

std::vector<double> classifier_predict(const Classifier& clf, const Tensor& x) {
  const auto l = clf.logits(x);
  for (double v : l)
    if (!std::isfinite(v)) throw NumericError("classifier_predict", "non-finite score");
  return softmax(l);
}

std::size_t classifier_argmax(const Classifier& clf, const Tensor& x) {
  const auto l = clf.logits(x);
  return static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
}

double classifier_accuracy(const Classifier& clf, std::span<const Tensor> data, std::span<const std::size_t> labels) {
  if (data.size() != labels.size() || data.empty()) throw ShapeError("classifier_accuracy", "one label per example required");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += classifier_argmax(clf, data[i]) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// --- softmax networks ------------------------------------------------------------

Classifier SoftmaxFit::classifier() const {
  std::shared_ptr<const Network> shared = net;
  // Logit k minus logit 0 keeps the category-0 convention.
  const std::size_t K = classes;
  std::vector<ScoreFn> score(K);
  for (std::size_t k = 1; k < K; ++k)
    score[k] = [shared, k](const Tensor& x) {
      const Tensor out = shared->forward(x);
      return out[k] - out[0];
    };
  return general_classifier(std::move(score), std::vector<double>(K, 0.0));
}

namespace {

struct BatchLoss {
  double loss = 0.0;
  std::size_t hits = 0;
};

BatchLoss softmax_batch(const Network& net, const Tensor& X, std::span<const std::size_t> y,
                        std::vector<Tensor>* grads) {
  const std::size_t B = y.size();
  BatchLoss out;
  auto seed_of = [&](const Tensor& logits) {
    const std::size_t K = logits.size() / B;
    Tensor seed(logits.shape());
    for (std::size_t i = 0; i < B; ++i) {
      std::vector<double> row(logits.data() + i * K, logits.data() + (i + 1) * K);
      const auto p = softmax(row);
      out.loss -= std::log(std::max(p[y[i]], std::numeric_limits<double>::min()));
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      out.hits += best == y[i];
      for (std::size_t k = 0; k < K; ++k) seed[i * K + k] = (p[k] - (k == y[i] ? 1.0 : 0.0)) / static_cast<double>(B);
    }
    return seed;
  };
  if (grads) {
    auto b = net.backward_with(X, seed_of);
    *grads = std::move(b.grad_params);
  } else {
    seed_of(net.forward(X));
  }
  out.loss /= static_cast<double>(B);
  return out;
}

}  // namespace

SoftmaxFit fit_softmax_net(std::span<const Tensor> data, std::span<const std::size_t> labels, Network net,
                           const SoftmaxTrainConfig& cfg, Rng& rng,
                           const std::function<void(const SoftmaxEpoch&)>& on_epoch) {
  if (data.empty() || data.size() != labels.size()) throw ShapeError("fit_softmax_net", "one label per example required");
  const std::size_t n = data.size();
  const Tensor Xall = stack(data);
  const std::size_t K = net.forward(data[0]).size();
  if (K < 2) throw ConfigError("fit_softmax_net", "network must output at least two scores");
  for (auto l : labels)
    if (l >= K) throw ConfigError("fit_softmax_net", "label " + std::to_string(l) + " outside 0.." + std::to_string(K - 1));
  const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  SoftmaxFit fit;
  Optimizer opt(cfg.optimizer);
  double lr = cfg.lr;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  int failures = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto saved = net.params();
    const Optimizer saved_opt = opt;
    if (bs < n)
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    bool bad = false;
    for (std::size_t start = 0; start < n && !bad; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      std::vector<Tensor> xb;
      std::vector<std::size_t> yb;
      for (std::size_t k = start; k < stop; ++k) {
        xb.push_back(data[order[k]]);
        yb.push_back(labels[order[k]]);
      }
      std::vector<Tensor> grads;
      auto bl = softmax_batch(net, stack(xb), yb, &grads);
      if (!std::isfinite(bl.loss)) {
        bad = true;
        break;
      }
      opt.step(net.params(), grads, lr);
    }
    BatchLoss total{};
    if (!bad) {
      total = softmax_batch(net, Xall, labels, nullptr);
      bad = !std::isfinite(total.loss);
    }
    if (bad) {
      if (++failures >= 3) throw NumericError("fit_softmax_net", "loss stayed non-finite after three learning-rate halvings");
      net.params() = saved;
      opt = saved_opt;
      lr *= 0.5;
      ++fit.lr_halvings;
      --epoch;
      continue;
    }
    SoftmaxEpoch row{epoch, total.loss, static_cast<double>(total.hits) / static_cast<double>(n)};
    if (on_epoch) on_epoch(row);
    fit.log.push_back(row);
  }
  fit.net = std::make_shared<Network>(std::move(net));
  fit.classes = K;
  return fit;
}

// --- Bayes-rule correspondence ---------------------------------------------------

namespace {

void check_priors(std::span<const double> priors, std::size_t K) {
  if (priors.size() != K) throw ShapeError("bayes_rule", "one prior per category required");
  double s = 0.0;
  for (double p : priors) {
    if (!(p > 0.0)) throw ConfigError("bayes_rule", "priors must be positive");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-12) throw ConfigError("bayes_rule", "priors must sum to 1, got " + std::to_string(s));
}

}  // namespace

Classifier classifier_from_descriptive(std::span<const LinearDescriptiveModel> models, std::span<const double> priors) {
  const std::size_t K = models.size();
  if (K < 2) throw ConfigError("classifier_from_descriptive", "need at least two class models");
  check_priors(priors, K);
  const std::size_t dim = models[0].theta.size();
  bool opaque = false;
  std::vector<Tensor> theta;
  std::vector<double> bias;
  const double lz0 = models[0].log_z.value_or(0.0);
  for (std::size_t k = 0; k < K; ++k) {
    if (models[k].theta.size() != dim) throw ShapeError("classifier_from_descriptive", "class models differ in feature dimension");
    if (!models[k].log_z) opaque = true;
    theta.push_back(models[k].theta - models[0].theta);
    bias.push_back(k == 0 ? 0.0 : std::log(priors[k] / priors[0]) - models[k].log_z.value_or(0.0) + lz0);
  }
  Classifier c = linear_classifier(models[0].map, std::move(theta), std::move(bias));
  c.opaque_offsets = opaque;
  return c;
}

std::vector<LinearDescriptiveModel> descriptive_from_classifier(const Classifier& clf, const Reference& reference,
                                                                std::span<const double> priors) {
  clf.validate();
  if (!clf.map) throw ConfigError("descriptive_from_classifier", "needs a classifier with linear scores");
  check_priors(priors, clf.classes());
  std::vector<LinearDescriptiveModel> out;
  for (std::size_t k = 0; k < clf.classes(); ++k) {
    std::optional<double> lz;
    if (!clf.opaque_offsets) lz = k == 0 ? 0.0 : std::log(priors[k] / priors[0]) - clf.bias[k];
    out.push_back({clf.theta[k], *clf.map, reference, lz});
  }
  return out;
}

}  // namespace modelzoo
