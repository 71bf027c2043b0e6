#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "modelzoo/descriptive.hpp"
#include "modelzoo/network.hpp"
#include "modelzoo/optim.hpp"
#include "modelzoo/rng.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

// --- logistic regression -----------------------------------------------------

struct LogisticConfig {
  int max_iters = 200;
  double tolerance = 1e-6;      // on the max-abs gradient of the mean log-likelihood
  double ridge = 0.0;           // penalty ridge/2 ||theta||^2, intercept excluded
  double separable_bound = 1e3;
};

struct LogisticFit {
  Tensor theta;
  double b = 0.0;
  std::vector<double> log_likelihood;  // weighted mean, penalty included
  double grad_norm = 0.0;
  bool converged = false;
  bool separable = false;  // optimum at infinity: strict separation or ||theta|| past the bound
};

// Labels are +1 / -1. Newton directions inside a backtracking ascent on the
// concave log-likelihood.
LogisticFit fit_logistic(std::span<const Tensor> features, std::span<const int> labels,
                         const LogisticConfig& cfg = {});
// Per-example nonnegative weights.
LogisticFit fit_logistic(std::span<const Tensor> features, std::span<const int> labels,
                         std::span<const double> weights, const LogisticConfig& cfg);

double logistic_score(const LogisticFit& fit, const Tensor& features);

// --- classifiers ---------------------------------------------------------------

using ScoreFn = std::function<double(const Tensor&)>;

/// K-category classifier Pr(k | x) proportional to exp(f_k(x) + b_k), with
/// f_0 = 0 and b_0 = 0. Scores are either linear in a feature map
/// (theta_k . h(x)) or arbitrary callables.
struct Classifier {
  std::optional<FeatureMap> map;
  std::vector<Tensor> theta;  // linear form, theta[0] = 0
  std::vector<ScoreFn> score; // general form, score[0] unused
  std::vector<double> bias;   // bias[0] = 0
  bool opaque_offsets = false; // biases lack the -log Z term

  std::size_t classes() const { return bias.size(); }
  std::vector<double> logits(const Tensor& x) const;
  void validate() const;
};

Classifier linear_classifier(FeatureMap map, std::vector<Tensor> theta, std::vector<double> bias);
Classifier general_classifier(std::vector<ScoreFn> score, std::vector<double> bias);

// Softmax with max subtraction.
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> classifier_predict(const Classifier& clf, const Tensor& x);
std::size_t classifier_argmax(const Classifier& clf, const Tensor& x);

// --- softmax networks ------------------------------------------------------------

struct SoftmaxTrainConfig {
  int epochs = 200;
  std::size_t batch_size = 0;  // 0: full batch
  double lr = 1e-2;
  OptimizerKind optimizer = OptimizerKind::kAdam;
};

struct SoftmaxEpoch {
  int epoch = 0;
  double loss = 0.0;  // mean negative log posterior of the labels
  double accuracy = 0.0;
};

struct SoftmaxFit {
  std::shared_ptr<Network> net;  // K outputs; accepts [n, in]
  std::size_t classes = 0;
  std::vector<SoftmaxEpoch> log;
  int lr_halvings = 0;

  Classifier classifier() const;
};

SoftmaxFit fit_softmax_net(std::span<const Tensor> data, std::span<const std::size_t> labels, Network net,
                           const SoftmaxTrainConfig& cfg, Rng& rng,
                           const std::function<void(const SoftmaxEpoch&)>& on_epoch = {});

double classifier_accuracy(const Classifier& clf, std::span<const Tensor> data, std::span<const std::size_t> labels);

// --- Bayes-rule correspondence ---------------------------------------------------

// Class densities p_k = exp(theta_k . h) p0 / Z_k sharing one feature map and
// reference. Biases become log(rho_k / rho_0) - log Z_k + log Z_0; a missing
// log Z leaves an opaque offset.
Classifier classifier_from_descriptive(std::span<const LinearDescriptiveModel> models,
                                       std::span<const double> priors);
// Inverse direction with class 0 equal to the (normalized) reference.
std::vector<LinearDescriptiveModel> descriptive_from_classifier(const Classifier& clf, const Reference& reference,
                                                                std::span<const double> priors);

}  // namespace modelzoo
