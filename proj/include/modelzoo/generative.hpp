#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modelzoo/mcmc.hpp"
#include "modelzoo/network.hpp"
#include "modelzoo/optim.hpp"
#include "modelzoo/rng.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

// Rows of the matrix are the (flattened) examples.
Eigen::MatrixXd to_matrix(std::span<const Tensor> data);
std::vector<Tensor> from_matrix(const Eigen::MatrixXd& rows);

// Largest principal angle, in degrees, between the column spans of a and b.
double principal_angle_deg(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// --- factor analysis -------------------------------------------------------

struct FactorAnalysisModel {
  Eigen::MatrixXd W;  // p x d
  double sigma2 = 1.0;

  void validate() const;
};

struct EmConfig {
  int max_iters = 500;
  double tolerance = 1e-10;  // stop once the log-likelihood gain falls below this
  double sigma2_floor = 1e-8;
};

struct FaFit {
  FactorAnalysisModel model;
  std::vector<double> log_likelihood;  // per example, one entry per EM step
  bool floored = false;
};

// Exact marginal log-likelihood per example of centered data with second
// moment S under X ~ N(0, WW^T + sigma2 I).
double fa_log_likelihood(const FactorAnalysisModel& model, const Eigen::MatrixXd& S);
double fa_log_likelihood(const FactorAnalysisModel& model, std::span<const Tensor> data);

FaFit fit_factor_analysis(std::span<const Tensor> data, std::size_t d, const EmConfig& cfg, Rng& rng);
// EM from a given starting point.
FaFit fit_factor_analysis_from(const Eigen::MatrixXd& S, FactorAnalysisModel init, const EmConfig& cfg);

struct GaussianPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

GaussianPosterior fa_posterior(const FactorAnalysisModel& model, const Tensor& x);

// --- sparse coding ---------------------------------------------------------

struct SparseCoder {
  Eigen::MatrixXd W;  // p x d, unit-norm columns
  double lambda = 0.1;

  void validate() const;
  double objective(const Eigen::VectorXd& x, const Eigen::VectorXd& h) const;
};

// ISTA from h = 0 (or from `warm`) with step 1 / (2 ||W||_2^2). Appends the
// objective after each iteration to `trace` when given; returns the best
// iterate.
Eigen::VectorXd sparse_infer(const SparseCoder& coder, const Eigen::VectorXd& x, int iters = 500,
                             const Eigen::VectorXd* warm = nullptr, std::vector<double>* trace = nullptr);

struct SparseTrainConfig {
  int epochs = 50;
  int infer_iters = 200;
};

struct SparseFit {
  SparseCoder coder;
  std::vector<double> objective;  // summed over examples, after each alternation
  std::size_t dead_resets = 0;
  Eigen::MatrixXd codes;  // d x n
};

SparseFit fit_sparse_coding(std::span<const Tensor> data, std::size_t d, double lambda,
                            const SparseTrainConfig& cfg, Rng& rng);

// --- ICA, NMF, masked matrix factorization -----------------------------------

enum class LinearVariant { kIca, kNmf, kMaskedMf };
LinearVariant parse_linear_variant(const std::string& name);
const char* linear_variant_name(LinearVariant v);

struct IcaConfig {
  int iters = 300;
  double lr = 0.1;
};

struct IcaFit {
  Eigen::MatrixXd A;  // unmixing, sources = A x
  std::vector<double> log_likelihood;  // per example
  std::size_t halvings = 0;
};

// Log-likelihood per example with independent logistic sources.
double ica_log_likelihood(const Eigen::MatrixXd& A, const Eigen::MatrixXd& X);
IcaFit fit_ica(std::span<const Tensor> data, const IcaConfig& cfg);
// Amari-style error of P = A_hat * W_true: 0 iff P is a scaled permutation.
double amari_error(const Eigen::MatrixXd& P);

struct FactorizeConfig {
  std::size_t rank = 2;
  int iters = 500;
};

struct Factorization {
  Eigen::MatrixXd W;  // p x rank
  Eigen::MatrixXd H;  // rank x n
  std::vector<double> objective;
};

// X is p x n (columns are examples).
Factorization fit_nmf(const Eigen::MatrixXd& X, const FactorizeConfig& cfg, Rng& rng);
// mask(i, j) != 0 marks observed entries.
Factorization fit_masked_mf(const Eigen::MatrixXd& X, const Eigen::MatrixXd& mask,
                            const FactorizeConfig& cfg, Rng& rng);

// --- RBM -------------------------------------------------------------------

enum class RbmVisible { kBinary, kGaussian };

struct RbmModel {
  Eigen::MatrixXd W;  // p x d
  Eigen::VectorXd b;  // visible bias
  Eigen::VectorXd c;  // hidden bias
  RbmVisible visible = RbmVisible::kBinary;
  double sigma2 = 1.0;

  static RbmModel zeros(std::size_t p, std::size_t d, RbmVisible visible = RbmVisible::kBinary);
  std::size_t p() const { return static_cast<std::size_t>(W.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(W.cols()); }
  void validate() const;
};

inline constexpr std::size_t kRbmExactBound = 24;

Eigen::VectorXd rbm_hidden_probs(const RbmModel& m, const Eigen::VectorXd& x);
// Binary: Pr(x_j = 1 | h). Gaussian: the conditional mean b + W h.
Eigen::VectorXd rbm_visible_mean(const RbmModel& m, const Eigen::VectorXd& h);

struct GibbsState {
  Eigen::VectorXd x;
  Eigen::VectorXd h;
};

// One sweep: h ~ p(h|x), then x ~ p(x|h).
GibbsState rbm_gibbs_step(const RbmModel& m, const Eigen::VectorXd& x, Rng& rng);

// Unnormalized log p(x, h) and the hidden-summed log p(x).
double rbm_log_joint(const RbmModel& m, const Eigen::VectorXd& x, const Eigen::VectorXd& h);
double rbm_log_marginal_unnorm(const RbmModel& m, const Eigen::VectorXd& x);
double rbm_exact_logz(const RbmModel& m);

struct RbmGradient {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
  Eigen::VectorXd c;

  double dot(const RbmGradient& o) const;
  double norm() const { return std::sqrt(dot(*this)); }
};

// Data-minus-model expectations of (x h^T, x, h): the exact log-likelihood
// gradient per example. Binary visibles only.
RbmGradient rbm_exact_gradient(const RbmModel& m, const Eigen::MatrixXd& data);
RbmGradient rbm_data_expectations(const RbmModel& m, const Eigen::MatrixXd& data);
RbmGradient rbm_model_expectations(const RbmModel& m);
RbmGradient rbm_cd_gradient(const RbmModel& m, const Eigen::MatrixXd& data, int k, Rng& rng);
double rbm_log_likelihood(const RbmModel& m, const Eigen::MatrixXd& data);

enum class RbmFitMethod { kExact, kCd };

struct RbmFitConfig {
  RbmFitMethod method = RbmFitMethod::kExact;
  int k = 1;
  int iters = 2000;
  double lr = 0.1;
  double tolerance = 1e-6;  // exact mode stops when the max-abs gradient is below this
};

struct RbmFit {
  RbmModel model;
  std::vector<double> grad_norm;
  int iterations = 0;
};

// Rows of `data` are visible vectors.
RbmFit fit_rbm(const Eigen::MatrixXd& data, RbmModel init, const RbmFitConfig& cfg, Rng& rng);

// --- deep generator ----------------------------------------------------------

struct GeneratorModel {
  Network decoder;
  Shape latent_shape;
  double sigma2 = 0.25;
  bool batchable = true;  // decoder accepts a stacked [n, d] batch

  std::size_t latent_dim() const { return shape_size(latent_shape); }
};

// Linear decoder g(h) = W h (bias zero).
GeneratorModel linear_generator(const Eigen::MatrixXd& W, double sigma2);
GeneratorModel mlp_generator(std::size_t d, std::vector<std::size_t> hidden, std::size_t p,
                             Rng& rng, double sigma2 = 0.25, Activation act = Activation::kTanh);
GeneratorModel conv_generator(const ConvGeneratorSpec& spec, Rng& rng, double sigma2 = 0.25);

Tensor generator_decode(const GeneratorModel& gen, const Tensor& h);
Tensor generator_decode(const GeneratorModel& gen, const Tensor& h, Rng& rng);

// Energy of h given x: ||x - g(h)||^2 / (2 sigma2) + ||h||^2 / 2, with its
// gradient J^T (g(h) - x) / sigma2 + h.
EnergyGrad latent_energy(const GeneratorModel& gen, const Tensor& x, const Tensor& h);

// Langevin on the latent posterior from `init` (a prior draw when empty).
// A diverged chain restarts from a prior draw; `resets` counts them.
Tensor infer_latent(const GeneratorModel& gen, const Tensor& x, const LangevinConfig& lang, Rng& rng,
                    const std::optional<Tensor>& init = std::nullopt, std::size_t* resets = nullptr);

// All examples at once; latents are updated in place. Chain i uses rng.split(i).
// `batched` evaluates the decoder on the stacked batch (batchable decoders only).
std::size_t infer_latents(const GeneratorModel& gen, std::span<const Tensor> data,
                          std::vector<Tensor>& latents, const LangevinConfig& lang, const Rng& rng,
                          bool batched);

struct AbpConfig {
  int epochs = 100;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::size_t batch_size = 0;  // 0: full batch
  int cold_restart_every = 50;  // 0 disables
  bool batched = true;
};

struct AbpEpoch {
  int epoch = 0;
  double recon_error = 0.0;  // mean squared error per coordinate
  double latent_norm = 0.0;  // mean ||h_i||
  std::size_t resets = 0;
  bool cold_restart = false;
};

// Mean over the batch of the alpha-gradient of ||x - g(h)||^2 / (2 sigma2).
std::vector<Tensor> decoder_loss_grads(const GeneratorModel& gen, std::span<const Tensor> data,
                                       std::span<const Tensor> latents, bool batched);

std::vector<AbpEpoch> fit_generator_abp(GeneratorModel& gen, std::span<const Tensor> data,
                                        std::vector<Tensor>& latents, const LangevinConfig& lang,
                                        const AbpConfig& cfg, Rng& rng,
                                        const std::function<void(const AbpEpoch&)>& on_epoch = {});

double reconstruction_error(const GeneratorModel& gen, std::span<const Tensor> data,
                            std::span<const Tensor> latents);

}  // namespace modelzoo
