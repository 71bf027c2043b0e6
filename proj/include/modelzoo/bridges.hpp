#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "modelzoo/descriptive.hpp"
#include "modelzoo/discriminative.hpp"
#include "modelzoo/generative.hpp"
#include "modelzoo/mcmc.hpp"
#include "modelzoo/network.hpp"
#include "modelzoo/optim.hpp"
#include "modelzoo/oracle.hpp"
#include "modelzoo/rng.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

// --- introspective learning ------------------------------------------------------

// One round's discriminator: score theta . h(x) plus the fitted intercept,
// which stands in for -log Z of the tilt.
struct Tilt {
  Tensor theta;
  double offset = 0.0;
};

/// p_t(x) proportional to p0(x) exp(sum_s theta_s . h(x) + offset_s).
struct TiltedModel {
  FeatureMap map;
  Reference base;
  std::vector<Tilt> tilts;

  double tilt_value(const Tensor& x, std::size_t t) const;
  // Base plus the first `upto` tilts, accumulated in order.
  double log_density(const Tensor& x, std::size_t upto) const;
  double log_density(const Tensor& x) const { return log_density(x, tilts.size()); }
  EnergyGrad energy(const Tensor& x) const;
  std::vector<double> log_table(const Domain& domain) const;
};

enum class IntrospectiveMode { kExact, kLangevin };

struct IntrospectiveConfig {
  int rounds = 50;
  LogisticConfig logistic{200, 1e-9, 1e-3, 1e3};
  // Langevin mode: negatives per round and chain persistence across rounds.
  std::size_t negatives = 0;  // 0: as many as observed examples
  bool persistent = true;
};

struct IntrospectiveRound {
  int round = 0;
  double log_loss = 0.0;  // discriminator loss, ln 2 at chance
  double kl = 0.0;        // KL(P_data || p_t) after the round; exact mode only
  double theta_norm = 0.0;
  double offset = 0.0;
  bool converged = false;
};

struct IntrospectiveFit {
  TiltedModel model;
  std::vector<IntrospectiveRound> log;
  double initial_kl = 0.0;  // exact mode
  bool converged = false;
};

// Normalized counts of the data over the domain states; every example must
// coincide with a state.
std::vector<double> empirical_mass(std::span<const Tensor> data, const Domain& domain);

// Exact mode: P_data is the given mass table and negatives are p_t itself,
// so the logistic fit is a weighted fit over the domain states.
IntrospectiveFit introspective_fit_exact(std::span<const double> data_mass, const Domain& domain,
                                         const FeatureMap& map, const Reference& base,
                                         const IntrospectiveConfig& cfg);

// Langevin mode: negatives come from Langevin chains on the accumulated tilted
// energy, started from base draws. Needs a Gaussian base and a differentiable map.
IntrospectiveFit introspective_fit_langevin(
    std::span<const Tensor> data, const FeatureMap& map, const Reference& base, const LangevinConfig& lang,
    const IntrospectiveConfig& cfg, Rng& rng,
    const std::function<void(const IntrospectiveRound&, std::span<const Tensor>)>& on_round = {});

// Gaussian bumps exp(-||x - c||^2 / (2 bw^2)) around each centre.
FeatureMap rbf_feature_map(std::vector<Tensor> centers, double bandwidth);

// --- inference model and VAE -----------------------------------------------------

/// Diagonal Gaussian rho(h | x): the encoder maps [p] to [2d], means first,
/// then log-variances.
struct InferenceModel {
  Network encoder;
  std::size_t latent_dim = 0;

  struct Posterior {
    Tensor mean;
    Tensor log_var;
  };
  Posterior encode(const Tensor& x) const;
  double log_density(const Tensor& x, const Tensor& h) const;
};

InferenceModel linear_encoder(std::size_t p, std::size_t d, Rng& rng, double gain = 1.0);
InferenceModel mlp_encoder(std::size_t p, std::vector<std::size_t> hidden, std::size_t d, Rng& rng,
                           Activation act = Activation::kTanh);
// Encoder with mean A x + m and constant log-variances (a linear network).
InferenceModel affine_encoder(const Eigen::MatrixXd& A, const Eigen::VectorXd& m, const Eigen::VectorXd& log_var);

struct ElboEstimate {
  double elbo = 0.0;   // mean per example
  double recon = 0.0;  // mean E_rho[log q(x | h)]
  double kl = 0.0;     // mean KL(rho || N(0, I)), closed form
  double standard_error = 0.0;  // of the Monte Carlo reconstruction average; 0 with one draw
  double encoder_sd = 0.0;      // mean posterior standard deviation
  // Gradients of the mean ELBO.
  std::vector<Tensor> grad_decoder;
  std::vector<Tensor> grad_encoder;
  double grad_log_sigma2 = 0.0;
};

// Reparametrized estimate h = mu + sigma * eps with `mc_samples` draws per
// example. Example i uses a child stream keyed by i.
ElboEstimate vae_elbo(const GeneratorModel& gen, const InferenceModel& inf, std::span<const Tensor> data,
                      Rng& rng, std::size_t mc_samples = 1);
ElboEstimate vae_elbo(const GeneratorModel& gen, const InferenceModel& inf, std::span<const Tensor> data,
                      const Rng& stream, std::size_t mc_samples, bool with_gradients);

// ELBO of a linear decoder x = W h + b + noise, with the expectation over rho
// taken in closed form.
double linear_vae_elbo(const Eigen::MatrixXd& W, const Eigen::VectorXd& b, double sigma2, const InferenceModel& inf,
                       std::span<const Tensor> data);
// Decoder weights and bias of a linear GeneratorModel.
Eigen::MatrixXd decoder_weight(const GeneratorModel& gen);
Eigen::VectorXd decoder_bias(const GeneratorModel& gen);

struct VaeConfig {
  int epochs = 500;
  double lr = 1e-2;
  double lr_final = 1e-2;  // geometric interpolation from lr over the run
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::size_t mc_samples = 1;
  std::size_t batch_size = 0;  // 0: full batch
  bool learn_sigma2 = true;
};

struct VaeEpoch {
  int epoch = 0;
  double elbo = 0.0;
  double standard_error = 0.0;  // Monte Carlo error of the logged ELBO
  double recon = 0.0;
  double kl = 0.0;
  double sigma2 = 0.0;
  double encoder_sd = 0.0;
  bool collapse_warning = false;  // encoder sd below 1e-4
};

std::vector<VaeEpoch> fit_vae(GeneratorModel& gen, InferenceModel& inf, std::span<const Tensor> data,
                              const VaeConfig& cfg, Rng& rng,
                              const std::function<void(const VaeEpoch&)>& on_epoch = {});

// --- adversarial contrastive divergence and the divergence triangle ----------

// Quantities on generator draws h ~ N(0, I), X = g(h) + sigma eps.
struct SleepTerms {
  std::vector<Tensor> latents;
  std::vector<Tensor> samples;
  double mean_u = 0.0;        // E[U(X)]
  double mean_log_rho = 0.0;  // E[log rho(h | X)]
  // Ascent direction of E[-U(X) + log rho(h | X)] in alpha.
  std::vector<Tensor> grad_decoder;
  // Ascent direction of E[log rho(h | X)] in phi.
  std::vector<Tensor> grad_encoder;
  // E[df/dtheta(X)].
  std::vector<Tensor> grad_score;
};

SleepTerms sleep_terms(const DeepEnergyModel& ebm, const GeneratorModel& gen, const InferenceModel& inf,
                       std::size_t n, const Rng& stream);

// Closed-form E_Q[log q(h) + log q(X | h)].
double joint_negentropy(const GeneratorModel& gen);

struct AdversarialConfig {
  int iterations = 1000;
  std::size_t batch_size = 100;
  std::size_t gen_samples = 100;
  double lr_theta = 1e-3;
  double lr_alpha = 1e-3;
  double lr_phi = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::size_t mc_samples = 1;  // triangle: reparametrized draws per example
};

// Optimizer moments and the learning-rate scale persist across cycles.
struct AdversarialState {
  Optimizer theta;
  Optimizer alpha;
  Optimizer phi;
  double lr_scale = 1.0;
  int skipped = 0;
};

struct AdversarialStep {
  int iteration = 0;
  double mean_u_data = 0.0;
  double mean_u_gen = 0.0;
  double mean_log_rho = 0.0;
  double elbo = 0.0;   // triangle only
  double value = 0.0;  // triangle objective estimate
  bool skipped = false;
};

// One minimax cycle. theta descends E_data[U] - E_gen[U]; alpha ascends
// E[-U(X) + log rho(h | X)]; phi ascends E[log rho(h | X)] on generator pairs.
AdversarialStep acd_step(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                         std::span<const Tensor> batch, const AdversarialConfig& cfg, AdversarialState& state,
                         Rng& rng);

// Triangle value KL(P_data||Q) + KL(Q||P) - KL(P_data||P), with log Z and the
// data entropy cancelled analytically.
struct TriangleTerms {
  ElboEstimate elbo;
  SleepTerms sleep;
  double mean_u_data = 0.0;
  std::vector<Tensor> grad_score_data;  // E_data[df/dtheta]
  double value = 0.0;
};

TriangleTerms triangle_terms(const DeepEnergyModel& ebm, const GeneratorModel& gen, const InferenceModel& inf,
                             std::span<const Tensor> batch, const Rng& stream, std::size_t mc_samples,
                             std::size_t gen_samples);

// theta ascends the value; alpha and phi descend it.
AdversarialStep triangle_step(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                              std::span<const Tensor> batch, const AdversarialConfig& cfg, AdversarialState& state,
                              Rng& rng);

using AdversarialCallback = std::function<void(const AdversarialStep&)>;
std::vector<AdversarialStep> fit_acd(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                                     std::span<const Tensor> data, const AdversarialConfig& cfg, Rng& rng,
                                     const AdversarialCallback& on_iter = {});
std::vector<AdversarialStep> fit_triangle(DeepEnergyModel& ebm, GeneratorModel& gen, InferenceModel& inf,
                                          std::span<const Tensor> data, const AdversarialConfig& cfg, Rng& rng,
                                          const AdversarialCallback& on_iter = {});

// --- cooperative learning --------------------------------------------------------

inline LangevinConfig coop_langevin_default() { return {0.1, 10, false, 0, 1.0}; }

struct CoopConfig {
  int iterations = 1000;
  std::size_t synth = 100;
  std::size_t batch_size = 100;
  double lr_theta = 1e-3;
  double lr_alpha = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  bool freeze_ebm = false;
  bool rigorous = false;        // regress on latents inferred from the draws
  bool alpha_first = false;     // swap the update order
  bool decoder_noise = true;    // X^ = g(h^) + sigma eps
  bool batched = true;          // networks take stacked batches
  LangevinConfig infer_lang = LangevinConfig::latent_inference_default();
};

struct CoopIteration {
  int iteration = 0;
  double mean_u_data = 0.0;
  double mean_u_synth = 0.0;
  double energy_gap = 0.0;    // mean U(data) - mean U(revised)
  double recon_error = 0.0;   // mean squared error per coordinate of g against the revised draws
  std::size_t diverged = 0;
};

std::vector<CoopIteration> coop_fit(
    DeepEnergyModel& ebm, GeneratorModel& gen, std::span<const Tensor> data, const LangevinConfig& lang,
    const CoopConfig& cfg, Rng& rng,
    const std::function<void(const CoopIteration&, std::span<const Tensor>)>& on_iter = {});

// Draws from the generator marginal (decoder noise included when requested).
std::vector<Tensor> generator_samples(const GeneratorModel& gen, std::size_t n, Rng& rng, bool noise = true);

// Fraction of samples whose nearest centre is each centre.
std::vector<double> nearest_center_fractions(std::span<const Tensor> samples, std::span<const Tensor> centers);

}  // namespace modelzoo
