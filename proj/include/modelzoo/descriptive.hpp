#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modelzoo/mcmc.hpp"
#include "modelzoo/network.hpp"
#include "modelzoo/optim.hpp"
#include "modelzoo/oracle.hpp"
#include "modelzoo/rng.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

// ---------------------------------------------------------------------------
// Feature maps h(X)

enum class FeatureKind { kRawMoments, kProjectionMarginals, kFilterHistograms, kCustom };
const char* feature_kind_name(FeatureKind kind);

/// Equal-width bins on [lo, hi] with triangular (soft) assignment: a value
/// contributes max(0, 1 - |v - c_b| / width) to the bin centred at c_b.
struct SoftBins {
  double lo = -1.0;
  double hi = 1.0;
  std::size_t bins = 8;

  double width() const { return (hi - lo) / static_cast<double>(bins - 1); }
  double center(std::size_t b) const { return lo + width() * static_cast<double>(b); }
  double weight(std::size_t b, double v) const;
  double weight_derivative(std::size_t b, double v) const;
};

class FeatureMap {
 public:
  using EvalFn = std::function<Tensor(const Tensor&)>;
  using VjpFn = std::function<Tensor(const Tensor&, const Tensor&)>;

  // (x_1..x_p, x_1^2..x_p^2, ...) up to `order`, optionally led by a pinned 1.
  static FeatureMap raw_moments(std::size_t input_dim, int order, bool pin_constant = false);
  // Soft histograms of the projections W_k X, one block of bins per row.
  static FeatureMap projection_marginals(std::vector<Tensor> rows, SoftBins bins);
  // Pixel-averaged soft histograms of filter responses on [H, W, 1] images.
  static FeatureMap filter_histograms(std::vector<Tensor> filters, SoftBins bins);
  // Arbitrary map; `vjp` may be empty for maps only used on enumerated domains.
  static FeatureMap custom(std::size_t dim, EvalFn eval, VjpFn vjp = {});

  FeatureKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  bool differentiable() const { return static_cast<bool>(vjp_); }

  Tensor operator()(const Tensor& x) const;
  // d(theta . h(x)) / dx.
  Tensor vjp(const Tensor& x, const Tensor& theta) const;

  const std::vector<Tensor>& rows() const { return rows_; }
  // Returns a projection-marginal map with `row` appended.
  FeatureMap with_row(Tensor row) const;

 private:
  FeatureKind kind_ = FeatureKind::kCustom;
  std::size_t dim_ = 0;
  EvalFn eval_;
  VjpFn vjp_;
  std::vector<Tensor> rows_;
  SoftBins bins_;
};

// (1/n) sum_i h(X_i).
Tensor feature_stats(std::span<const Tensor> data, const FeatureMap& map);

// ---------------------------------------------------------------------------
// Linear descriptive model p(X) = exp(h(X)^T theta) p0(X) / Z(theta)

/// Reference density p0, unnormalized.
struct Reference {
  enum class Kind { kGaussian, kUniform, kTable };
  Kind kind = Kind::kGaussian;
  double sigma2 = 1.0;
  double lo = -1.0, hi = 1.0;       // uniform box
  std::vector<double> log_table;    // per-state log p0 on an attached domain

  static Reference gaussian(double sigma2) { return {Kind::kGaussian, sigma2, -1.0, 1.0, {}}; }
  static Reference uniform(double lo, double hi) { return {Kind::kUniform, 1.0, lo, hi, {}}; }
  static Reference table(std::vector<double> log_p0) {
    return {Kind::kTable, 1.0, 0.0, 0.0, std::move(log_p0)};
  }

  double log_density(const Tensor& x) const;
  // Gradient of log p0; zero for uniform.
  Tensor grad_log_density(const Tensor& x) const;
  std::vector<double> tabulate(const Domain& domain) const;
};

struct LinearDescriptiveModel {
  Tensor theta;
  FeatureMap map;
  Reference reference;
  std::optional<double> log_z;

  double unnormalized_log_density(const Tensor& x) const;
  EnergyGrad energy(const Tensor& x) const;  // U = -log of the unnormalized density
};

struct ExactFitConfig {
  int max_iters = 500;
  double tolerance = 1e-10;   // on the sup-norm moment gap
  bool newton = true;         // Newton direction (covariance preconditioned)
};

struct ExactFit {
  LinearDescriptiveModel model;
  std::vector<double> log_likelihood;  // per iteration, per-example
  double moment_gap = 0.0;
  int iterations = 0;
};

// Tabulated features h(s) for every domain state, row-major [states, d].
std::vector<double> feature_table(const FeatureMap& map, const Domain& domain);

// Exact moments E_theta[h] on the domain.
Tensor exact_moments(const Tensor& theta, std::span<const double> h_table,
                     std::span<const double> log_p0, const Domain& domain);
double exact_log_z(const Tensor& theta, std::span<const double> h_table,
                   std::span<const double> log_p0, const Domain& domain);

// Maximizes theta . hbar - log Z(theta) on the domain by ascent with
// backtracking. Throws InfeasibleError naming the coordinate when hbar_k sits
// on or outside the range of h_k over the domain.
ExactFit fit_linear_exact_moments(const Tensor& hbar, const FeatureMap& map, const Domain& domain,
                                  const Reference& reference, const ExactFitConfig& cfg = {});
ExactFit fit_linear_exact(std::span<const Tensor> data, const FeatureMap& map, const Domain& domain,
                          const Reference& reference, const ExactFitConfig& cfg = {});

// Unnormalized log density of the model at every domain state.
std::vector<double> model_log_table(const LinearDescriptiveModel& model, const Domain& domain);

struct LangevinFitConfig {
  int epochs = 200;
  std::size_t chains = 200;
  double lr = 0.1;
  long decay_every = 10;
  // Iterates averaged over the final fraction of epochs.
  double average_tail = 0.5;
};

struct LangevinFit {
  LinearDescriptiveModel model;
  std::vector<double> discrepancy;  // per epoch ||hbar - synth mean||
  int retries = 0;
};

// theta_{t+1} = theta_t + eta_t (hbar - mean h(synth)) with persistent
// Langevin chains. A diverged epoch is retried once from a cold start.
LangevinFit fit_linear_langevin(std::span<const Tensor> data, const FeatureMap& map,
                                const Reference& reference, const LangevinConfig& lang,
                                const LangevinFitConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Projection pursuit

struct PursuitResult {
  std::size_t best = 0;
  std::vector<double> discrepancy;  // L1 histogram distance per candidate
  bool converged = false;           // every candidate at zero
};

// L1 distance between normalized hard histograms of the projections.
double projection_discrepancy(std::span<const Tensor> data, std::span<const Tensor> synth,
                              const Tensor& direction, std::size_t bins);
PursuitResult pursue_projection(std::span<const Tensor> data, std::span<const Tensor> synth,
                                std::span<const Tensor> candidates, std::size_t bins = 20);

// Unit vectors at `count` equally spaced angles in [0, pi).
std::vector<Tensor> planar_directions(std::size_t count);

struct PursuitRound {
  Tensor direction;
  double discrepancy = 0.0;  // of the chosen direction before it is added
};

// Sequential pursuit in 2-D on a quadrature domain: each round picks the most
// discrepant candidate against exact model samples, adds its soft marginal
// as features and refits exactly.
std::vector<PursuitRound> sequential_pursuit(std::span<const Tensor> data, const Domain& domain,
                                             std::span<const Tensor> candidates, std::size_t rounds,
                                             SoftBins bins, std::size_t synth_count, Rng& rng);

// Draws states from a normalized log-mass table.
std::vector<std::size_t> sample_table(std::span<const double> log_mass, std::size_t n, Rng& rng);

// ---------------------------------------------------------------------------
// Deep energy model U(X) = ||X||^2 / (2 sigma2) - f_theta(X)

struct DeepEnergyModel {
  Network score;
  double sigma2 = 1.0;
};

struct EbmGrads {
  double energy = 0.0;
  Tensor grad_x;                     // X / sigma2 - df/dX
  std::vector<Tensor> grad_score;    // df/dtheta
};

EbmGrads deep_ebm_grads(const DeepEnergyModel& model, const Tensor& x);
EnergyFn ebm_energy_fn(const DeepEnergyModel& model);
// Batched energies for [n, in] inputs when the score network accepts batches.
BatchEnergyFn ebm_batch_energy_fn(const DeepEnergyModel& model);

struct EbmTrainConfig {
  int iterations = 100;
  std::size_t batch_size = 100;
  std::size_t synth_count = 100;
  double lr = 0.3;
  long decay_every = 10;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  bool batched = false;  // score network takes [n, in] batches
};

struct EbmIteration {
  int iteration = 0;
  double value = 0.0;         // mean U(synth) - mean U(data)
  double mean_u_data = 0.0;
  double mean_u_synth = 0.0;
  double update_norm = 0.0;
  std::size_t diverged = 0;
};

// n examples without replacement (all of them when n >= size).
std::vector<Tensor> draw_batch(std::span<const Tensor> data, std::size_t n, Rng& rng);
double mean_energy(const DeepEnergyModel& model, std::span<const Tensor> xs, bool batched);

// Per-example average of df/dtheta over the inputs.
std::vector<Tensor> mean_score_grads(const DeepEnergyModel& model, std::span<const Tensor> xs,
                                     bool batched);

// Ascent direction (1/n) sum df/dtheta(X_i) - (1/m) sum df/dtheta(synth_j).
std::vector<Tensor> ebm_update_direction(const DeepEnergyModel& model, std::span<const Tensor> data,
                                         std::span<const Tensor> synth, bool batched);

// Runs Langevin from `inits` and returns the final points; diverged chains are
// restarted from the pool's cold start.
std::vector<Tensor> ebm_synthesize(const DeepEnergyModel& model, std::vector<Tensor> inits,
                                   const LangevinConfig& lang, bool batched, Rng& rng,
                                   std::size_t* diverged = nullptr);

std::vector<EbmIteration> fit_deep_ebm(DeepEnergyModel& model, std::span<const Tensor> data,
                                       InitMode init_mode, const LangevinConfig& lang,
                                       const EbmTrainConfig& cfg, Rng& rng,
                                       const std::function<void(const EbmIteration&,
                                                                std::span<const Tensor>)>& on_iter = {});

// ---------------------------------------------------------------------------
// Multi-grid

// Block averages of a square [S, S, C] image at every grid size (ascending).
std::vector<Tensor> build_pyramid(const Tensor& image, std::span<const std::size_t> grids);
void check_grids(std::span<const std::size_t> grids);
Tensor block_average(const Tensor& image, std::size_t size);

// Diagnostic statistics for grid-wise discrepancy: mean intensity, an 8-bin
// soft intensity histogram and mean absolute horizontal/vertical differences.
Tensor image_diagnostics(const Tensor& image);

struct GridPyramid {
  std::vector<std::size_t> grids;          // grids[0] == 1
  std::vector<DeepEnergyModel> models;     // one per grid after the first
  std::vector<double> seed_histogram;      // normalized counts of 1x1 values
  std::size_t seed_bins = 10;              // equal-width intervals on [-1, 1]
  std::size_t channels = 1;
};

struct MultigridConfig {
  std::vector<std::size_t> grids{1, 4, 16};
  int iterations = 200;
  std::size_t batch_size = 16;
  std::size_t synth_count = 16;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double sigma2 = 1.0;
  std::size_t base_channels = 8;
};

struct MultigridIteration {
  int iteration = 0;
  std::vector<double> discrepancy;  // per model grid
  std::vector<double> value;        // per model grid
};

GridPyramid make_pyramid_models(const MultigridConfig& cfg, std::size_t channels, Rng& rng);
double sample_seed_value(const GridPyramid& pyr, Rng& rng);
// Normalized hard histogram on `bins` equal-width intervals of [-1, 1].
std::vector<double> unit_histogram(std::span<const double> values, std::size_t bins);
// Synthesizes `n` images per grid; result[g][i] is image i at grids[g].
std::vector<std::vector<Tensor>> sample_multigrid_levels(const GridPyramid& pyr, std::size_t n,
                                                         const LangevinConfig& lang, Rng& rng);
Tensor sample_multigrid(const GridPyramid& pyr, const LangevinConfig& lang, Rng& rng);
std::vector<MultigridIteration> fit_multigrid(GridPyramid& pyr, std::span<const Tensor> data,
                                              const MultigridConfig& cfg, const LangevinConfig& lang,
                                              Rng& rng);

}  // namespace modelzoo
