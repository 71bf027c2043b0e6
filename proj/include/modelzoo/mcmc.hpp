#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "modelzoo/rng.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

/// Langevin sampler settings. `noise_scale` multiplies the injected noise; 0
/// gives the zero-temperature limit (plain gradient descent on the energy).
struct LangevinConfig {
  double step_size = 0.3;
  int steps = 30;
  bool mh_correct = false;
  std::uint64_t rng_seed = 0;
  double noise_scale = 1.0;

  void validate() const;

  static LangevinConfig multigrid_default() { return {0.3, 30, false, 0, 1.0}; }
  static LangevinConfig latent_inference_default() { return {0.1, 10, false, 0, 1.0}; }
};

// A chain is flagged diverged once any coordinate exceeds this magnitude or
// the gradient stops being finite.
inline constexpr double kDivergenceBound = 1e6;

struct EnergyGrad {
  double energy = 0.0;
  Tensor grad;
};
using EnergyFn = std::function<EnergyGrad(const Tensor&)>;

struct ChainState {
  Tensor point;
  double energy = 0.0;
  Tensor grad;
  std::size_t age = 0;
  std::size_t accepted = 0;
  bool diverged = false;
};

ChainState init_chain(Tensor point, const EnergyFn& energy);

// X' = X - (s^2/2) dU/dX + s * noise_scale * eps. With mh_correct the move is
// accepted with the Metropolis-Hastings ratio of the asymmetric Gaussian
// proposal.
ChainState langevin_step(ChainState state, const EnergyFn& energy, const LangevinConfig& cfg,
                         Rng& rng);

// Runs cfg.steps steps from every init. Chain i draws from rng.split(i), so
// results do not depend on scheduling. Parallel over chains.
std::vector<ChainState> run_chains(std::span<const Tensor> inits, const EnergyFn& energy,
                                   const LangevinConfig& cfg, const Rng& rng);
std::vector<ChainState> run_chains_serial(std::span<const Tensor> inits, const EnergyFn& energy,
                                          const LangevinConfig& cfg, const Rng& rng);

// Batched variant: the rows of `inits` are chains and the energy callable
// evaluates all rows in one call, filling per-row energies and gradients.
using BatchEnergyFn =
    std::function<void(const Tensor& points, std::vector<double>& energies, Tensor& grads)>;

struct ChainBatch {
  Tensor points;
  std::vector<double> energies;
  std::vector<std::size_t> accepted;
  std::vector<bool> diverged;
};

ChainBatch run_chains_batched(const Tensor& inits, const BatchEnergyFn& energy,
                              const LangevinConfig& cfg, const Rng& rng);

struct TraceRow {
  std::size_t step = 0;
  double energy = 0.0;
  Tensor point;
};

std::vector<TraceRow> run_chain_traced(const Tensor& init, const EnergyFn& energy,
                                       const LangevinConfig& cfg, Rng& rng);
// CSV with header step,energy,x0,x1,...
void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows);

enum class InitMode { kCold, kCd, kPersistent, kGeneratorInit };
InitMode parse_init_mode(const std::string& name);
const char* init_mode_name(InitMode mode);

/// Source of chain initializations for the training loops.
///
/// cold: draws from the reference N(0, sigma2 I). cd: copies of the observed
/// batch. persistent: entries stored by the previous sampling phase; an empty
/// pool falls back to a cold start and `fell_back_to_cold()` reports it.
/// generator-init: decoded draws from the supplied sampler.
class ChainPool {
 public:
  using Sampler = std::function<Tensor(Rng&)>;

  ChainPool(InitMode mode, Shape point_shape, double reference_sigma2 = 1.0);

  std::vector<Tensor> draw(std::size_t n, std::span<const Tensor> observed, Rng& rng,
                           const Sampler& generator = {});
  void store(std::vector<Tensor> samples);

  InitMode mode() const { return mode_; }
  bool fell_back_to_cold() const { return fell_back_; }
  const std::vector<Tensor>& pool() const { return pool_; }
  std::vector<Tensor> cold(std::size_t n, Rng& rng) const;

 private:
  InitMode mode_;
  Shape shape_;
  double sigma2_;
  std::vector<Tensor> pool_;
  std::size_t cursor_ = 0;
  bool fell_back_ = false;
};

}  // namespace modelzoo
