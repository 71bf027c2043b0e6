#include "modelzoo/mcmc.hpp"

#include <cmath>
#include <ostream>

#include "modelzoo/error.hpp"

namespace modelzoo {

void LangevinConfig::validate() const {
  if (!(step_size > 0.0)) throw ConfigError("mcmc", "step_size must be positive");
  if (steps < 1) throw ConfigError("mcmc", "steps must be at least 1");
  if (noise_scale < 0.0) throw ConfigError("mcmc", "noise_scale must be nonnegative");
}

namespace {

bool out_of_bounds(const Tensor& x) {
  for (double v : x.values())
    if (!std::isfinite(v) || std::abs(v) > kDivergenceBound) return true;
  return false;
}

// log q(to | from) up to a constant shared by both directions.
double log_proposal(const Tensor& to, const Tensor& from, const Tensor& grad_from, double s,
                    double noise) {
  const double h = 0.5 * s * s;
  const double var = s * s * noise * noise;
  double ss = 0.0;
  for (std::size_t i = 0; i < to.size(); ++i) {
    const double r = to[i] - (from[i] - h * grad_from[i]);
    ss += r * r;
  }
  return -ss / (2.0 * var);
}

}  // namespace

ChainState init_chain(Tensor point, const EnergyFn& energy) {
  ChainState s;
  auto eg = energy(point);
  s.point = std::move(point);
  s.energy = eg.energy;
  s.grad = std::move(eg.grad);
  s.diverged = !std::isfinite(s.energy) || !s.grad.all_finite() || out_of_bounds(s.point);
  return s;
}

ChainState langevin_step(ChainState state, const EnergyFn& energy, const LangevinConfig& cfg,
                         Rng& rng) {
  if (state.diverged) return state;
  const double s = cfg.step_size;
  const double h = 0.5 * s * s;
  const double sd = s * cfg.noise_scale;
  if (state.grad.size() != state.point.size()) state = init_chain(std::move(state.point), energy);
  Tensor proposal = state.point;
  for (std::size_t i = 0; i < proposal.size(); ++i)
    proposal[i] += -h * state.grad[i] + sd * rng.normal();
  ++state.age;
  if (out_of_bounds(proposal)) {
    state.diverged = true;
    return state;
  }
  auto eg = energy(proposal);
  if (!std::isfinite(eg.energy) || !eg.grad.all_finite()) {
    state.diverged = true;
    return state;
  }
  if (cfg.mh_correct && sd > 0.0) {
    const double log_ratio = -(eg.energy - state.energy) +
                             log_proposal(state.point, proposal, eg.grad, s, cfg.noise_scale) -
                             log_proposal(proposal, state.point, state.grad, s, cfg.noise_scale);
    if (std::log(rng.uniform()) >= log_ratio) return state;
  }
  state.point = std::move(proposal);
  state.energy = eg.energy;
  state.grad = std::move(eg.grad);
  ++state.accepted;
  return state;
}

std::vector<ChainState> run_chains_serial(std::span<const Tensor> inits, const EnergyFn& energy,
                                          const LangevinConfig& cfg, const Rng& rng) {
  cfg.validate();
  std::vector<ChainState> out(inits.size());
  for (std::size_t i = 0; i < inits.size(); ++i) {
    if (inits[i].shape() != inits[0].shape()) throw ShapeError("run_chains", "inits differ in shape");
    Rng stream = rng.split(i);
    ChainState s = init_chain(inits[i], energy);
    for (int t = 0; t < cfg.steps; ++t) s = langevin_step(std::move(s), energy, cfg, stream);
    out[i] = std::move(s);
  }
  return out;
}

std::vector<ChainState> run_chains(std::span<const Tensor> inits, const EnergyFn& energy,
                                   const LangevinConfig& cfg, const Rng& rng) {
  cfg.validate();
  for (const auto& x : inits)
    if (x.shape() != inits[0].shape()) throw ShapeError("run_chains", "inits differ in shape");
  std::vector<ChainState> out(inits.size());
  const auto n = static_cast<std::ptrdiff_t>(inits.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    Rng stream = rng.split(k);
    ChainState s = init_chain(inits[k], energy);
    for (int t = 0; t < cfg.steps; ++t) s = langevin_step(std::move(s), energy, cfg, stream);
    out[k] = std::move(s);
  }
  return out;
}

ChainBatch run_chains_batched(const Tensor& inits, const BatchEnergyFn& energy,
                              const LangevinConfig& cfg, const Rng& rng) {
  cfg.validate();
  if (inits.rank() < 1) throw ShapeError("run_chains_batched", "inits need a leading chain axis");
  const std::size_t n = inits.extent(0);
  const std::size_t dim = inits.size() / n;
  const double s = cfg.step_size;
  const double h = 0.5 * s * s;
  const double sd = s * cfg.noise_scale;
  const double var = s * s * cfg.noise_scale * cfg.noise_scale;

  std::vector<Rng> streams;
  streams.reserve(n);
  for (std::size_t i = 0; i < n; ++i) streams.push_back(rng.split(i));

  ChainBatch b;
  b.points = inits;
  b.accepted.assign(n, 0);
  b.diverged.assign(n, false);
  Tensor grads(inits.shape());
  energy(b.points, b.energies, grads);
  for (std::size_t i = 0; i < n; ++i) {
    bool bad = !std::isfinite(b.energies[i]);
    for (std::size_t j = 0; j < dim; ++j) {
      const double x = b.points[i * dim + j];
      bad = bad || !std::isfinite(grads[i * dim + j]) || !std::isfinite(x) ||
            std::abs(x) > kDivergenceBound;
    }
    b.diverged[i] = bad;
  }

  Tensor proposal(inits.shape());
  Tensor pgrads(inits.shape());
  std::vector<double> penergy;
  for (int t = 0; t < cfg.steps; ++t) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dim; ++j) {
        const std::size_t k = i * dim + j;
        if (b.diverged[i]) {
          proposal[k] = b.points[k];
          continue;
        }
        proposal[k] = b.points[k] + (-h * grads[k] + sd * streams[i].normal());
      }
    std::vector<bool> skip(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      if (b.diverged[i]) continue;
      for (std::size_t j = 0; j < dim; ++j) {
        const double x = proposal[i * dim + j];
        if (!std::isfinite(x) || std::abs(x) > kDivergenceBound) skip[i] = true;
      }
      if (skip[i]) {
        b.diverged[i] = true;
        for (std::size_t j = 0; j < dim; ++j) proposal[i * dim + j] = b.points[i * dim + j];
      }
    }
    energy(proposal, penergy, pgrads);
    for (std::size_t i = 0; i < n; ++i) {
      if (b.diverged[i]) continue;
      bool bad = !std::isfinite(penergy[i]);
      for (std::size_t j = 0; j < dim; ++j) bad = bad || !std::isfinite(pgrads[i * dim + j]);
      if (bad) {
        b.diverged[i] = true;
        continue;
      }
      if (cfg.mh_correct && sd > 0.0) {
        double fwd = 0.0, bwd = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          const std::size_t k = i * dim + j;
          const double rf = proposal[k] - (b.points[k] - h * grads[k]);
          const double rb = b.points[k] - (proposal[k] - h * pgrads[k]);
          fwd += rf * rf;
          bwd += rb * rb;
        }
        const double log_ratio = -(penergy[i] - b.energies[i]) + -bwd / (2.0 * var) - -fwd / (2.0 * var);
        if (std::log(streams[i].uniform()) >= log_ratio) continue;
      }
      for (std::size_t j = 0; j < dim; ++j) {
        b.points[i * dim + j] = proposal[i * dim + j];
        grads[i * dim + j] = pgrads[i * dim + j];
      }
      b.energies[i] = penergy[i];
      ++b.accepted[i];
    }
  }
  return b;
}

std::vector<TraceRow> run_chain_traced(const Tensor& init, const EnergyFn& energy,
                                       const LangevinConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<TraceRow> rows;
  ChainState s = init_chain(init, energy);
  rows.push_back({0, s.energy, s.point});
  for (int t = 0; t < cfg.steps && !s.diverged; ++t) {
    s = langevin_step(std::move(s), energy, cfg, rng);
    rows.push_back({static_cast<std::size_t>(t + 1), s.energy, s.point});
  }
  return rows;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows) {
  const std::size_t dim = rows.empty() ? 0 : rows.front().point.size();
  out << "step,energy";
  for (std::size_t j = 0; j < dim; ++j) out << ",x" << j;
  out << '\n';
  out.precision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << r.energy;
    for (double v : r.point.values()) out << ',' << v;
    out << '\n';
  }
}

InitMode parse_init_mode(const std::string& name) {
  if (name == "cold") return InitMode::kCold;
  if (name == "cd") return InitMode::kCd;
  if (name == "persistent") return InitMode::kPersistent;
  if (name == "generator-init") return InitMode::kGeneratorInit;
  throw ConfigError("mcmc", "unknown init mode '" + name + "' (cold, cd, persistent, generator-init)");
}

const char* init_mode_name(InitMode mode) {
  switch (mode) {
    case InitMode::kCold: return "cold";
    case InitMode::kCd: return "cd";
    case InitMode::kPersistent: return "persistent";
    case InitMode::kGeneratorInit: return "generator-init";
  }
  return "?";
}

ChainPool::ChainPool(InitMode mode, Shape point_shape, double reference_sigma2)
    : mode_(mode), shape_(std::move(point_shape)), sigma2_(reference_sigma2) {
  if (!(sigma2_ > 0.0)) throw ConfigError("mcmc", "reference variance must be positive");
}

std::vector<Tensor> ChainPool::cold(std::size_t n, Rng& rng) const {
  std::vector<Tensor> out;
  out.reserve(n);
  const double sd = std::sqrt(sigma2_);
  for (std::size_t i = 0; i < n; ++i) out.push_back(rng.normal_tensor(shape_, sd));
  return out;
}

std::vector<Tensor> ChainPool::draw(std::size_t n, std::span<const Tensor> observed, Rng& rng,
                                    const Sampler& generator) {
  switch (mode_) {
    case InitMode::kCold: return cold(n, rng);
    case InitMode::kCd: {
      if (observed.empty()) throw ConfigError("mcmc", "cd initialization needs an observed batch");
      std::vector<Tensor> out;
      out.reserve(n);
      for (std::size_t i = 0; i < n; ++i) out.push_back(observed[i % observed.size()]);
      return out;
    }
    case InitMode::kPersistent: {
      if (pool_.empty()) {
        fell_back_ = true;
        return cold(n, rng);
      }
      std::vector<Tensor> out;
      out.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        out.push_back(pool_[cursor_ % pool_.size()]);
        ++cursor_;
      }
      return out;
    }
    case InitMode::kGeneratorInit: {
      if (!generator) throw ConfigError("mcmc", "generator-init needs a generator sampler");
      std::vector<Tensor> out;
      out.reserve(n);
      for (std::size_t i = 0; i < n; ++i) out.push_back(generator(rng));
      return out;
    }
  }
  return {};
}

void ChainPool::store(std::vector<Tensor> samples) {
  pool_ = std::move(samples);
  cursor_ = 0;
}

}  // namespace modelzoo
