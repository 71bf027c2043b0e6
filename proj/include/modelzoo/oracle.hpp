#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "modelzoo/tensor.hpp"

namespace modelzoo {

inline constexpr std::size_t kMaxEnumeratedStates = std::size_t{1} << 20;
inline constexpr std::size_t kMaxQuadratureNodes = 10000;

/// A tiny state space the oracles can sum over exactly.
///
/// Enumerated domains list distinct states with unit weight. Quadrature
/// domains hold trapezoid nodes on a uniform axis grid (1-D or a 2-D product)
/// whose weights sum to the domain volume.
class Domain {
 public:
  enum class Kind { kEnumerated, kQuadrature };

  static Domain enumerated(std::vector<Tensor> states);
  static Domain binary_cube(std::size_t bits);
  static Domain grid_1d(double lo, double hi, std::size_t nodes);
  static Domain grid_2d(double lo, double hi, std::size_t nodes_per_axis);

  Kind kind() const { return kind_; }
  std::size_t size() const { return states_.size(); }
  const Tensor& state(std::size_t i) const { return states_[i]; }
  const std::vector<Tensor>& states() const { return states_; }
  double log_weight(std::size_t i) const { return log_weights_[i]; }
  const std::vector<double>& log_weights() const { return log_weights_; }
  double volume() const;

  // Evaluates `f` at every state.
  std::vector<double> tabulate(const std::function<double(const Tensor&)>& f) const;

 private:
  Kind kind_ = Kind::kEnumerated;
  std::vector<Tensor> states_;
  std::vector<double> log_weights_;
};

// Neumaier-compensated sum.
double compensated_sum(std::span<const double> values);

// log sum_i exp(values[i]) with max shift and compensated accumulation, split
// into fixed-size blocks evaluated in parallel; the block partition does not
// depend on the thread count, so the result is reproducible.
double log_sum_exp(std::span<const double> values);
double log_sum_exp_reference(std::span<const double> values);

double brute_force_logz(std::span<const double> log_density, const Domain& domain);
double brute_force_logz(const std::function<double(const Tensor&)>& log_density,
                        const Domain& domain);

// Log of the normalized probability mass on each state (weights included).
std::vector<double> normalized_log_mass(std::span<const double> log_density, const Domain& domain);

// KL(p || q) for unnormalized log-densities tabulated on the domain. Returns
// +infinity when q vanishes where p has mass.
double exact_kl(std::span<const double> log_p, std::span<const double> log_q, const Domain& domain);
double exact_kl(const std::function<double(const Tensor&)>& log_p,
                const std::function<double(const Tensor&)>& log_q, const Domain& domain);

// Expectation of per-state values under the normalized density.
double expectation(std::span<const double> log_density, std::span<const double> values,
                   const Domain& domain);

struct FiniteDiffResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor numeric;
};

// Central differences per coordinate against `analytic_grad`. The relative
// error is |a - n| / max(|a|, |n|, floor).
FiniteDiffResult finite_diff_check(const std::function<double(const Tensor&)>& fn,
                                   const Tensor& point, const Tensor& analytic_grad,
                                   double eps = 1e-5, double floor = 1e-3);

}  // namespace modelzoo
