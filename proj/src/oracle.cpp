#include "modelzoo/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "modelzoo/error.hpp"

namespace modelzoo {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::size_t kBlock = 4096;

void check_size(const Domain& d) {
  if (d.kind() == Domain::Kind::kEnumerated && d.size() > kMaxEnumeratedStates)
    throw SizeError("oracle", "enumerated domain of " + std::to_string(d.size()) +
                                  " states exceeds the bound of 2^20");
  if (d.kind() == Domain::Kind::kQuadrature && d.size() > kMaxQuadratureNodes)
    throw SizeError("oracle", "quadrature grid of " + std::to_string(d.size()) +
                                  " nodes exceeds the bound of 10^4");
}

std::vector<double> trapezoid_log_weights(double lo, double hi, std::size_t n) {
  if (n < 2 || !(hi > lo)) throw SizeError("oracle", "grid needs at least 2 nodes and hi > lo");
  const double h = (hi - lo) / static_cast<double>(n - 1);
  std::vector<double> w(n, std::log(h));
  w.front() = w.back() = std::log(h / 2.0);
  return w;
}

struct Neumaier {
  double sum = 0.0, c = 0.0;
  void add(double v) {
    double t = sum + v;
    if (std::abs(sum) >= std::abs(v))
      c += (sum - t) + v;
    else
      c += (v - t) + sum;
    sum = t;
  }
  double value() const { return sum + c; }
};

}  // namespace

Domain Domain::enumerated(std::vector<Tensor> states) {
  Domain d;
  d.kind_ = Kind::kEnumerated;
  d.log_weights_.assign(states.size(), 0.0);
  d.states_ = std::move(states);
  check_size(d);
  for (std::size_t i = 0; i < d.states_.size(); ++i)
    for (std::size_t j = i + 1; j < d.states_.size() && d.states_.size() <= 4096; ++j)
      if (d.states_[i] == d.states_[j]) throw Error("oracle", "enumerated states must be distinct");
  return d;
}

Domain Domain::binary_cube(std::size_t bits) {
  if (bits > 20) throw SizeError("oracle", "binary cube of " + std::to_string(bits) + " bits exceeds 2^20");
  const std::size_t n = std::size_t{1} << bits;
  Domain d;
  d.kind_ = Kind::kEnumerated;
  d.states_.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Tensor t({bits});
    for (std::size_t b = 0; b < bits; ++b) t[b] = static_cast<double>((s >> b) & 1u);
    d.states_.push_back(std::move(t));
  }
  d.log_weights_.assign(n, 0.0);
  return d;
}

Domain Domain::grid_1d(double lo, double hi, std::size_t nodes) {
  Domain d;
  d.kind_ = Kind::kQuadrature;
  d.log_weights_ = trapezoid_log_weights(lo, hi, nodes);
  const double h = (hi - lo) / static_cast<double>(nodes - 1);
  for (std::size_t i = 0; i < nodes; ++i) d.states_.push_back(Tensor::vector({lo + h * static_cast<double>(i)}));
  check_size(d);
  return d;
}

Domain Domain::grid_2d(double lo, double hi, std::size_t n) {
  Domain d;
  d.kind_ = Kind::kQuadrature;
  auto w = trapezoid_log_weights(lo, hi, n);
  const double h = (hi - lo) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      d.states_.push_back(Tensor::vector({lo + h * static_cast<double>(i), lo + h * static_cast<double>(j)}));
      d.log_weights_.push_back(w[i] + w[j]);
    }
  check_size(d);
  return d;
}

double Domain::volume() const {
  std::vector<double> w(log_weights_.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_weights_[i]);
  return compensated_sum(w);
}

std::vector<double> Domain::tabulate(const std::function<double(const Tensor&)>& f) const {
  std::vector<double> v(states_.size());
  for (std::size_t i = 0; i < states_.size(); ++i) v[i] = f(states_[i]);
  return v;
}

double compensated_sum(std::span<const double> values) {
  Neumaier acc;
  for (double v : values) acc.add(v);
  return acc.value();
}

double log_sum_exp_reference(std::span<const double> values) {
  double m = kNegInf;
  for (double v : values) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  if (!std::isfinite(m)) return m;
  Neumaier acc;
  for (double v : values) acc.add(std::exp(v - m));
  return m + std::log(acc.value());
}

double log_sum_exp(std::span<const double> values) {
  if (values.size() <= kBlock) return log_sum_exp_reference(values);
  double m = kNegInf;
  for (double v : values) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  if (!std::isfinite(m)) return m;
  const auto blocks = static_cast<std::ptrdiff_t>((values.size() + kBlock - 1) / kBlock);
  std::vector<double> partial(static_cast<std::size_t>(blocks) * 2, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < blocks; ++b) {
    Neumaier acc;
    const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
    const std::size_t hi = std::min(values.size(), lo + kBlock);
    for (std::size_t i = lo; i < hi; ++i) acc.add(std::exp(values[i] - m));
    partial[2 * static_cast<std::size_t>(b)] = acc.sum;
    partial[2 * static_cast<std::size_t>(b) + 1] = acc.c;
  }
  return m + std::log(compensated_sum(partial));
}

double brute_force_logz(std::span<const double> log_density, const Domain& domain) {
  check_size(domain);
  if (log_density.size() != domain.size()) throw ShapeError("oracle", "table size does not match domain");
  std::vector<double> v(log_density.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = log_density[i] + domain.log_weight(i);
  return log_sum_exp(v);
}

double brute_force_logz(const std::function<double(const Tensor&)>& log_density,
                        const Domain& domain) {
  check_size(domain);
  auto table = domain.tabulate(log_density);
  return brute_force_logz(table, domain);
}

std::vector<double> normalized_log_mass(std::span<const double> log_density, const Domain& domain) {
  const double logz = brute_force_logz(log_density, domain);
  std::vector<double> out(log_density.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = log_density[i] + domain.log_weight(i) - logz;
  return out;
}

double exact_kl(std::span<const double> log_p, std::span<const double> log_q, const Domain& domain) {
  auto lp = normalized_log_mass(log_p, domain);
  auto lq = normalized_log_mass(log_q, domain);
  Neumaier acc;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (lp[i] == kNegInf) continue;
    if (lq[i] == kNegInf) return std::numeric_limits<double>::infinity();
    acc.add(std::exp(lp[i]) * (lp[i] - lq[i]));
  }
  return std::max(0.0, acc.value());
}

double exact_kl(const std::function<double(const Tensor&)>& log_p,
                const std::function<double(const Tensor&)>& log_q, const Domain& domain) {
  auto p = domain.tabulate(log_p);
  auto q = domain.tabulate(log_q);
  return exact_kl(p, q, domain);
}

double expectation(std::span<const double> log_density, std::span<const double> values,
                   const Domain& domain) {
  auto lp = normalized_log_mass(log_density, domain);
  Neumaier acc;
  for (std::size_t i = 0; i < lp.size(); ++i) acc.add(std::exp(lp[i]) * values[i]);
  return acc.value();
}

FiniteDiffResult finite_diff_check(const std::function<double(const Tensor&)>& fn,
                                   const Tensor& point, const Tensor& analytic_grad, double eps,
                                   double floor) {
  if (analytic_grad.size() != point.size()) throw ShapeError("finite_diff_check", "gradient size mismatch");
  FiniteDiffResult r;
  r.numeric = Tensor(point.shape());
  Tensor x = point;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = fn(x);
    x[i] = orig - eps;
    const double fm = fn(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_check", "non-finite evaluation at coordinate " + std::to_string(i));
    const double num = (fp - fm) / (2.0 * eps);
    r.numeric[i] = num;
    const double a = analytic_grad[i];
    const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace modelzoo
