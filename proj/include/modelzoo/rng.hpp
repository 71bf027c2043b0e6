#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "modelzoo/tensor.hpp"

namespace modelzoo {

/// Seedable, splittable pseudorandom stream.
///
/// `split(k)` derives an independent child stream from this stream's seed and
/// the key `k` without advancing the parent, so per-chain streams do not
/// depend on evaluation order or thread count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  Rng split(std::uint64_t key) const;
  Rng split(std::string_view name) const;

  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t index(std::size_t n);  // uniform on {0, ..., n-1}
  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(Shape shape, double stddev = 1.0);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace modelzoo
