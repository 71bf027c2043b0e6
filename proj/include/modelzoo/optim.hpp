#pragma once

#include <string>
#include <vector>

#include "modelzoo/tensor.hpp"

namespace modelzoo {

enum class OptimizerKind { kSgd, kAdam };
OptimizerKind parse_optimizer(const std::string& name);

// Descent step: params -= lr * direction(grads). Callers that ascend an
// objective pass its negated gradient.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::kAdam, double beta1 = 0.9,
                     double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr);
  void reset() { m_.clear(); v_.clear(); t_ = 0; }
  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_;
  double beta1_, beta2_, eps_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

// eta0 / (1 + ln(1 + floor(t / every))): logarithmic decay applied every
// `every` iterations.
double log_decay_rate(double eta0, long iteration, long every = 10);

}  // namespace modelzoo
