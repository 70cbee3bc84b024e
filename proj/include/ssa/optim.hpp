#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssa/tensor.hpp"

namespace ssa {

enum class OptimKind { kAdam, kSgdMomentum };

const char* to_string(OptimKind v);

struct OptimConfig {
  OptimKind kind = OptimKind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
};

// Updates leaf tensors in place from their accumulated gradients. A missing
// gradient counts as zero. Throws NumericError naming the parameter when a
// gradient is not finite.
class Optimizer {
 public:
  Optimizer(OptimConfig cfg, std::vector<std::pair<std::string, Tensor>> params);

  void zero_grad();
  void step();

 private:
  OptimConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Eigen::ArrayXd> m_;
  std::vector<Eigen::ArrayXd> v_;
  std::size_t t_ = 0;
};

}  // namespace ssa
