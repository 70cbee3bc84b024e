#include "ssa/optim.hpp"

#include <cmath>

#include "ssa/errors.hpp"

namespace ssa {

const char* to_string(OptimKind v) { return v == OptimKind::kAdam ? "adam" : "sgd"; }

Optimizer::Optimizer(OptimConfig cfg, std::vector<std::pair<std::string, Tensor>> params)
    : cfg_(cfg), params_(std::move(params)) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, p] : params_) {
    m_.push_back(Eigen::ArrayXd::Zero(p.array().size()));
    v_.push_back(Eigen::ArrayXd::Zero(p.array().size()));
  }
}

void Optimizer::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Optimizer::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    if (!p.has_grad()) continue;
    const Eigen::ArrayXd& g = p.grad_array();
    if (!g.allFinite()) throw NumericError("non-finite gradient in '" + name + "'");
    if (cfg_.kind == OptimKind::kAdam) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.square();
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
      p.array() -= cfg_.lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + cfg_.eps);
    } else {
      m_[i] = cfg_.momentum * m_[i] + g;
      p.array() -= cfg_.lr * m_[i];
    }
  }
}

}  // namespace ssa
