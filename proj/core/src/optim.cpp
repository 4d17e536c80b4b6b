#include "memlab/optim.hpp"

#include <cmath>

#include "memlab/errors.hpp"

namespace memlab {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, AdamHyper adam)
    : kind_(kind), lr_(learning_rate), adam_(adam) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be a finite non-negative number");
  }
  if (!(adam.beta1 > 0.0 && adam.beta1 < 1.0) || !(adam.beta2 > 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in (0, 1)");
  }
}

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                     const std::vector<bool>* active) {
  if (params.size() != grads.size()) throw DimensionError("optimizer: params/grads count mismatch");
  auto is_active = [&](std::size_t i) { return active == nullptr || (*active)[i]; };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!is_active(i)) continue;
    if (!params[i]->same_shape(grads[i])) {
      throw DimensionError("optimizer: gradient " + grads[i].shape_string() + " does not match parameter " +
                           params[i]->shape_string());
    }
    if (!grads[i].all_finite()) throw NumericError("optimizer: non-finite gradient in parameter " + std::to_string(i));
  }
  ++t_;
  if (kind_ == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!is_active(i)) continue;
      auto p = params[i]->data();
      const auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr_ * g[j];
    }
    return;
  }
  if (m_.size() != params.size()) {
    m_.assign(params.size(), Tensor());
    v_.assign(params.size(), Tensor());
  }
  const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!is_active(i)) continue;
    if (m_[i].empty()) {
      m_[i] = Tensor(params[i]->shape());
      v_[i] = Tensor(params[i]->shape());
    }
    auto p = params[i]->data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = adam_.beta1 * m[j] + (1.0 - adam_.beta1) * g[j];
      v[j] = adam_.beta2 * v[j] + (1.0 - adam_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr_ * mhat / (std::sqrt(vhat) + adam_.eps);
    }
  }
}

}  // namespace memlab
