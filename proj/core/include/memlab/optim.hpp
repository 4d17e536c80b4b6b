#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "memlab/tensor.hpp"

namespace memlab {

enum class OptimizerKind { Sgd, Adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Optimizer state over a fixed list of parameter tensors. Adam moments are
// allocated lazily on the first step.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, AdamHyper adam = {});

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  std::uint64_t steps() const { return t_; }

  // Updates params[i] in place using grads[i]. Entries flagged false in
  // `active` (if given) are skipped. Throws NumericError on a non-finite
  // gradient before touching any parameter.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads,
            const std::vector<bool>* active = nullptr);

 private:
  OptimizerKind kind_;
  double lr_;
  AdamHyper adam_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace memlab
