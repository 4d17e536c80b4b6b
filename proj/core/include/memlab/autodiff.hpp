#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "memlab/tensor.hpp"

namespace memlab {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning Tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

// Define-by-run reverse-mode tape. A fresh tape is built for every forward
// pass; backward may run once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Free-standing differentiable leaf (owned value).
  Var leaf(Tensor value, bool requires_grad = true);
  // Leaf bound to an externally owned parameter tensor. The tensor must
  // outlive the tape. Gradients land in param_grads()[slot].
  Var parameter(std::size_t slot, const Tensor& value, bool trainable);

  const Tensor& value(std::uint32_t id) const;
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  // Reverse sweep from a scalar (1x1) node. Throws StateError when called a
  // second time on the same tape.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  // Gradient of the loss w.r.t. a node; zero tensor of the node's shape when
  // the node did not influence the loss.
  Tensor grad(Var v) const;

  // Gradients per parameter slot after backward. Slots that were never bound
  // or are not trainable hold empty tensors.
  const std::vector<Tensor>& param_grads() const { return param_grads_; }
  std::vector<Tensor> take_param_grads() { return std::move(param_grads_); }

  // Op implementation hooks.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  const Tensor& upstream(std::uint32_t id) const { return nodes_[id].grad; }
  // Adds g into the gradient buffer of `id` (no-op if it does not require grad).
  void accumulate(std::uint32_t id, const Tensor& g);
  // Mutable gradient buffer of `id`, zero-initialised on first access.
  Tensor& grad_buffer(std::uint32_t id);

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    long param_slot = -1;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> param_grads_;
  bool backward_done_ = false;
};

namespace ad {

// a[m,k] . b[k,n]
Var matmul(Var a, Var b);
// a[m,k] . b[n,k]^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
// Elementwise product.
Var mul(Var a, Var b);
// x[m,n] + bias[1,n] broadcast over rows.
Var add_row(Var x, Var bias);
Var scale(Var x, double s);
// tanh-approximation GELU.
Var gelu(Var x);
// Row-wise layer norm with affine gamma[1,n], beta[1,n].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Row softmax with max subtraction. With causal=true, row i only covers
// columns j <= i; masked entries are exactly zero.
Var softmax_rows(Var x, bool causal = false);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
// table[V,d] -> [ids.size(), d]
Var gather_rows(Var table, std::span<const int> ids);
// x[m,n] -> [indices.size(), n]
Var take_rows(Var x, std::span<const std::size_t> indices);
Var sum(Var x);
// Mean negative log-softmax probability of `targets` over rows with
// mask[i] == true. Throws ContractError if no row is masked in.
Var cross_entropy(Var logits, std::span<const int> targets, const std::vector<bool>& mask);

}  // namespace ad

// Plain (non-recorded) numerics used by ops and by callers that do not need
// gradients.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x, bool causal = false);
// log-softmax of a single row.
std::vector<double> log_softmax(std::span<const double> row);

}  // namespace memlab
