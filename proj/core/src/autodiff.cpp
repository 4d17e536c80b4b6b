#include "memlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "memlab/errors.hpp"

namespace memlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC view(const Tensor& t) { return MapC(t.data().data(), t.rows(), t.cols()); }
Map view(Tensor& t) { return Map(t.data().data(), t.rows(), t.cols()); }

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + t.shape_string());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::parameter(std::size_t slot, const Tensor& value, bool trainable) {
  Node n;
  n.external = &value;
  n.requires_grad = trainable;
  n.param_slot = static_cast<long>(slot);
  nodes_.push_back(std::move(n));
  if (param_grads_.size() <= slot) param_grads_.resize(slot + 1);
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (backward_done_) throw StateError("cannot record onto a tape after backward");
  Node n;
  n.owned = std::move(value);
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw StateError("mixing variables from different tapes");
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor& Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !value(id).empty()) n.grad = Tensor(value(id).shape());
  return n.grad;
}

void Tape::accumulate(std::uint32_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  grad_buffer(id) += g;
}

void Tape::backward(Var loss) {
  if (backward_done_) throw StateError("backward called twice on the same tape");
  if (&loss.tape() != this) throw StateError("loss belongs to a different tape");
  const Tensor& lv = value(loss.id());
  if (lv.size() != 1) throw ContractError("backward requires a scalar loss, got " + lv.shape_string());
  backward_done_ = true;
  if (!nodes_[loss.id()].requires_grad) return;

  grad_buffer(loss.id()).fill(1.0);
  // Nodes are appended in execution order, so reverse index order is a
  // reverse topological order.
  for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.param_slot < 0 || !n.requires_grad) continue;
    Tensor& dst = param_grads_[static_cast<std::size_t>(n.param_slot)];
    Tensor g = n.grad.empty() ? Tensor(value(static_cast<std::uint32_t>(&n - nodes_.data())).shape())
                              : std::move(n.grad);
    if (dst.empty()) {
      dst = std::move(g);
    } else {
      dst += g;
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(value(v.id()).shape());
  return n.grad;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + a.shape_string() + " x " + b.shape_string());
  }
  Tensor out({a.rows(), b.cols()});
  view(out).noalias() = view(a) * view(b);
  return out;
}

std::vector<double> log_softmax(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  return out;
}

Tensor softmax_rows(const Tensor& x, bool causal) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (causal && m > n) throw DimensionError("causal softmax needs rows <= cols");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t width = causal ? i + 1 : n;
    const auto in = x.row_span(i);
    auto o = out.row_span(i);
    double mx = in[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < width; ++j) o[j] /= s;
  }
  return out;
}

namespace ad {

Var matmul(Var a, Var b) {
  Tensor out = memlab::matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = view(t.upstream(self));
    if (t.requires_grad(ia)) view(t.grad_buffer(ia)).noalias() += g * view(t.value(ib)).transpose();
    if (t.requires_grad(ib)) view(t.grad_buffer(ib)).noalias() += view(t.value(ia)).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ " + av.shape_string() + " x " +
                         bv.shape_string() + "^T");
  }
  Tensor out({av.rows(), bv.rows()});
  view(out).noalias() = view(av) * view(bv).transpose();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = view(t.upstream(self));
    if (t.requires_grad(ia)) view(t.grad_buffer(ia)).noalias() += g * view(t.value(ib));
    if (t.requires_grad(ib)) view(t.grad_buffer(ib)).noalias() += g.transpose() * view(t.value(ia));
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    t.accumulate(ia, t.upstream(self));
    t.accumulate(ib, t.upstream(self));
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = t.upstream(self).data();
    if (t.requires_grad(ia)) {
      auto da = t.grad_buffer(ia).data();
      const auto bv = t.value(ib).data();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib).data();
      const auto av = t.value(ia).data();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_matrix(xv, "add_row");
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_row: bias " + bv.shape_string() + " vs input " + xv.shape_string());
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row_span(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  const auto ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.upstream(self);
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib).data();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const auto row = g.row_span(r);
        for (std::size_t c = 0; c < row.size(); ++c) db[c] += row[c];
      }
    }
  });
}

Var scale(Var x, double s) {
  Tensor out = x.value();
  out *= s;
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, s](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ix)) return;
    auto dx = t.grad_buffer(ix).data();
    const auto g = t.upstream(self).data();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += s * g[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) {
    const double u = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ix)) return;
    const auto xv = t.value(ix).data();
    const auto g = t.upstream(self).data();
    auto dx = t.grad_buffer(ix).data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + th) +
                       0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      dx[i] += g[i] * d;
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(n));
  }
  Tensor out({m, n});
  Tensor xhat({m, n});
  std::vector<double> rstd(m);
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t r = 0; r < m; ++r) {
    const auto in = xv.row_span(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    auto xh = xhat.row_span(r);
    auto o = out.row_span(r);
    for (std::size_t c = 0; c < n; ++c) {
      xh[c] = (in[c] - mu) * rstd[r];
      o[c] = xh[c] * gv[c] + bv[c];
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::uint32_t self) {
        const Tensor& g = t.upstream(self);
        const std::size_t m = g.rows(), n = g.cols();
        const auto gv = t.value(ig).data();
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          std::vector<double> dg(n, 0.0), db(n, 0.0);
          for (std::size_t r = 0; r < m; ++r) {
            const auto gr = g.row_span(r);
            const auto xh = xhat.row_span(r);
            for (std::size_t c = 0; c < n; ++c) {
              dg[c] += gr[c] * xh[c];
              db[c] += gr[c];
            }
          }
          if (t.requires_grad(ig)) {
            auto d = t.grad_buffer(ig).data();
            for (std::size_t c = 0; c < n; ++c) d[c] += dg[c];
          }
          if (t.requires_grad(ib)) {
            auto d = t.grad_buffer(ib).data();
            for (std::size_t c = 0; c < n; ++c) d[c] += db[c];
          }
        }
        if (t.requires_grad(ix)) {
          Tensor& dx = t.grad_buffer(ix);
          std::vector<double> dxh(n);
          for (std::size_t r = 0; r < m; ++r) {
            const auto gr = g.row_span(r);
            const auto xh = xhat.row_span(r);
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              dxh[c] = gr[c] * gv[c];
              mean_d += dxh[c];
              mean_dx += dxh[c] * xh[c];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            auto out = dx.row_span(r);
            for (std::size_t c = 0; c < n; ++c) {
              out[c] += rstd[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
            }
          }
        }
      });
}

Var softmax_rows(Var x, bool causal) {
  Tensor out = memlab::softmax_rows(x.value(), causal);
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ix)) return;
    const Tensor& p = t.value(self);
    const Tensor& g = t.upstream(self);
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const auto pr = p.row_span(r);
      const auto gr = g.row_span(r);
      double s = 0.0;
      for (std::size_t c = 0; c < pr.size(); ++c) s += pr[c] * gr[c];
      auto d = dx.row_span(r);
      for (std::size_t c = 0; c < pr.size(); ++c) d[c] += pr[c] * (gr[c] - s);
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_cols");
  if (begin > end || end > xv.cols()) throw DimensionError("slice_cols: bad range");
  const std::size_t m = xv.rows(), w = end - begin;
  Tensor out({m, w});
  for (std::size_t r = 0; r < m; ++r) {
    const auto in = xv.row_span(r);
    std::copy(in.begin() + static_cast<long>(begin), in.begin() + static_cast<long>(end),
              out.row_span(r).begin());
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, begin](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ix)) return;
    const Tensor& g = t.upstream(self);
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const auto gr = g.row_span(r);
      auto d = dx.row_span(r);
      for (std::size_t c = 0; c < gr.size(); ++c) d[begin + c] += gr[c];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != m) throw DimensionError("concat_cols: row count mismatch");
    total += p.value().cols();
  }
  Tensor out({m, total});
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < m; ++r) {
      const auto in = pv.row_span(r);
      std::copy(in.begin(), in.end(), out.row_span(r).begin() + static_cast<long>(off));
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += pv.cols();
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids = std::move(ids), offsets = std::move(offsets)](Tape& t, std::uint32_t self) {
        const Tensor& g = t.upstream(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Tensor& d = t.grad_buffer(ids[k]);
          const std::size_t w = d.cols();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const auto gr = g.row_span(r);
            auto dr = d.row_span(r);
            for (std::size_t c = 0; c < w; ++c) dr[c] += gr[offsets[k] + c];
          }
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].value().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != n) throw DimensionError("concat_rows: column count mismatch");
    total += p.value().rows();
  }
  Tensor out({total, n});
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<long>(off * n));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().rows();
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids = std::move(ids), offsets = std::move(offsets)](Tape& t, std::uint32_t self) {
        const Tensor& g = t.upstream(self);
        const std::size_t n = g.cols();
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          auto d = t.grad_buffer(ids[k]).data();
          const auto src = g.data().subspan(offsets[k] * n, d.size());
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
        }
      });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t n = tv.cols();
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(tv.rows()) + " rows");
    }
    const auto src = tv.row_span(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  const auto it = table.id();
  return table.tape().record(std::move(out), {table},
                             [it, idv = std::vector<int>(ids.begin(), ids.end())](Tape& t, std::uint32_t self) {
                               if (!t.requires_grad(it)) return;
                               const Tensor& g = t.upstream(self);
                               Tensor& d = t.grad_buffer(it);
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                 const auto gr = g.row_span(i);
                                 auto dr = d.row_span(static_cast<std::size_t>(idv[i]));
                                 for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += gr[c];
                               }
                             });
}

Var take_rows(Var x, std::span<const std::size_t> indices) {
  const Tensor& xv = x.value();
  require_matrix(xv, "take_rows");
  Tensor out({indices.size(), xv.cols()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.rows()) throw DimensionError("take_rows: index out of range");
    const auto src = xv.row_span(indices[i]);
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  const auto ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix, idx = std::vector<std::size_t>(indices.begin(), indices.end())](Tape& t, std::uint32_t self) {
        if (!t.requires_grad(ix)) return;
        const Tensor& g = t.upstream(self);
        Tensor& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const auto gr = g.row_span(i);
          auto dr = d.row_span(idx[i]);
          for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += gr[c];
        }
      });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.tape().record(Tensor({1, 1}, s), {x}, [ix](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ix)) return;
    const double g = t.upstream(self)[0];
    for (auto& d : t.grad_buffer(ix).data()) d += g;
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, const std::vector<bool>& mask) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy: targets/mask length must equal logits rows");
  }
  std::size_t count = 0;
  for (bool b : mask) count += b ? 1 : 0;
  if (count == 0) throw ContractError("cross_entropy: mask selects no positions");

  Tensor probs({rows, vocab});
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(tgt) + " outside vocabulary");
    }
    const auto lp = log_softmax(lv.row_span(r));
    loss -= lp[static_cast<std::size_t>(tgt)];
    auto pr = probs.row_span(r);
    for (std::size_t c = 0; c < vocab; ++c) pr[c] = std::exp(lp[c]);
  }
  const double inv = 1.0 / static_cast<double>(count);
  loss *= inv;
  const auto il = logits.id();
  return logits.tape().record(
      Tensor({1, 1}, loss), {logits},
      [il, inv, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()),
       mk = mask](Tape& t, std::uint32_t self) {
        if (!t.requires_grad(il)) return;
        const double g = t.upstream(self)[0] * inv;
        Tensor& d = t.grad_buffer(il);
        for (std::size_t r = 0; r < mk.size(); ++r) {
          if (!mk[r]) continue;
          const auto pr = probs.row_span(r);
          auto dr = d.row_span(r);
          for (std::size_t c = 0; c < pr.size(); ++c) dr[c] += g * pr[c];
          dr[static_cast<std::size_t>(tg[r])] -= g;
        }
      });
}

}  // namespace ad

}  // namespace memlab
