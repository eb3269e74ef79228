#include "dmckn/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "dmckn/error.hpp"
#include "dmckn/kernels.hpp"

namespace dmckn::ad {
namespace {

std::atomic<bool> g_strict{false};

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw ArgumentError("autodiff: uninitialised Var");
    if (t && v.tape() != t) throw ArgumentError("autodiff: operands recorded on different tapes");
    t = v.tape();
  }
  return *t;
}

Tape& tape_of(std::span<const Var> vars) {
  if (vars.empty()) throw ArgumentError("autodiff: empty operand list");
  Tape* t = vars.front().tape();
  for (const Var& v : vars) {
    if (!v.valid() || v.tape() != t) throw ArgumentError("autodiff: operands recorded on different tapes");
  }
  return *t;
}

double softplus(double x) {
  // log(1+exp(x)) without overflow
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void set_strict(bool on) noexcept { g_strict = on; }
bool strict() noexcept { return g_strict; }

const Tensor& Var::value() const { return tape_->value(id_); }
Tensor Var::grad() const { return tape_->grad(id_); }

Var Tape::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw Error("tape: too many nodes");
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.ref = &value;
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& value, std::size_t slot) {
  Node n;
  n.ref = &value;
  n.needs_grad = true;
  n.slot = static_cast<std::int64_t>(slot);
  return push(std::move(n));
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, Backward backward) {
  if (g_strict && !all_finite(value)) throw NonFiniteError(std::string(op) + ": non-finite output");
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.value;
}

const Tensor& Tape::grad(std::uint32_t id) const {
  const Node& n = nodes_[id];
  if (n.has_grad) return n.grad;
  // shared zero of the right shape
  auto& z = const_cast<Tensor&>(zero_grad_);
  const Tensor& v = value(id);
  if (!same_shape(z, v)) z = Tensor(v.rows(), v.cols());
  return z;
}

Tensor& Tape::grad_accum(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    const Tensor& v = n.ref ? *n.ref : n.value;
    n.grad = Tensor(v.rows(), v.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw ArgumentError("backward: root belongs to another tape");
  const Tensor& rv = value(root.id());
  if (rv.rows() != 1 || rv.cols() != 1) throw ShapeError("backward: root must be 1x1");
  std::vector<char> reachable(root.id() + 1, 0);
  reachable[root.id()] = 1;
  for (std::int64_t id = root.id(); id >= 0; --id) {
    if (!reachable[id]) continue;
    for (std::uint32_t in : nodes_[id].inputs) reachable[in] = 1;
  }
  grad_accum(root.id())[0] += 1.0;
  for (std::int64_t id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!reachable[id] || !n.needs_grad || !n.has_grad || !n.backward) continue;
    n.backward(*this, static_cast<std::uint32_t>(id));
  }
}

std::vector<Tape::SlotGrad> Tape::parameter_grads() const {
  std::vector<SlotGrad> out;
  for (const Node& n : nodes_) {
    if (n.slot >= 0) out.push_back({static_cast<std::size_t>(n.slot), n.has_grad ? &n.grad : nullptr});
  }
  return out;
}

void Tape::clear() { nodes_.clear(); }

// ---- ops ------------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require_same_shape(a.value(), b.value(), "add");
  return t.record("add", a.value() + b.value(), {a, b}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    for (std::uint32_t in : t.inputs(self))
      if (t.needs_grad(in)) t.grad_accum(in) += g;
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require_same_shape(a.value(), b.value(), "sub");
  return t.record("sub", a.value() - b.value(), {a, b}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const auto& in = t.inputs(self);
    if (t.needs_grad(in[0])) t.grad_accum(in[0]) += g;
    if (t.needs_grad(in[1])) t.grad_accum(in[1]) -= g;
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of({a});
  return t.record("scale", s * a.value(), {a}, [s](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_accum(t.inputs(self)[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = tape_of({a, b});
  require_same_shape(a.value(), b.value(), "hadamard");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record("hadamard", std::move(out), {a, b}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const auto in = t.inputs(self);
    const Tensor& av = t.value(in[0]);
    const Tensor& bv = t.value(in[1]);
    if (t.needs_grad(in[0])) {
      Tensor& ga = t.grad_accum(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(in[1])) {
      Tensor& gb = t.grad_accum(in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of({a});
  return t.record("transpose", a.value().transposed(), {a}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_accum(t.inputs(self)[0]);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(c, r) += g(r, c);
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  return t.record("matmul", kernels::serial::matmul(a.value(), b.value()), {a, b},
                  [](Tape& t, std::uint32_t self) {
                    const Tensor& g = t.grad(self);
                    const auto in = t.inputs(self);
                    if (t.needs_grad(in[0])) kernels::matmul_nt_acc(g, t.value(in[1]), t.grad_accum(in[0]));
                    if (t.needs_grad(in[1])) kernels::matmul_tn_acc(t.value(in[0]), g, t.grad_accum(in[1]));
                  });
}

Var concat_rows(std::span<const Var> parts) {
  Tape& t = tape_of(parts);
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  return t.record("concat_rows", std::move(out), parts, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    std::size_t offset = 0;
    for (std::uint32_t in : t.inputs(self)) {
      const std::size_t sz = t.value(in).size();
      if (t.needs_grad(in)) {
        Tensor& gi = t.grad_accum(in);
        for (std::size_t i = 0; i < sz; ++i) gi[i] += g[offset + i];
      }
      offset += sz;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  Tape& t = tape_of(parts);
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(v.row(r).begin(), v.row(r).end(), out.data() + r * cols + offset);
    offset += v.cols();
  }
  return t.record("concat_cols", std::move(out), parts, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    std::size_t offset = 0;
    for (std::uint32_t in : t.inputs(self)) {
      const std::size_t w = t.value(in).cols();
      if (t.needs_grad(in)) {
        Tensor& gi = t.grad_accum(in);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gi(r, c) += g(r, offset + c);
      }
      offset += w;
    }
  });
}

Var row_sum(Var a) {
  Tape& t = tape_of({a});
  const Tensor& v = a.value();
  Tensor out(v.rows(), 1);
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (double x : v.row(r)) out[r] += x;
  return t.record("row_sum", std::move(out), {a}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_accum(t.inputs(self)[0]);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (double& x : ga.row(r)) x += g[r];
  });
}

Var sum(Var a) {
  Tape& t = tape_of({a});
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return t.record("sum", Tensor(1, 1, s), {a}, [](Tape& t, std::uint32_t self) {
    const double g = t.grad(self)[0];
    for (double& x : t.grad_accum(t.inputs(self)[0]).values()) x += g;
  });
}

Var add_row_broadcast(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) throw ShapeError("add_row_broadcast: bias must be 1xcols");
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  return t.record("add_row_broadcast", std::move(out), {a, b}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const auto in = t.inputs(self);
    if (t.needs_grad(in[0])) t.grad_accum(in[0]) += g;
    if (t.needs_grad(in[1])) {
      Tensor& gb = t.grad_accum(in[1]);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of({a});
  Tensor out = a.value();
  for (double& x : out.values()) x = logistic(x);
  return t.record("sigmoid", std::move(out), {a}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_accum(t.inputs(self)[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var relu(Var a) {
  Tape& t = tape_of({a});
  Tensor out = a.value();
  for (double& x : out.values()) x = x > 0.0 ? x : 0.0;
  return t.record("relu", std::move(out), {a}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(t.inputs(self)[0]);
    Tensor& ga = t.grad_accum(t.inputs(self)[0]);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

Var row_softmax(Var a) {
  Tape& t = tape_of({a});
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    if (row.empty()) continue;
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& x : row) z += (x = std::exp(x - m));
    for (double& x : row) x /= z;
  }
  return t.record("row_softmax", std::move(out), {a}, [](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_accum(t.inputs(self)[0]);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var sq_frobenius(Var a) {
  Tape& t = tape_of({a});
  double s = 0.0;
  for (double x : a.value().values()) s += x * x;
  return t.record("sq_frobenius", Tensor(1, 1, s), {a}, [](Tape& t, std::uint32_t self) {
    const double g = t.grad(self)[0];
    const std::uint32_t in = t.inputs(self)[0];
    const Tensor& x = t.value(in);
    Tensor& ga = t.grad_accum(in);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * g * x[i];
  });
}

Var logistic_loss(Var logits, const Tensor& signs, const Tensor& mask) {
  Tape& t = tape_of({logits});
  const Tensor& z = logits.value();
  require_same_shape(z, signs, "logistic_loss signs");
  require_same_shape(z, mask, "logistic_loss mask");
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (mask[i] != 0.0) s += mask[i] * softplus(-signs[i] * z[i]);
  return t.record("logistic_loss", Tensor(1, 1, s), {logits},
                  [signs, mask](Tape& t, std::uint32_t self) {
                    const double g = t.grad(self)[0];
                    const std::uint32_t in = t.inputs(self)[0];
                    const Tensor& z = t.value(in);
                    Tensor& gz = t.grad_accum(in);
                    for (std::size_t i = 0; i < z.size(); ++i) {
                      if (mask[i] == 0.0) continue;
                      // d/dz softplus(−y z) = −y·σ(−y z)
                      gz[i] += g * mask[i] * (-signs[i]) * logistic(-signs[i] * z[i]);
                    }
                  });
}

Var masked_matmul(Var p, Var x, std::shared_ptr<const RowSupport> support) {
  Tape& t = tape_of({p, x});
  const Tensor& pv = p.value();
  const Tensor& xv = x.value();
  if (pv.cols() != xv.rows()) throw ShapeError("masked_matmul: inner dimensions differ");
  if (support->rows() != pv.rows()) throw ShapeError("masked_matmul: support rows differ from P");
  const std::size_t w = xv.cols();
  Tensor out(pv.rows(), w);
  for (std::size_t r = 0; r < pv.rows(); ++r) {
    double* o = out.data() + r * w;
    for (std::uint32_t k = support->offsets[r]; k < support->offsets[r + 1]; ++k) {
      const std::uint32_t c = support->columns[k];
      const double pw = pv(r, c);
      const double* xr = xv.data() + static_cast<std::size_t>(c) * w;
      for (std::size_t j = 0; j < w; ++j) o[j] += pw * xr[j];
    }
  }
  return t.record("masked_matmul", std::move(out), {p, x},
                  [support = std::move(support)](Tape& t, std::uint32_t self) {
                    const Tensor& g = t.grad(self);
                    const auto in = t.inputs(self);
                    const Tensor& pv = t.value(in[0]);
                    const Tensor& xv = t.value(in[1]);
                    const std::size_t w = xv.cols();
                    Tensor* gp = t.needs_grad(in[0]) ? &t.grad_accum(in[0]) : nullptr;
                    Tensor* gx = t.needs_grad(in[1]) ? &t.grad_accum(in[1]) : nullptr;
                    for (std::size_t r = 0; r < pv.rows(); ++r) {
                      const double* gr = g.data() + r * w;
                      for (std::uint32_t k = support->offsets[r]; k < support->offsets[r + 1]; ++k) {
                        const std::uint32_t c = support->columns[k];
                        const double* xr = xv.data() + static_cast<std::size_t>(c) * w;
                        if (gp) {
                          double s = 0.0;
                          for (std::size_t j = 0; j < w; ++j) s += gr[j] * xr[j];
                          (*gp)(r, c) += s;
                        }
                        if (gx) {
                          const double pw = pv(r, c);
                          double* gxr = gx->data() + static_cast<std::size_t>(c) * w;
                          for (std::size_t j = 0; j < w; ++j) gxr[j] += pw * gr[j];
                        }
                      }
                    }
                  });
}

Var neighborhood_attention(Var q, Var k, Var v, std::shared_ptr<const IndexSets> sets, double scale) {
  Tape& t = tape_of({q, k, v});
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.cols() != kv.cols()) throw ShapeError("neighborhood_attention: query/key widths differ");
  if (kv.rows() != vv.rows()) throw ShapeError("neighborhood_attention: key/value rows differ");
  if (sets->size() != qv.rows()) throw ShapeError("neighborhood_attention: one index set per query row");
  const std::size_t dk = qv.cols();
  const std::size_t dv = vv.cols();
  Tensor out(qv.rows(), dv);
  // probabilities are kept for the backward pass
  auto probs = std::make_shared<std::vector<std::vector<double>>>(qv.rows());
  for (std::size_t x = 0; x < qv.rows(); ++x) {
    const auto& s = (*sets)[x];
    if (s.empty()) continue;
    auto& p = (*probs)[x];
    p.resize(s.size());
    const double* qx = qv.data() + x * dk;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s.size(); ++j) {
      const double* kj = kv.data() + static_cast<std::size_t>(s[j]) * dk;
      double dot = 0.0;
      for (std::size_t i = 0; i < dk; ++i) dot += qx[i] * kj[i];
      p[j] = dot * scale;
      m = std::max(m, p[j]);
    }
    double z = 0.0;
    for (double& e : p) z += (e = std::exp(e - m));
    for (double& e : p) e /= z;
    double* o = out.data() + x * dv;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const double* vj = vv.data() + static_cast<std::size_t>(s[j]) * dv;
      for (std::size_t i = 0; i < dv; ++i) o[i] += p[j] * vj[i];
    }
  }
  return t.record(
      "neighborhood_attention", std::move(out), {q, k, v},
      [sets = std::move(sets), probs, scale](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad(self);
        const auto in = t.inputs(self);
        const Tensor& qv = t.value(in[0]);
        const Tensor& kv = t.value(in[1]);
        const Tensor& vv = t.value(in[2]);
        const std::size_t dk = qv.cols();
        const std::size_t dv = vv.cols();
        Tensor* gq = t.needs_grad(in[0]) ? &t.grad_accum(in[0]) : nullptr;
        Tensor* gk = t.needs_grad(in[1]) ? &t.grad_accum(in[1]) : nullptr;
        Tensor* gvv = t.needs_grad(in[2]) ? &t.grad_accum(in[2]) : nullptr;
        std::vector<double> dp;
        for (std::size_t x = 0; x < qv.rows(); ++x) {
          const auto& s = (*sets)[x];
          if (s.empty()) continue;
          const auto& p = (*probs)[x];
          const double* gx = g.data() + x * dv;
          dp.assign(s.size(), 0.0);
          double dot = 0.0;
          for (std::size_t j = 0; j < s.size(); ++j) {
            const double* vj = vv.data() + static_cast<std::size_t>(s[j]) * dv;
            double a = 0.0;
            for (std::size_t i = 0; i < dv; ++i) a += gx[i] * vj[i];
            dp[j] = a;
            dot += a * p[j];
            if (gvv) {
              double* gvj = gvv->data() + static_cast<std::size_t>(s[j]) * dv;
              for (std::size_t i = 0; i < dv; ++i) gvj[i] += p[j] * gx[i];
            }
          }
          if (!gq && !gk) continue;
          const double* qx = qv.data() + x * dk;
          for (std::size_t j = 0; j < s.size(); ++j) {
            const double ds = p[j] * (dp[j] - dot) * scale;  // d loss / d raw dot
            if (ds == 0.0) continue;
            const double* kj = kv.data() + static_cast<std::size_t>(s[j]) * dk;
            if (gq) {
              double* gqx = gq->data() + x * dk;
              for (std::size_t i = 0; i < dk; ++i) gqx[i] += ds * kj[i];
            }
            if (gk) {
              double* gkj = gk->data() + static_cast<std::size_t>(s[j]) * dk;
              for (std::size_t i = 0; i < dk; ++i) gkj[i] += ds * qx[i];
            }
          }
        }
      });
}

// ---- gradient checking ----------------------------------------------------

GradReport check_gradients(const LossFn& loss, std::span<const GradCheckParam> params,
                           const GradCheckOptions& options) {
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.constant_ref(*p.value));
    const Var out = loss(tape, vars);
    if (out.rows() != 1 || out.cols() != 1) throw ShapeError("check_gradients: loss must be scalar");
    return out.value()[0];
  };

  std::vector<Tensor> analytic;
  double base = 0.0;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.variable(*p.value));
    const Var out = loss(tape, vars);
    tape.backward(out);
    base = out.value()[0];
    for (const Var& v : vars) analytic.push_back(v.grad());
  }
  const double again = evaluate();
  if (again != base) {
    throw Error("check_gradients: loss is not deterministic (" + std::to_string(base) + " vs " +
                std::to_string(again) + ")");
  }

  GradReport report;
  report.tol = options.tol;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = *params[pi].value;
    ParamGradReport pr;
    pr.name = params[pi].name;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + options.step;
      const double up = evaluate();
      value[i] = orig - options.step;
      const double down = evaluate();
      value[i] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[pi][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
      pr.max_abs_error = std::max(pr.max_abs_error, abs_err);
      if (i == 0 || rel > pr.max_rel_error) {
        pr.max_rel_error = rel;
        pr.worst_index = i;
        pr.analytic = a;
        pr.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, pr.max_rel_error);
    report.params.push_back(std::move(pr));
  }
  report.passed = report.max_rel_error <= options.tol;
  return report;
}

}  // namespace dmckn::ad
