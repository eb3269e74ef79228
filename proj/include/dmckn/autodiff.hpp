#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dmckn/tensor.hpp"

// Tape-based reverse-mode differentiation over dense matrices.
//
// Nodes are appended in creation order, which is a valid topological order,
// so backward() walks the tape once from the root towards the leaves. A tape
// has a single writer; parallel evaluation uses one tape per thread.
namespace dmckn::ad {

/// When strict, every recorded op checks its output for NaN/Inf.
void set_strict(bool on) noexcept;
bool strict() noexcept;

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Gradient after backward(); a zero tensor when nothing flowed here.
  Tensor grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that refers to `value` without copying; `value` must outlive the tape.
  Var constant_ref(const Tensor& value);
  /// Leaf that receives a gradient.
  Var variable(Tensor value);
  /// Referenced leaf whose gradient is reported under `slot` by parameter_grads().
  Var parameter(const Tensor& value, std::size_t slot);

  /// Records an op output. Used by the op library; `inputs` are the operands.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(const char* op, Tensor value, std::span<const Var> inputs, Backward backward);

  /// Reverse sweep from a 1x1 root. Gradients accumulate across fan-out.
  void backward(Var root);

  const Tensor& value(std::uint32_t id) const;
  const Tensor& grad(std::uint32_t id) const;
  /// Gradient buffer of `id`, allocated as zeros on first use.
  Tensor& grad_accum(std::uint32_t id);
  bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
  const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_[id].inputs; }

  struct SlotGrad {
    std::size_t slot;
    const Tensor* grad;  // nullptr when the parameter was unreachable
  };
  std::vector<SlotGrad> parameter_grads() const;

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::int64_t slot = -1;
    std::vector<std::uint32_t> inputs;
    Backward backward;
  };
  Var push(Node node);
  Tensor zero_grad_;
  std::deque<Node> nodes_;
};

// Adjacency in compressed-row form: row x lists the columns it may read.
struct RowSupport {
  std::vector<std::uint32_t> offsets;  // size rows+1
  std::vector<std::uint32_t> columns;
  std::size_t rows() const { return offsets.empty() ? 0 : offsets.size() - 1; }
};

// Per-row index lists (ragged), e.g. surviving neighbours of each cell.
using IndexSets = std::vector<std::vector<std::uint32_t>>;

// ---- op library -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var hadamard(Var a, Var b);
Var transpose(Var a);
Var matmul(Var a, Var b);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// n×m → n×1
Var row_sum(Var a);
/// Sum of all entries, 1×1.
Var sum(Var a);
/// a (n×d) + b (1×d) broadcast over rows.
Var add_row_broadcast(Var a, Var b);
Var sigmoid(Var a);
/// max(0, x)
Var relu(Var a);
/// Softmax of each row, stabilised by subtracting the row maximum.
Var row_softmax(Var a);
/// ‖a‖²_F as 1×1.
Var sq_frobenius(Var a);
/// Σ mask·log(1+exp(−y·z)) with signs y ∈ {−1,+1}; the binary cross-entropy of
/// sigmoid(z) against targets (y+1)/2. Returns 1×1.
Var logistic_loss(Var logits, const Tensor& signs, const Tensor& mask);
/// P·X reading P only on `support` (entries of P off the support are ignored
/// and receive no gradient).
Var masked_matmul(Var p, Var x, std::shared_ptr<const RowSupport> support);
/// Row x of the output is Σ_j softmax_j(⟨Q_x, K_{s_j}⟩·scale) V_{s_j} over
/// s = sets[x]; empty sets give a zero row.
Var neighborhood_attention(Var q, Var k, Var v, std::shared_ptr<const IndexSets> sets, double scale);

// ---- gradient checking ----------------------------------------------------

struct GradCheckParam {
  std::string name;
  Tensor* value;
};

struct ParamGradReport {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradReport {
  std::vector<ParamGradReport> params;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-5;
  /// Denominator floor of the relative error |a−n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

using LossFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares analytic gradients of a scalar `loss` against central differences.
/// Throws Error when two evaluations at the same point disagree.
GradReport check_gradients(const LossFn& loss, std::span<const GradCheckParam> params,
                           const GradCheckOptions& options = {});

}  // namespace dmckn::ad
