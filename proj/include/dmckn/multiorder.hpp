#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dmckn/grid.hpp"
#include "dmckn/tensor.hpp"

// Higher-order context: attention scores between a cell and candidate cells
// further along a direction, softmax transition probabilities, threshold
// filtering of the walk, and probability-weighted value aggregation.
namespace dmckn {

/// Row-vector convention: query = φ·Wq, key = φ·Wk, value = φ·Wv.
struct AttentionParams {
  Tensor wq;  // d_in × d
  Tensor wk;  // d_in × d
  Tensor wv;  // d_in × d_v

  std::size_t input_dim() const noexcept { return wq.rows(); }
  std::size_t key_dim() const noexcept { return wq.cols(); }
  std::size_t value_dim() const noexcept { return wv.cols(); }
  void validate() const;
};

struct ContextEntry {
  std::vector<std::uint32_t> indices;
  std::vector<double> probs;
};

/// Entries per (direction, order, cell).
class MultiOrderContext {
 public:
  MultiOrderContext() = default;
  MultiOrderContext(std::size_t cells, std::size_t max_order);

  std::size_t cells() const noexcept { return cells_; }
  std::size_t max_order() const noexcept { return max_order_; }
  ContextEntry& at(std::size_t cell, Direction d, std::size_t order);
  const ContextEntry& at(std::size_t cell, Direction d, std::size_t order) const;

 private:
  std::size_t cells_ = 0;
  std::size_t max_order_ = 0;
  std::vector<ContextEntry> entries_;
};

/// Raw scaled dot products ⟨φ(x)Wq, φ(x_j)Wk⟩/√d, one per row of `neighbors`.
std::vector<double> attention_scores(std::span<const double> phi_x, const Tensor& neighbors,
                                     const AttentionParams& ap);

/// Softmax (max-subtracted) of the scores.
std::vector<double> transition_probs(std::span<const double> scores);

/// Drops cells whose probability relative to the maximum is below `thres`
/// and renormalises the survivors. The arg-max always survives; at thres ≥ 1
/// only the first arg-max is kept. Nothing is rescaled when nothing is dropped.
ContextEntry random_walk_filter(ContextEntry entry, double thres);

/// Candidates at the next order: first-order neighbours of the surviving
/// cells, excluding `cell`, sorted and unique.
std::vector<std::uint32_t> expand_candidates(std::size_t cell, std::span<const std::uint32_t> survivors,
                                             const CellSets& first_order);

/// Order-1 entry: the mask neighbours with probabilities |P_c| normalised to 1
/// (uniform when all weights vanish).
ContextEntry first_order_entry(std::size_t cell, const Tensor& weights, const CellSets& first_order);

/// Scores the candidates of `cell` from precomputed query/key rows, turns them
/// into probabilities and filters. Shared by the value-level builder and the network.
ContextEntry score_and_filter(std::size_t cell, std::vector<std::uint32_t> candidates, const Tensor& queries,
                              const Tensor& keys, double scale, double thres);

/// Σ_j p_j (φ(x_j) Wv) over the entry; a zero vector of width d_v when empty.
std::vector<double> order_context(std::size_t cell, Direction d, std::size_t order, const Tensor& phis,
                                  const AttentionParams& ap, const MultiOrderContext& ctx);

using AttentionLookup = std::function<const AttentionParams&(std::size_t order, Direction d)>;

/// Builds all entries up to `max_order`. Order 1 follows the P_c structure;
/// order p ≥ 2 scores the cells reachable from the order-(p−1) survivors.
MultiOrderContext build_multiorder(const Tensor& phis, const NeighborhoodSystem& ns, const AttentionLookup& ap,
                                   std::size_t max_order, double thres);

}  // namespace dmckn
