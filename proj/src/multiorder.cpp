#include "dmckn/multiorder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dmckn/error.hpp"
#include "dmckn/kernels.hpp"

namespace dmckn {

void AttentionParams::validate() const {
  if (wq.rows() != wk.rows() || wq.rows() != wv.rows())
    throw ShapeError("attention: Wq, Wk, Wv must share the input width");
  if (wq.cols() != wk.cols()) throw ShapeError("attention: Wq and Wk must share the key width");
  if (wq.cols() == 0) throw ShapeError("attention: key width must be positive");
}

MultiOrderContext::MultiOrderContext(std::size_t cells, std::size_t max_order)
    : cells_(cells), max_order_(max_order), entries_(cells * max_order * kDirectionCount) {}

ContextEntry& MultiOrderContext::at(std::size_t cell, Direction d, std::size_t order) {
  return entries_[(index_of(d) * max_order_ + (order - 1)) * cells_ + cell];
}

const ContextEntry& MultiOrderContext::at(std::size_t cell, Direction d, std::size_t order) const {
  return entries_[(index_of(d) * max_order_ + (order - 1)) * cells_ + cell];
}

std::vector<double> attention_scores(std::span<const double> phi_x, const Tensor& neighbors,
                                     const AttentionParams& ap) {
  ap.validate();
  if (phi_x.size() != ap.input_dim() || (neighbors.rows() > 0 && neighbors.cols() != ap.input_dim()))
    throw ShapeError("attention_scores: feature width does not match Wq/Wk");
  if (neighbors.rows() == 0) return {};
  const Tensor x(1, phi_x.size(), std::vector<double>(phi_x.begin(), phi_x.end()));
  const Tensor q = kernels::serial::matmul(x, ap.wq);
  const Tensor k = kernels::serial::matmul(neighbors, ap.wk);
  const double inv = 1.0 / std::sqrt(static_cast<double>(ap.key_dim()));
  std::vector<double> s(neighbors.rows());
  for (std::size_t j = 0; j < s.size(); ++j) {
    double dot = 0.0;
    for (std::size_t i = 0; i < q.cols(); ++i) dot += q[i] * k(j, i);
    s[j] = dot * inv;
  }
  return s;
}

std::vector<double> transition_probs(std::span<const double> scores) {
  std::vector<double> p(scores.begin(), scores.end());
  if (p.empty()) return p;
  const double m = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(v - m));
  for (double& v : p) v /= z;
  return p;
}

ContextEntry random_walk_filter(ContextEntry entry, double thres) {
  if (!(thres >= 0.0 && thres <= 1.0)) throw ArgumentError("random_walk_filter: thres must lie in [0, 1]");
  if (entry.indices.size() != entry.probs.size()) throw ShapeError("random_walk_filter: indices/probs size mismatch");
  if (entry.probs.empty()) return entry;
  const auto best = static_cast<std::size_t>(std::max_element(entry.probs.begin(), entry.probs.end()) - entry.probs.begin());
  const double m = entry.probs[best];
  ContextEntry kept;
  for (std::size_t j = 0; j < entry.probs.size(); ++j) {
    const bool survives = thres >= 1.0 ? j == best : entry.probs[j] / m >= thres;
    if (survives) {
      kept.indices.push_back(entry.indices[j]);
      kept.probs.push_back(entry.probs[j]);
    }
  }
  if (kept.indices.size() == entry.indices.size()) return entry;
  double z = 0.0;
  for (double v : kept.probs) z += v;
  for (double& v : kept.probs) v /= z;
  return kept;
}

std::vector<std::uint32_t> expand_candidates(std::size_t cell, std::span<const std::uint32_t> survivors,
                                             const CellSets& first_order) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t s : survivors)
    for (std::uint32_t y : first_order[s])
      if (y != cell) out.push_back(y);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ContextEntry first_order_entry(std::size_t cell, const Tensor& weights, const CellSets& first_order) {
  ContextEntry e;
  e.indices = first_order[cell];
  double z = 0.0;
  for (std::uint32_t j : e.indices) {
    e.probs.push_back(std::abs(weights(cell, j)));
    z += e.probs.back();
  }
  for (double& p : e.probs) p = z > 0.0 ? p / z : 1.0 / static_cast<double>(e.probs.size());
  return e;
}

ContextEntry score_and_filter(std::size_t cell, std::vector<std::uint32_t> candidates, const Tensor& queries,
                              const Tensor& keys, double scale, double thres) {
  ContextEntry e;
  if (candidates.empty()) return e;
  std::vector<double> scores(candidates.size());
  const std::size_t dk = queries.cols();
  const double* q = queries.data() + cell * dk;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const double* k = keys.data() + static_cast<std::size_t>(candidates[j]) * dk;
    double dot = 0.0;
    for (std::size_t i = 0; i < dk; ++i) dot += q[i] * k[i];
    scores[j] = dot * scale;
  }
  e.indices = std::move(candidates);
  e.probs = transition_probs(scores);
  return random_walk_filter(std::move(e), thres);
}

std::vector<double> order_context(std::size_t cell, Direction d, std::size_t order, const Tensor& phis,
                                  const AttentionParams& ap, const MultiOrderContext& ctx) {
  if (phis.cols() != ap.wv.rows()) throw ShapeError("order_context: feature width does not match Wv");
  const ContextEntry& e = ctx.at(cell, d, order);
  std::vector<double> out(ap.value_dim(), 0.0);
  for (std::size_t j = 0; j < e.indices.size(); ++j) {
    const auto row = phis.row(e.indices[j]);
    for (std::size_t i = 0; i < ap.wv.rows(); ++i) {
      const double a = e.probs[j] * row[i];
      if (a == 0.0) continue;
      for (std::size_t o = 0; o < out.size(); ++o) out[o] += a * ap.wv(i, o);
    }
  }
  return out;
}

MultiOrderContext build_multiorder(const Tensor& phis, const NeighborhoodSystem& ns, const AttentionLookup& ap,
                                   std::size_t max_order, double thres) {
  if (max_order == 0) throw ArgumentError("build_multiorder: max_order must be >= 1");
  const std::size_t n = ns.grid.cells();
  if (phis.rows() != n) throw ShapeError("build_multiorder: one feature row per cell expected");
  MultiOrderContext ctx(n, max_order);
  for (Direction d : kDirections) {
    const CellSets first = mask_neighbors(ns.masks[index_of(d)]);
    for (std::size_t x = 0; x < n; ++x) ctx.at(x, d, 1) = first_order_entry(x, ns.weights[index_of(d)], first);
    for (std::size_t p = 2; p <= max_order; ++p) {
      const AttentionParams& params = ap(p, d);
      params.validate();
      const Tensor q = kernels::serial::matmul(phis, params.wq);
      const Tensor k = kernels::serial::matmul(phis, params.wk);
      const double scale = 1.0 / std::sqrt(static_cast<double>(params.key_dim()));
      for (std::size_t x = 0; x < n; ++x) {
        auto cand = expand_candidates(x, ctx.at(x, d, p - 1).indices, first);
        ctx.at(x, d, p) = score_and_filter(x, std::move(cand), q, k, scale, thres);
      }
    }
  }
  return ctx;
}

}  // namespace dmckn
