#include "dmckn/kernel_core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "dmckn/error.hpp"
#include "dmckn/kernels.hpp"

namespace dmckn {

Tensor normalize_rows(const Tensor& features) {
  Tensor out = features;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double s = 0.0;
    for (double v : out.row(r)) s += v * v;
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw DataError("base_similarity: feature row " + std::to_string(r) + " is zero or non-finite");
    }
    const double inv = 1.0 / std::sqrt(s);
    for (double& v : out.row(r)) v *= inv;
  }
  return out;
}

Tensor base_similarity(const Tensor& features) {
  const Tensor x = normalize_rows(features);
  return kernels::serial::matmul_nt(x, x);
}

std::vector<Tensor> lift_to_batch(const NeighborhoodSystem& ns, std::size_t images) {
  const std::size_t n = ns.grid.cells();
  std::vector<Tensor> out;
  for (const Tensor& w : ns.weights) {
    Tensor big(n * images, n * images);
    for (std::size_t m = 0; m < images; ++m)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) big(m * n + r, m * n + c) = w(r, c);
    out.push_back(std::move(big));
  }
  return out;
}

namespace {

Tensor step(const Tensor& s, const Tensor& k, std::span<const Tensor> p, double gamma, Exec exec) {
  return exec == Exec::Parallel ? kernels::omp::gram_step(s, k, p, gamma) : kernels::serial::gram_step(s, k, p, gamma);
}

void check_gamma(double gamma) {
  if (!(gamma >= 0.0)) throw ArgumentError("gamma must be >= 0");
}

}  // namespace

Tensor gram_iterate(const Tensor& s, std::span<const Tensor> p, double gamma, std::size_t iterations, Exec exec) {
  check_gamma(gamma);
  Tensor k = s;
  for (std::size_t t = 0; t < iterations; ++t) {
    k = step(s, k, p, gamma, exec);
    if (!all_finite(k)) throw DivergenceError("gram_iterate: non-finite iterate at step " + std::to_string(t + 1));
  }
  return k;
}

Tensor gram_iterate(const Tensor& s, const NeighborhoodSystem& ns, double gamma, std::size_t iterations) {
  const std::size_t n = ns.grid.cells();
  if (n == 0 || s.rows() % n != 0) throw ShapeError("gram_iterate: S size is not a multiple of the cell count");
  const auto lifted = lift_to_batch(ns, s.rows() / n);
  return gram_iterate(s, lifted, gamma, iterations);
}

FixedPointResult gram_fixed_point(const Tensor& s, std::span<const Tensor> p, double gamma, double tol,
                                  std::size_t max_iter, Exec exec) {
  check_gamma(gamma);
  FixedPointResult result;
  Tensor k = s;
  for (std::size_t t = 0; t < max_iter; ++t) {
    Tensor next = step(s, k, p, gamma, exec);
    if (!all_finite(next)) throw DivergenceError("gram_fixed_point: non-finite iterate at step " + std::to_string(t + 1));
    const double r = frobenius_norm(next - k);
    result.residuals.push_back(r);
    k = std::move(next);
    if (r <= tol) {
      result.gram = std::move(k);
      result.iterations = t + 1;
      return result;
    }
  }
  std::ostringstream msg;
  msg << "gram_fixed_point: no convergence to " << tol << " within " << max_iter
      << " iterations; contraction factor " << contraction_factor(p, gamma) << "; decay ratios:";
  for (std::size_t i = 1; i < result.residuals.size(); ++i) {
    if (i > 1 && i + 5 < result.residuals.size()) continue;  // head and tail only
    msg << ' ' << result.residuals[i] / result.residuals[i - 1];
  }
  throw DivergenceError(msg.str());
}

ContextMapState initial_map_state(Tensor base, double gamma) {
  check_gamma(gamma);
  ContextMapState s;
  s.current = base;
  s.base = std::move(base);
  s.gamma = gamma;
  return s;
}

ContextMapState explicit_map_step(const ContextMapState& state, std::span<const Tensor> p) {
  const double root = std::sqrt(state.gamma);
  std::vector<Tensor> blocks;
  blocks.reserve(p.size() + 1);
  blocks.push_back(state.base);
  for (const Tensor& pc : p) {
    if (pc.cols() != state.current.rows()) throw ShapeError("explicit_map_step: P_c does not match the map rows");
    blocks.push_back(root * kernels::serial::matmul(pc, state.current));
  }
  ContextMapState next;
  next.base = state.base;
  next.current = hstack(blocks);
  next.layer = state.layer + 1;
  next.gamma = state.gamma;
  return next;
}

ContextMapState explicit_map_step(const ContextMapState& state, const NeighborhoodSystem& ns) {
  const std::size_t n = ns.grid.cells();
  if (n == 0 || state.current.rows() % n != 0) throw ShapeError("explicit_map_step: map rows not a multiple of the cell count");
  const auto lifted = lift_to_batch(ns, state.current.rows() / n);
  return explicit_map_step(state, lifted);
}

std::size_t explicit_map_width(std::size_t d0, std::size_t directions, std::size_t layer) {
  std::size_t d = d0;
  for (std::size_t t = 0; t < layer; ++t) d = d0 + directions * d;
  return d;
}

double spectral_norm(const Tensor& p) {
  // Partial permutation pattern: singular values are the absolute entries.
  bool sparse_pattern = true;
  std::vector<int> col_count(p.cols(), 0);
  double max_entry = 0.0;
  for (std::size_t r = 0; r < p.rows() && sparse_pattern; ++r) {
    int row_count = 0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
      if (p(r, c) == 0.0) continue;
      max_entry = std::max(max_entry, std::abs(p(r, c)));
      if (++row_count > 1 || ++col_count[c] > 1) {
        sparse_pattern = false;
        break;
      }
    }
  }
  if (sparse_pattern) return max_entry;

  const std::size_t n = p.cols();
  Tensor v(n, 1);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 1e-3 * static_cast<double>(i % 7);
  double lambda = 0.0;
  for (int it = 0; it < 2000; ++it) {
    const double norm = frobenius_norm(v);
    if (norm == 0.0) return 0.0;
    v *= 1.0 / norm;
    const Tensor pv = kernels::serial::matmul(p, v);
    Tensor w = kernels::serial::matmul_tn(p, pv);
    double next = 0.0;
    for (std::size_t i = 0; i < n; ++i) next += v[i] * w[i];
    const bool done = std::abs(next - lambda) <= 1e-15 * std::max(1.0, next);
    lambda = next;
    v = std::move(w);
    if (done) break;
  }
  return std::sqrt(std::max(0.0, lambda));
}

double contraction_factor(std::span<const Tensor> p, double gamma) {
  double sum = 0.0;
  for (const Tensor& pc : p) {
    const double s = spectral_norm(pc);
    sum += s * s;
  }
  return gamma * sum;
}

double spectral_rescale_factor(std::span<const Tensor> p, double gamma, double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw ArgumentError("spectral_rescale: rho must lie in (0, 1)");
  const double f = contraction_factor(p, gamma);
  if (f <= rho) return 1.0;
  // tiny margin so rounding cannot leave the bound violated
  return std::sqrt(rho / f) * (1.0 - 1e-12);
}

NeighborhoodSystem spectral_rescale(NeighborhoodSystem ns, double gamma, double rho) {
  const double s = spectral_rescale_factor(ns.weights, gamma, rho);
  if (s != 1.0)
    for (Tensor& w : ns.weights) w *= s;
  return ns;
}

}  // namespace dmckn
