#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmckn/grid.hpp"
#include "dmckn/tensor.hpp"

// First-order context-aware kernel on the Gram side (K ← S + γ Σ_c P_c K P_cᵀ)
// and on the explicit-map side (Φ ← [Φ0, √γ P_1 Φ, ..., √γ P_C Φ]).
namespace dmckn {

enum class Exec { Serial, Parallel };

/// Rows scaled to unit L2 norm. Throws DataError on an all-zero row.
Tensor normalize_rows(const Tensor& features);

/// Linear kernel of L2-normalised rows: S = X̂ X̂ᵀ.
Tensor base_similarity(const Tensor& features);

/// Block-diagonal lift of every P_c to a batch of `images` images, so that the
/// Gram recursion can run over the cells of all images at once.
std::vector<Tensor> lift_to_batch(const NeighborhoodSystem& ns, std::size_t images);

/// Applies the recursion exactly `iterations` times starting from K = S.
Tensor gram_iterate(const Tensor& s, std::span<const Tensor> p, double gamma, std::size_t iterations,
                    Exec exec = Exec::Serial);
Tensor gram_iterate(const Tensor& s, const NeighborhoodSystem& ns, double gamma, std::size_t iterations);

struct FixedPointResult {
  Tensor gram;
  std::size_t iterations = 0;
  std::vector<double> residuals;  // ‖K(t+1) − K(t)‖_F per step
};

/// Iterates until ‖ΔK‖_F ≤ tol. Throws DivergenceError (with the residual
/// decay trace) when max_iter is exhausted or an iterate turns non-finite.
FixedPointResult gram_fixed_point(const Tensor& s, std::span<const Tensor> p, double gamma, double tol,
                                  std::size_t max_iter, Exec exec = Exec::Serial);

struct ContextMapState {
  Tensor base;     // Φ0, cells × d0
  Tensor current;  // Φ(t), cells × d_t
  std::size_t layer = 0;
  double gamma = 0.0;
};

ContextMapState initial_map_state(Tensor base, double gamma);

/// One explicit map update; output width is d0 + C·d_t.
ContextMapState explicit_map_step(const ContextMapState& state, std::span<const Tensor> p);
ContextMapState explicit_map_step(const ContextMapState& state, const NeighborhoodSystem& ns);

/// Width of Φ(t) for base width d0 and C directions.
std::size_t explicit_map_width(std::size_t d0, std::size_t directions, std::size_t layer);

/// Largest singular value. Exact for matrices with at most one nonzero per
/// row and column; power iteration on PᵀP otherwise.
double spectral_norm(const Tensor& p);

/// γ Σ_c ‖P_c‖₂², the Lipschitz constant of the Gram recursion.
double contraction_factor(std::span<const Tensor> p, double gamma);

/// Uniform factor s ≤ 1 such that γ Σ_c ‖s P_c‖₂² ≤ rho.
double spectral_rescale_factor(std::span<const Tensor> p, double gamma, double rho);

/// Scales all weights uniformly so that γ Σ_c ‖P_c‖₂² ≤ rho; no-op when already satisfied.
NeighborhoodSystem spectral_rescale(NeighborhoodSystem ns, double gamma, double rho);

}  // namespace dmckn
