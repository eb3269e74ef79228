#pragma once

#include <cstddef>
#include <span>

#include "dmckn/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Dense kernels in two flavours: `serial` is the reference used by tests,
// `omp` distributes the outer loop over OpenMP threads. Both produce the same
// values bit for bit because every output entry is reduced in the same order.
namespace dmckn::kernels {

inline void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

inline int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Keeps large tensor buffers on the heap instead of fresh mmap pages per
// allocation (glibc only, no-op elsewhere). Training allocates per op.
void retain_heap();

inline int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

namespace serial {
/// out = a·b
Tensor matmul(const Tensor& a, const Tensor& b);
/// out = aᵀ·b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// out = a·bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// S + γ Σ_c P_c K P_cᵀ
Tensor gram_step(const Tensor& s, const Tensor& k, std::span<const Tensor> p, double gamma);
}  // namespace serial

namespace omp {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor gram_step(const Tensor& s, const Tensor& k, std::span<const Tensor> p, double gamma);
}  // namespace omp

// Accumulating forms used by the autodiff backward passes (always serial:
// they run inside per-image tapes that are already distributed over threads).
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out);

/// Dispatches to omp above a work threshold when more than one thread is available.
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace dmckn::kernels
