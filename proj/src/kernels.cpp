#include "dmckn/kernels.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <string>

#include "dmckn/error.hpp"

namespace dmckn::kernels {

void retain_heap() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

namespace {

void check_mm(std::size_t inner_a, std::size_t inner_b, const char* what) {
  if (inner_a != inner_b) {
    throw ShapeError(std::string(what) + ": inner dimensions " + std::to_string(inner_a) + " and " +
                     std::to_string(inner_b) + " differ");
  }
}

void check_out(const Tensor& out, std::size_t r, std::size_t c, const char* what) {
  if (out.rows() != r || out.cols() != c) throw ShapeError(std::string(what) + ": output shape mismatch");
}

// Row kernels shared by the serial and OpenMP paths.
inline void mm_row(const Tensor& a, const Tensor& b, Tensor& out, std::size_t i) {
  const std::size_t n = a.cols(), m = b.cols();
  double* o = out.data() + i * m;
  const double* ai = a.data() + i * n;
  for (std::size_t k = 0; k < n; ++k) {
    const double av = ai[k];
    if (av == 0.0) continue;
    const double* bk = b.data() + k * m;
    for (std::size_t j = 0; j < m; ++j) o[j] += av * bk[j];
  }
}

// out row i of aᵀ·b: Σ_k a(k,i) b(k,:)
inline void mm_tn_row(const Tensor& a, const Tensor& b, Tensor& out, std::size_t i) {
  const std::size_t m = b.cols();
  double* o = out.data() + i * m;
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double av = a(k, i);
    if (av == 0.0) continue;
    const double* bk = b.data() + k * m;
    for (std::size_t j = 0; j < m; ++j) o[j] += av * bk[j];
  }
}

template <typename RowFn>
void run_rows(std::size_t rows, RowFn&& fn, bool parallel) {
  if (parallel) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) fn(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < rows; ++i) fn(i);
  }
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool parallel) {
  check_mm(a.cols(), b.rows(), "matmul");
  Tensor out(a.rows(), b.cols());
  run_rows(a.rows(), [&](std::size_t i) { mm_row(a, b, out, i); }, parallel);
  return out;
}

Tensor matmul_tn_impl(const Tensor& a, const Tensor& b, bool parallel) {
  check_mm(a.rows(), b.rows(), "matmul_tn");
  Tensor out(a.cols(), b.cols());
  run_rows(a.cols(), [&](std::size_t i) { mm_tn_row(a, b, out, i); }, parallel);
  return out;
}

// a·bᵀ through an explicit transpose so the inner loop runs contiguously
Tensor matmul_nt_impl(const Tensor& a, const Tensor& b, bool parallel) {
  check_mm(a.cols(), b.cols(), "matmul_nt");
  const Tensor bt = b.transposed();
  Tensor out(a.rows(), b.rows());
  run_rows(a.rows(), [&](std::size_t i) { mm_row(a, bt, out, i); }, parallel);
  return out;
}

Tensor gram_step_impl(const Tensor& s, const Tensor& k, std::span<const Tensor> p, double gamma,
                      bool parallel) {
  require_same_shape(s, k, "gram_step");
  Tensor out = s;
  for (const Tensor& pc : p) {
    require_same_shape(pc, k, "gram_step P_c");
    const Tensor pk = matmul_impl(pc, k, parallel);
    const Tensor pkpt = matmul_nt_impl(pk, pc, parallel);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += gamma * pkpt[i];
  }
  return out;
}

}  // namespace

namespace serial {
Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false); }
Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul_tn_impl(a, b, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_nt_impl(a, b, false); }
Tensor gram_step(const Tensor& s, const Tensor& k, std::span<const Tensor> p, double gamma) {
  return gram_step_impl(s, k, p, gamma, false);
}
}  // namespace serial

namespace omp {
Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true); }
Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul_tn_impl(a, b, true); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_nt_impl(a, b, true); }
Tensor gram_step(const Tensor& s, const Tensor& k, std::span<const Tensor> p, double gamma) {
  return gram_step_impl(s, k, p, gamma, true);
}
}  // namespace omp

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  check_mm(a.cols(), b.rows(), "matmul_acc");
  check_out(out, a.rows(), b.cols(), "matmul_acc");
  for (std::size_t i = 0; i < a.rows(); ++i) mm_row(a, b, out, i);
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  check_mm(a.rows(), b.rows(), "matmul_tn_acc");
  check_out(out, a.cols(), b.cols(), "matmul_tn_acc");
  // k-outer order keeps the inner loop contiguous in both a and b.
  const std::size_t m = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* ak = a.data() + k * a.cols();
    const double* bk = b.data() + k * m;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = ak[i];
      if (av == 0.0) continue;
      double* o = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * bk[j];
    }
  }
}

void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  check_mm(a.cols(), b.cols(), "matmul_nt_acc");
  check_out(out, a.rows(), b.rows(), "matmul_nt_acc");
  const Tensor bt = b.transposed();
  for (std::size_t i = 0; i < a.rows(); ++i) mm_row(a, bt, out, i);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t work = a.rows() * a.cols() * b.cols();
  if (num_threads() > 1 && work > (1u << 18)) return omp::matmul(a, b);
  return serial::matmul(a, b);
}

}  // namespace dmckn::kernels
