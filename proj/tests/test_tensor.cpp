#include <doctest.h>

#include <random>

#include "dmckn/error.hpp"
#include "dmckn/kernels.hpp"
#include "dmckn/tensor.hpp"
#include "support.hpp"

using namespace dmckn;
using testing_support::naive_matmul;
using testing_support::naive_transpose;
using testing_support::random_size;
using testing_support::random_tensor;

TEST_CASE("tensor basics") {
  Tensor t = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t(1, 2) == 6);
  CHECK(t.transposed() == naive_transpose(t));
  CHECK(frobenius_norm(t) == doctest::Approx(std::sqrt(91.0)));
  CHECK(max_abs(t) == 6);
  Tensor u = t + t;
  CHECK(u(0, 1) == 4);
  CHECK((u - t) == t);
  CHECK((2.0 * t) == u);
  CHECK(Tensor::identity(3)(1, 1) == 1);
  CHECK(Tensor::identity(3)(1, 2) == 0);
  CHECK_THROWS_AS(Tensor(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t += Tensor(3, 2), ShapeError);
  Tensor blocks[] = {Tensor(2, 1, 1.0), t};
  Tensor h = hstack(blocks);
  CHECK(h.cols() == 4);
  CHECK(h(1, 0) == 1);
  CHECK(h(1, 3) == 6);
  CHECK(all_finite(t));
  t(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(all_finite(t));
}

TEST_CASE("matmul flavours agree with a triple loop") {
  std::mt19937_64 rng(7);
  for (int it = 0; it < 50; ++it) {
    const std::size_t m = random_size(rng, 1, 40), k = random_size(rng, 1, 40), n = random_size(rng, 1, 40);
    const Tensor a = random_tensor(rng, m, k), b = random_tensor(rng, k, n);
    const Tensor ref = naive_matmul(a, b);
    CHECK(max_abs_diff(kernels::serial::matmul(a, b), ref) < 1e-12);
    CHECK(max_abs_diff(kernels::serial::matmul_tn(naive_transpose(a), b), ref) < 1e-12);
    CHECK(max_abs_diff(kernels::serial::matmul_nt(a, naive_transpose(b)), ref) < 1e-12);
    CHECK(kernels::omp::matmul(a, b) == kernels::serial::matmul(a, b));
    CHECK(kernels::omp::matmul_tn(naive_transpose(a), b) == kernels::serial::matmul_tn(naive_transpose(a), b));
    CHECK(kernels::omp::matmul_nt(a, naive_transpose(b)) == kernels::serial::matmul_nt(a, naive_transpose(b)));
    CHECK(kernels::matmul(a, b) == kernels::serial::matmul(a, b));

    Tensor acc = random_tensor(rng, m, n);
    const Tensor start = acc;
    kernels::matmul_acc(a, b, acc);
    CHECK(max_abs_diff(acc, start + ref) < 1e-12);
    acc = start;
    kernels::matmul_tn_acc(naive_transpose(a), b, acc);
    CHECK(max_abs_diff(acc, start + ref) < 1e-12);
    acc = start;
    kernels::matmul_nt_acc(a, naive_transpose(b), acc);
    CHECK(max_abs_diff(acc, start + ref) < 1e-12);
  }
  CHECK_THROWS_AS(kernels::serial::matmul(Tensor(2, 3), Tensor(2, 3)), ShapeError);
  CHECK_THROWS_AS(kernels::omp::matmul_nt(Tensor(2, 3), Tensor(2, 4)), ShapeError);
}

TEST_CASE("gram_step serial and parallel are identical") {
  std::mt19937_64 rng(11);
  for (int it = 0; it < 20; ++it) {
    const std::size_t n = random_size(rng, 1, 30);
    const Tensor s = random_tensor(rng, n, n), k = random_tensor(rng, n, n);
    std::vector<Tensor> p;
    for (int c = 0; c < 4; ++c) p.push_back(random_tensor(rng, n, n));
    const double gamma = 0.3;
    Tensor ref = s;
    for (const Tensor& pc : p) ref += gamma * naive_matmul(naive_matmul(pc, k), naive_transpose(pc));
    const Tensor a = kernels::serial::gram_step(s, k, p, gamma);
    CHECK(max_abs_diff(a, ref) < 1e-10);
    CHECK(kernels::omp::gram_step(s, k, p, gamma) == a);
  }
}
