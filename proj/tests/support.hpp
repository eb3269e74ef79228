#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "dmckn/tensor.hpp"

namespace testing_support {

inline dmckn::Tensor random_tensor(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double lo = -1.0,
                                   double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  dmckn::Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

inline std::size_t random_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// central differences of f at every entry of xs[which]
inline dmckn::Tensor numeric_grad(const std::function<double(const std::vector<dmckn::Tensor>&)>& f,
                                  std::vector<dmckn::Tensor> xs, std::size_t which, double h = 1e-6) {
  dmckn::Tensor g(xs[which].rows(), xs[which].cols());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double keep = xs[which][i];
    xs[which][i] = keep + h;
    const double up = f(xs);
    xs[which][i] = keep - h;
    const double down = f(xs);
    xs[which][i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// plain triple loop
inline dmckn::Tensor naive_matmul(const dmckn::Tensor& a, const dmckn::Tensor& b) {
  dmckn::Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

inline dmckn::Tensor naive_transpose(const dmckn::Tensor& a) {
  dmckn::Tensor t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace testing_support
