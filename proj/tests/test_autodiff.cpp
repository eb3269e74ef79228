#include <doctest.h>

#include <cmath>
#include <memory>
#include <random>

#include "dmckn/autodiff.hpp"
#include "dmckn/error.hpp"
#include "support.hpp"

using namespace dmckn;
using testing_support::naive_matmul;
using testing_support::naive_transpose;
using testing_support::numeric_grad;
using testing_support::random_size;
using testing_support::random_tensor;

namespace {

using Inputs = std::vector<Tensor>;

struct OpCase {
  const char* name;
  std::function<Inputs(std::mt19937_64&)> make;
  std::function<ad::Var(std::vector<ad::Var>&)> op;
  std::function<Tensor(const Inputs&)> oracle;
  std::size_t differentiable = 99;  // inputs [0, differentiable) are checked
};

// Runs the op on a tape, compares the value with the oracle and the gradient of
// Σ R ⊙ op(x) with central differences of the oracle.
void run_case(const OpCase& c, int instances, double tol = 1e-6) {
  std::mt19937_64 rng(std::hash<std::string>{}(c.name));
  double worst = 0.0;
  for (int it = 0; it < instances; ++it) {
    const Inputs xs = c.make(rng);
    const Tensor want = c.oracle(xs);
    const Tensor r = random_tensor(rng, want.rows(), want.cols());
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Tensor& x : xs) vars.push_back(tape.variable(x));
    ad::Var out = c.op(vars);
    REQUIRE(out.rows() == want.rows());
    REQUIRE(out.cols() == want.cols());
    CHECK(max_abs_diff(out.value(), want) < 1e-10);
    ad::Var loss = ad::sum(ad::hadamard(out, tape.constant(r)));
    tape.backward(loss);
    auto probe = [&](const Inputs& v) {
      const Tensor y = c.oracle(v);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
      return s;
    };
    for (std::size_t k = 0; k < xs.size() && k < c.differentiable; ++k) {
      const Tensor num = numeric_grad(probe, xs, k);
      const Tensor ana = vars[k].grad();
      REQUIRE(same_shape(num, ana));
      for (std::size_t i = 0; i < num.size(); ++i) {
        const double e = std::abs(num[i] - ana[i]) / std::max({std::abs(num[i]), std::abs(ana[i]), 1.0});
        worst = std::max(worst, e);
      }
    }
  }
  INFO(c.name << " worst relative error " << worst);
  CHECK(worst < tol);
}

double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Tensor softmax_rows(const Tensor& a) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double z = 0;
    for (std::size_t j = 0; j < a.cols(); ++j) z += std::exp(a(i, j));
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = std::exp(a(i, j)) / z;
  }
  return out;
}

// keeps entries away from the relu kink so differences stay one-sided-free
Tensor away_from_zero(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  Tensor t = random_tensor(rng, r, c);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (std::abs(t[i]) < 1e-3) t[i] = 0.5;
  return t;
}

}  // namespace

TEST_CASE("elementwise and structural ops match finite differences") {
  auto two_same = [](std::mt19937_64& g) {
    const std::size_t r = random_size(g, 1, 6), c = random_size(g, 1, 6);
    return Inputs{random_tensor(g, r, c), random_tensor(g, r, c)};
  };
  auto one = [](std::mt19937_64& g) { return Inputs{random_tensor(g, random_size(g, 1, 6), random_size(g, 1, 6))}; };

  const std::vector<OpCase> cases = {
      {"add", two_same, [](auto& v) { return ad::add(v[0], v[1]); }, [](const Inputs& x) { return x[0] + x[1]; }},
      {"sub", two_same, [](auto& v) { return ad::sub(v[0], v[1]); }, [](const Inputs& x) { return x[0] - x[1]; }},
      {"scale", one, [](auto& v) { return ad::scale(v[0], -1.7); }, [](const Inputs& x) { return -1.7 * x[0]; }},
      {"hadamard", two_same, [](auto& v) { return ad::hadamard(v[0], v[1]); },
       [](const Inputs& x) {
         Tensor o = x[0];
         for (std::size_t i = 0; i < o.size(); ++i) o[i] *= x[1][i];
         return o;
       }},
      {"transpose", one, [](auto& v) { return ad::transpose(v[0]); },
       [](const Inputs& x) { return naive_transpose(x[0]); }},
      {"matmul",
       [](std::mt19937_64& g) {
         const std::size_t m = random_size(g, 1, 5), k = random_size(g, 1, 5), n = random_size(g, 1, 5);
         return Inputs{random_tensor(g, m, k), random_tensor(g, k, n)};
       },
       [](auto& v) { return ad::matmul(v[0], v[1]); }, [](const Inputs& x) { return naive_matmul(x[0], x[1]); }},
      {"concat_rows",
       [](std::mt19937_64& g) {
         const std::size_t c = random_size(g, 1, 5);
         return Inputs{random_tensor(g, random_size(g, 1, 4), c), random_tensor(g, random_size(g, 1, 4), c),
                       random_tensor(g, random_size(g, 1, 4), c)};
       },
       [](auto& v) { return ad::concat_rows(v); },
       [](const Inputs& x) {
         Tensor o(x[0].rows() + x[1].rows() + x[2].rows(), x[0].cols());
         std::size_t r = 0;
         for (const Tensor& t : x)
           for (std::size_t i = 0; i < t.rows(); ++i, ++r)
             for (std::size_t j = 0; j < t.cols(); ++j) o(r, j) = t(i, j);
         return o;
       }},
      {"concat_cols",
       [](std::mt19937_64& g) {
         const std::size_t r = random_size(g, 1, 5);
         return Inputs{random_tensor(g, r, random_size(g, 1, 4)), random_tensor(g, r, random_size(g, 1, 4))};
       },
       [](auto& v) { return ad::concat_cols(v); },
       [](const Inputs& x) {
         Tensor o(x[0].rows(), x[0].cols() + x[1].cols());
         for (std::size_t i = 0; i < o.rows(); ++i)
           for (std::size_t j = 0; j < o.cols(); ++j)
             o(i, j) = j < x[0].cols() ? x[0](i, j) : x[1](i, j - x[0].cols());
         return o;
       }},
      {"row_sum", one, [](auto& v) { return ad::row_sum(v[0]); },
       [](const Inputs& x) {
         Tensor o(x[0].rows(), 1);
         for (std::size_t i = 0; i < x[0].rows(); ++i)
           for (std::size_t j = 0; j < x[0].cols(); ++j) o(i, 0) += x[0](i, j);
         return o;
       }},
      {"sum", one, [](auto& v) { return ad::sum(v[0]); },
       [](const Inputs& x) {
         Tensor o(1, 1);
         for (std::size_t i = 0; i < x[0].size(); ++i) o[0] += x[0][i];
         return o;
       }},
      {"add_row_broadcast",
       [](std::mt19937_64& g) {
         const std::size_t r = random_size(g, 1, 5), c = random_size(g, 1, 5);
         return Inputs{random_tensor(g, r, c), random_tensor(g, 1, c)};
       },
       [](auto& v) { return ad::add_row_broadcast(v[0], v[1]); },
       [](const Inputs& x) {
         Tensor o = x[0];
         for (std::size_t i = 0; i < o.rows(); ++i)
           for (std::size_t j = 0; j < o.cols(); ++j) o(i, j) += x[1](0, j);
         return o;
       }},
      {"sigmoid",
       [](std::mt19937_64& g) { return Inputs{random_tensor(g, random_size(g, 1, 5), random_size(g, 1, 5), -4, 4)}; },
       [](auto& v) { return ad::sigmoid(v[0]); },
       [](const Inputs& x) {
         Tensor o = x[0];
         for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigm(o[i]);
         return o;
       }},
      {"relu", [](std::mt19937_64& g) { return Inputs{away_from_zero(g, random_size(g, 1, 5), random_size(g, 1, 5))}; },
       [](auto& v) { return ad::relu(v[0]); },
       [](const Inputs& x) {
         Tensor o = x[0];
         for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(0.0, o[i]);
         return o;
       }},
      {"row_softmax",
       [](std::mt19937_64& g) { return Inputs{random_tensor(g, random_size(g, 1, 5), random_size(g, 1, 6), -3, 3)}; },
       [](auto& v) { return ad::row_softmax(v[0]); }, [](const Inputs& x) { return softmax_rows(x[0]); }},
      {"sq_frobenius", one, [](auto& v) { return ad::sq_frobenius(v[0]); },
       [](const Inputs& x) {
         Tensor o(1, 1);
         for (std::size_t i = 0; i < x[0].size(); ++i) o[0] += x[0][i] * x[0][i];
         return o;
       }},
  };
  for (const OpCase& c : cases) {
    SUBCASE(c.name) { run_case(c, 100); }
  }
}

TEST_CASE("logistic loss matches the cross-entropy of the sigmoid") {
  OpCase c{"logistic_loss",
           [](std::mt19937_64& g) {
             const std::size_t r = random_size(g, 1, 4), n = random_size(g, 1, 6);
             Tensor signs(r, n), mask(r, n);
             for (std::size_t i = 0; i < signs.size(); ++i) {
               signs[i] = g() % 2 ? 1.0 : -1.0;
               mask[i] = static_cast<double>(g() % 2);
             }
             return Inputs{random_tensor(g, r, n, -5, 5), signs, mask};
           },
           [](auto& v) { return ad::logistic_loss(v[0], v[1].value(), v[2].value()); },
           [](const Inputs& x) {
             Tensor o(1, 1);
             for (std::size_t i = 0; i < x[0].size(); ++i) {
               const double t = (x[1][i] + 1.0) / 2.0, p = sigm(x[0][i]);
               o[0] -= x[2][i] * (t * std::log(p) + (1 - t) * std::log(1 - p));
             }
             return o;
           },
           1};
  run_case(c, 100);
}

TEST_CASE("logistic loss stays finite for large logits") {
  ad::Tape tape;
  ad::Var z = tape.variable(Tensor::from_rows({{800.0, -800.0}}));
  ad::Var l = ad::logistic_loss(z, Tensor::from_rows({{-1.0, 1.0}}), Tensor(1, 2, 1.0));
  CHECK(l.value()[0] == doctest::Approx(1600.0));
  tape.backward(l);
  CHECK(z.grad()(0, 0) == doctest::Approx(1.0));
  CHECK(z.grad()(0, 1) == doctest::Approx(-1.0));
}

TEST_CASE("masked matmul ignores entries off the support") {
  struct Holder {
    std::shared_ptr<ad::RowSupport> support;
    Tensor mask;
  };
  auto h = std::make_shared<Holder>();
  OpCase c{"masked_matmul",
           [h](std::mt19937_64& g) {
             const std::size_t n = random_size(g, 1, 6), d = random_size(g, 1, 4);
             h->mask = Tensor(n, n);
             h->support = std::make_shared<ad::RowSupport>();
             h->support->offsets.push_back(0);
             for (std::size_t i = 0; i < n; ++i) {
               for (std::size_t j = 0; j < n; ++j)
                 if (g() % 3 == 0) {
                   h->mask(i, j) = 1;
                   h->support->columns.push_back(static_cast<std::uint32_t>(j));
                 }
               h->support->offsets.push_back(static_cast<std::uint32_t>(h->support->columns.size()));
             }
             return Inputs{random_tensor(g, n, n), random_tensor(g, n, d)};
           },
           [h](auto& v) { return ad::masked_matmul(v[0], v[1], h->support); },
           [h](const Inputs& x) {
             Tensor p = x[0];
             for (std::size_t i = 0; i < p.size(); ++i) p[i] *= h->mask[i];
             return naive_matmul(p, x[1]);
           }};
  run_case(c, 100);
}

TEST_CASE("neighborhood attention matches the softmax-weighted sum") {
  auto sets = std::make_shared<ad::IndexSets>();
  static constexpr double scale = 0.7;
  OpCase c{"neighborhood_attention",
           [sets](std::mt19937_64& g) {
             const std::size_t n = random_size(g, 1, 6), dk = random_size(g, 1, 4), dv = random_size(g, 1, 4);
             sets->assign(n, {});
             for (std::size_t i = 0; i < n; ++i)
               for (std::size_t j = 0; j < n; ++j)
                 if (g() % 2) (*sets)[i].push_back(static_cast<std::uint32_t>(j));
             return Inputs{random_tensor(g, n, dk), random_tensor(g, n, dk), random_tensor(g, n, dv)};
           },
           [sets](auto& v) {
             return ad::neighborhood_attention(v[0], v[1], v[2], std::make_shared<const ad::IndexSets>(*sets),
                                               scale);
           },
           [sets](const Inputs& x) {
             const Tensor& q = x[0];
             const Tensor& k = x[1];
             const Tensor& v = x[2];
             Tensor out(q.rows(), v.cols());
             for (std::size_t i = 0; i < q.rows(); ++i) {
               const auto& s = (*sets)[i];
               std::vector<double> e(s.size());
               double z = 0;
               for (std::size_t j = 0; j < s.size(); ++j) {
                 double dot = 0;
                 for (std::size_t t = 0; t < q.cols(); ++t) dot += q(i, t) * k(s[j], t);
                 e[j] = std::exp(dot * scale);
                 z += e[j];
               }
               for (std::size_t j = 0; j < s.size(); ++j)
                 for (std::size_t t = 0; t < v.cols(); ++t) out(i, t) += e[j] / z * v(s[j], t);
             }
             return out;
           }};
  run_case(c, 100);
}

TEST_CASE("fan-out accumulates and unreachable leaves get zero") {
  ad::Tape tape;
  ad::Var x = tape.variable(Tensor::from_rows({{2.0}}));
  ad::Var unused = tape.variable(Tensor::from_rows({{5.0}}));
  ad::Var y = ad::add(ad::hadamard(x, x), ad::scale(x, 3.0));
  tape.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(7.0));
  CHECK(unused.grad()(0, 0) == 0.0);
}

TEST_CASE("parameter slots report their gradients") {
  Tensor w = Tensor::from_rows({{1.0, -2.0}});
  ad::Tape tape;
  ad::Var p = tape.parameter(w, 3);
  ad::Var unused = tape.parameter(w, 5);
  (void)unused;
  tape.backward(ad::sq_frobenius(p));
  const auto grads = tape.parameter_grads();
  REQUIRE(grads.size() == 2);
  bool seen3 = false, seen5 = false;
  for (const auto& g : grads) {
    if (g.slot == 3) {
      seen3 = true;
      REQUIRE(g.grad != nullptr);
      CHECK((*g.grad)(0, 1) == doctest::Approx(-4.0));
    }
    if (g.slot == 5) {
      seen5 = true;
      CHECK((g.grad == nullptr || max_abs(*g.grad) == 0.0));
    }
  }
  CHECK(seen3);
  CHECK(seen5);
}

TEST_CASE("shape errors and strict mode") {
  ad::Tape tape;
  ad::Var a = tape.variable(Tensor(2, 3));
  ad::Var b = tape.variable(Tensor(2, 2));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
  ad::Var big = tape.variable(Tensor(1, 1, 1e308));
  CHECK_THROWS_AS(ad::scale(big, 10.0), NonFiniteError);
}

TEST_CASE("check_gradients passes on a correct loss and flags a wrong one") {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor(rng, 3, 4), b = random_tensor(rng, 4, 2);
  std::vector<ad::GradCheckParam> params{{"a", &a}, {"b", &b}};
  auto good = [](ad::Tape&, std::span<const ad::Var> v) { return ad::sq_frobenius(ad::matmul(v[0], v[1])); };
  const auto ok = ad::check_gradients(good, params, {1e-5, 1e-6, 1e-6});
  CHECK(ok.passed);
  CHECK(ok.max_rel_error < 1e-6);
  CHECK(ok.params.size() == 2);
  auto bad = [&a](ad::Tape& t, std::span<const ad::Var> v) {
    // a read off the tape: its contribution is invisible to backward
    Tensor c(1, 1, a(0, 0) * a(0, 0));
    return ad::add(ad::sq_frobenius(ad::matmul(v[0], v[1])), t.constant(c));
  };
  const auto ko = ad::check_gradients(bad, params, {1e-5, 1e-6, 1e-6});
  CHECK_FALSE(ko.passed);
  CHECK(ko.params[0].max_rel_error > 1e-3);
}
