#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "dmckn/error.hpp"
#include "dmckn/multiorder.hpp"
#include "support.hpp"

using namespace dmckn;
using testing_support::random_size;
using testing_support::random_tensor;

namespace {

ContextEntry random_entry(std::mt19937_64& rng, std::size_t n, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  std::vector<double> scores(n);
  for (double& s : scores) s = u(rng);
  ContextEntry e;
  e.indices.resize(n);
  std::iota(e.indices.begin(), e.indices.end(), 0u);
  e.probs = transition_probs(scores);
  return e;
}

AttentionParams random_attention(std::mt19937_64& rng, std::size_t din, std::size_t dk, std::size_t dv) {
  return {random_tensor(rng, din, dk), random_tensor(rng, din, dk), random_tensor(rng, din, dv)};
}

}  // namespace

TEST_CASE("softmax of scores") {
  const std::vector<double> s{1.0, 2.0, 3.0};
  const auto p = transition_probs(s);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(p[0] == doctest::Approx(std::exp(1.0) / z));
  CHECK(p[1] == doctest::Approx(std::exp(2.0) / z));
  CHECK(p[2] == doctest::Approx(std::exp(3.0) / z));
  const auto big = transition_probs(std::vector<double>{1000.0, 1000.0});
  CHECK(big[0] == doctest::Approx(0.5));
  CHECK(transition_probs(std::vector<double>{}).empty());
  CHECK(transition_probs(std::vector<double>{-7.0})[0] == 1.0);
}

TEST_CASE("probability invariants over random neighbourhoods") {
  std::mt19937_64 rng(21);
  for (int it = 0; it < 1000; ++it) {
    const std::size_t n = random_size(rng, 1, 12);
    const ContextEntry e = random_entry(rng, n, it % 2 ? 3.0 : 30.0);
    double sum = 0;
    for (double p : e.probs) sum += p;
    CHECK(std::abs(sum - 1.0) <= 1e-9);

    const double thres = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const ContextEntry f = random_walk_filter(e, thres);
    CHECK_FALSE(f.indices.empty());
    double fs = 0;
    for (double p : f.probs) fs += p;
    CHECK(std::abs(fs - 1.0) <= 1e-9);
    const double m = *std::max_element(e.probs.begin(), e.probs.end());
    for (std::size_t j = 0; j < n; ++j) {
      const bool kept = std::find(f.indices.begin(), f.indices.end(), e.indices[j]) != f.indices.end();
      CHECK(kept == (e.probs[j] / m >= thres));
    }

    const ContextEntry same = random_walk_filter(e, 0.0);
    CHECK(same.indices == e.indices);
    CHECK(same.probs == e.probs);

    const ContextEntry top = random_walk_filter(e, 1.0);
    REQUIRE(top.indices.size() == 1);
    const auto arg = std::max_element(e.probs.begin(), e.probs.end()) - e.probs.begin();
    CHECK(top.indices[0] == e.indices[static_cast<std::size_t>(arg)]);
    CHECK(top.probs[0] == 1.0);
  }
}

TEST_CASE("filter edge cases") {
  ContextEntry tie{{4, 7}, {0.5, 0.5}};
  const ContextEntry top = random_walk_filter(tie, 1.0);
  CHECK(top.indices == std::vector<std::uint32_t>{4});
  CHECK(random_walk_filter(tie, 0.99).indices.size() == 2);
  CHECK(random_walk_filter(ContextEntry{}, 0.5).indices.empty());
  CHECK_THROWS_AS(random_walk_filter(tie, 1.5), ArgumentError);
  CHECK_THROWS_AS(random_walk_filter(tie, -0.1), ArgumentError);
  CHECK_THROWS_AS(random_walk_filter(ContextEntry{{1}, {}}, 0.5), ShapeError);
}

TEST_CASE("attention scores are scaled dot products") {
  std::mt19937_64 rng(22);
  const AttentionParams ap = random_attention(rng, 5, 3, 2);
  const Tensor phis = random_tensor(rng, 4, 5);
  const auto s = attention_scores(phis.row(0), phis, ap);
  REQUIRE(s.size() == 4);
  for (std::size_t j = 0; j < 4; ++j) {
    double dot = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      double q = 0, kk = 0;
      for (std::size_t i = 0; i < 5; ++i) {
        q += phis(0, i) * ap.wq(i, k);
        kk += phis(j, i) * ap.wk(i, k);
      }
      dot += q * kk;
    }
    CHECK(s[j] == doctest::Approx(dot / std::sqrt(3.0)));
  }
  const AttentionParams bad{Tensor(5, 3), Tensor(5, 2), Tensor(5, 2)};
  CHECK_THROWS_AS(attention_scores(phis.row(0), phis, bad), ShapeError);
}

TEST_CASE("first order entries normalise the weights") {
  const GridSpec g = build_grid(2, 3);
  NeighborhoodSystem ns = init_neighborhood(g);
  const CellSets first = mask_neighbors(ns.masks[index_of(Direction::Right)]);
  const ContextEntry e = first_order_entry(0, ns.weights[index_of(Direction::Right)], first);
  CHECK(e.indices == std::vector<std::uint32_t>{1});
  CHECK(e.probs == std::vector<double>{1.0});
  CHECK(first_order_entry(2, ns.weights[index_of(Direction::Right)], first).indices.empty());
  const Tensor w = Tensor::from_rows({{0, 1, -3}, {0, 0, 0}, {0, 0, 0}});
  const CellSets f2{{1, 2}, {}, {}};
  const ContextEntry e2 = first_order_entry(0, w, f2);
  CHECK(e2.probs[0] == doctest::Approx(0.25));
  CHECK(e2.probs[1] == doctest::Approx(0.75));
  const ContextEntry e3 = first_order_entry(0, Tensor(3, 3), f2);
  CHECK(e3.probs[0] == doctest::Approx(0.5));
}

TEST_CASE("multi-order context on random masks matches a direct walk") {
  std::mt19937_64 rng(23);
  for (int it = 0; it < 40; ++it) {
    const std::size_t n = random_size(rng, 2, 7), din = random_size(rng, 1, 4), dk = random_size(rng, 1, 3);
    const std::size_t max_order = random_size(rng, 1, 4);
    const double thres = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    NeighborhoodSystem ns;
    ns.grid = GridSpec{1, n};
    for (std::size_t c = 0; c < kDirectionCount; ++c) {
      ns.masks[c] = Tensor(n, n);
      for (std::size_t i = 0; i < ns.masks[c].size(); ++i) ns.masks[c][i] = rng() % 3 == 0 ? 1.0 : 0.0;
      ns.weights[c] = ns.masks[c];
    }
    std::vector<AttentionParams> aps;
    for (std::size_t k = 0; k < 4 * max_order; ++k) aps.push_back(random_attention(rng, din, dk, 2));
    auto lookup = [&](std::size_t order, Direction d) -> const AttentionParams& {
      return aps[order * 4 + index_of(d) - 4];
    };
    const Tensor phis = random_tensor(rng, n, din, -2, 2);
    const MultiOrderContext ctx = build_multiorder(phis, ns, lookup, max_order, thres);
    for (Direction d : kDirections) {
      const Tensor& m = ns.masks[index_of(d)];
      for (std::size_t x = 0; x < n; ++x) {
        std::set<std::uint32_t> survivors;
        for (std::size_t y = 0; y < n; ++y)
          if (m(x, y) != 0) survivors.insert(static_cast<std::uint32_t>(y));
        CHECK(ctx.at(x, d, 1).indices == std::vector<std::uint32_t>(survivors.begin(), survivors.end()));
        for (std::size_t p = 2; p <= max_order; ++p) {
          std::set<std::uint32_t> cand;
          for (std::uint32_t s : survivors)
            for (std::size_t y = 0; y < n; ++y)
              if (m(s, y) != 0 && y != x) cand.insert(static_cast<std::uint32_t>(y));
          const AttentionParams& ap = lookup(p, d);
          std::vector<std::uint32_t> idx(cand.begin(), cand.end());
          std::vector<double> w(idx.size());
          double z = 0, best = 0;
          for (std::size_t j = 0; j < idx.size(); ++j) {
            double dot = 0;
            for (std::size_t k = 0; k < dk; ++k) {
              double q = 0, kk = 0;
              for (std::size_t i = 0; i < din; ++i) {
                q += phis(x, i) * ap.wq(i, k);
                kk += phis(idx[j], i) * ap.wk(i, k);
              }
              dot += q * kk;
            }
            w[j] = std::exp(dot / std::sqrt(static_cast<double>(dk)));
            z += w[j];
          }
          for (double& v : w) best = std::max(best, v /= z);
          std::vector<std::uint32_t> kept;
          std::vector<double> kp;
          for (std::size_t j = 0; j < idx.size(); ++j)
            if (w[j] / best >= thres) {
              kept.push_back(idx[j]);
              kp.push_back(w[j]);
            }
          const double kz = std::accumulate(kp.begin(), kp.end(), 0.0);
          const ContextEntry& got = ctx.at(x, d, p);
          CHECK(got.indices == kept);
          REQUIRE(got.probs.size() == kp.size());
          for (std::size_t j = 0; j < kp.size(); ++j) CHECK(got.probs[j] == doctest::Approx(kp[j] / kz).epsilon(1e-9));

          const auto ctxv = order_context(x, d, p, phis, ap, ctx);
          for (std::size_t o = 0; o < 2; ++o) {
            double want = 0;
            for (std::size_t j = 0; j < kept.size(); ++j)
              for (std::size_t i = 0; i < din; ++i) want += kp[j] / kz * phis(kept[j], i) * ap.wv(i, o);
            CHECK(ctxv[o] == doctest::Approx(want).epsilon(1e-9));
          }
          survivors = std::set<std::uint32_t>(kept.begin(), kept.end());
        }
      }
    }
  }
}

TEST_CASE("grid walks follow a straight line") {
  std::mt19937_64 rng(24);
  const GridSpec g = build_grid(4, 5);
  const NeighborhoodSystem ns = init_neighborhood(g);
  const AttentionParams ap = random_attention(rng, 3, 2, 3);
  const Tensor phis = random_tensor(rng, g.cells(), 3);
  const MultiOrderContext ctx =
      build_multiorder(phis, ns, [&](std::size_t, Direction) -> const AttentionParams& { return ap; }, 3, 0.5);
  for (Direction d : kDirections)
    for (std::size_t x = 0; x < g.cells(); ++x)
      for (std::size_t p = 1; p <= 3; ++p) {
        const auto want = higher_order_neighbors(g, d, p);
        CHECK(ctx.at(x, d, p).indices == want[x]);
        for (double pr : ctx.at(x, d, p).probs) CHECK(pr == 1.0);
      }
}
