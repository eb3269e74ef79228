// Serial reference kernels vs their OpenMP versions.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "dmckn/dataio.hpp"
#include "dmckn/kernel_core.hpp"
#include "dmckn/kernels.hpp"
#include "dmckn/run_config.hpp"
#include "dmckn/training.hpp"

using namespace dmckn;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

template <Tensor (*Mm)(const Tensor&, const Tensor&)>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor(n, n, 1), b = random_tensor(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(Mm(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n * n));
}

// block-diagonal grid P_c over a batch of 8x10 images
struct GramSetup {
  Tensor s;
  std::vector<Tensor> p;
  explicit GramSetup(std::size_t images) {
    const NeighborhoodSystem ns = init_neighborhood(build_grid(8, 10));
    p = lift_to_batch(ns, images);
    s = base_similarity(random_tensor(80 * images, 16, 3));
  }
};

template <Tensor (*Step)(const Tensor&, const Tensor&, std::span<const Tensor>, double)>
void BM_gram_step(benchmark::State& state) {
  const GramSetup g(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(Step(g.s, g.s, g.p, 0.1));
}

template <Exec E>
void BM_score_dataset(benchmark::State& state) {
  RunConfig rc = default_run_config();
  rc.synth.n_images = 64;
  rc.network.layers.assign(2, rc.network.layers.front());
  for (auto& l : rc.network.layers) l.max_order = 2;
  const SynthDataset sd = synth_dataset(rc.synth);
  const Model model = init_model(rc.network, group_labels(sd.data.labels, 4), 0);
  const ForwardPlan plan = make_plan(rc.network);
  for (auto _ : state) benchmark::DoNotOptimize(score_dataset(plan, model, sd.data, E));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(sd.data.size()));
}

}  // namespace

BENCHMARK(BM_matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<kernels::omp::matmul>)->Name("matmul/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<kernels::serial::matmul_nt>)->Name("matmul_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<kernels::omp::matmul_nt>)->Name("matmul_nt/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_gram_step<kernels::serial::gram_step>)->Name("gram_step/serial")->Arg(1)->Arg(4);
BENCHMARK(BM_gram_step<kernels::omp::gram_step>)->Name("gram_step/omp")->Arg(1)->Arg(4);
BENCHMARK(BM_score_dataset<Exec::Serial>)->Name("score_dataset/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_score_dataset<Exec::Parallel>)->Name("score_dataset/omp")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
