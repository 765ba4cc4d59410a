#include <benchmark/benchmark.h>

#include <vector>

#include "fshpo/augment.hpp"
#include "fshpo/episodes.hpp"
#include "fshpo/kde.hpp"
#include "fshpo/random.hpp"
#include "fshpo/tinynet.hpp"

using namespace fshpo;

namespace {

ImageBatch noise_batch(const ImageShape& shape, std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  ImageBatch b(shape, n);
  for (auto& v : b.pixels()) v = uniform01(rng);
  return b;
}

std::vector<UnitPoint> cloud(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<UnitPoint> pts(n);
  for (auto& p : pts)
    for (std::size_t k = 0; k < d; ++k) p.coords.push_back(uniform01(rng));
  return pts;
}

}  // namespace

// One mini-batch of 16 at the given image side.
static void BM_LossAndGrad(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  NetSpec spec;
  spec.input = {side, side, 3};
  spec.n_classes = 42;
  const auto p = init_params(spec, 1);
  const auto x = noise_batch(spec.input, 16, 2);
  std::vector<int> y(16);
  for (int i = 0; i < 16; ++i) y[static_cast<std::size_t>(i)] = i % spec.n_classes;
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grad(p, x, y, 1e-4).loss);
}
BENCHMARK(BM_LossAndGrad)->Arg(16)->Arg(32)->Unit(benchmark::kMicrosecond);

static void BM_KdePropose(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto good = KdeModel::fit(cloud(d + 1, d, 3));
  const auto bad = KdeModel::fit(cloud(60, d, 4));
  ProposalConfig cfg;
  Rng rng = make_rng(5);
  for (auto _ : state) benchmark::DoNotOptimize(propose(good, &bad, cfg, rng).coords.data());
}
BENCHMARK(BM_KdePropose)->Arg(5)->Arg(16)->Unit(benchmark::kMicrosecond);

// 5-way 5-shot, 75 queries, 64-d embeddings.
static void BM_NearestCentroid(benchmark::State& state) {
  Rng rng = make_rng(6);
  std::vector<double> s(25 * 64), q(75 * 64);
  for (auto& v : s) v = uniform01(rng);
  for (auto& v : q) v = uniform01(rng);
  std::vector<int> labels(25);
  for (int i = 0; i < 25; ++i) labels[static_cast<std::size_t>(i)] = i / 5;
  for (auto _ : state)
    benchmark::DoNotOptimize(ncentroid_classify({s, 64}, labels, {q, 64}, 5).data());
}
BENCHMARK(BM_NearestCentroid)->Unit(benchmark::kMicrosecond);

static void BM_ApplyPolicy(benchmark::State& state) {
  const auto base = noise_batch({32, 32, 3}, 16, 7);
  const auto policy = AugPolicy::shared(static_cast<int>(state.range(0)), 8.0);
  Rng rng = make_rng(8);
  for (auto _ : state) {
    auto b = base;
    benchmark::DoNotOptimize(apply_policy(b, policy, rng).size());
  }
}
BENCHMARK(BM_ApplyPolicy)->Arg(1)->Arg(4)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
