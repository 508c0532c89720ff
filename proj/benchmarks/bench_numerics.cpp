#include "repflow/cca.hpp"
#include "repflow/numerics.hpp"
#include "repflow/rng.hpp"

#include <benchmark/benchmark.h>

using namespace repflow;

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.normal();
    return m;
}

void BM_KnnSelf(benchmark::State& state) {
    const auto pool = gaussian(static_cast<std::size_t>(state.range(0)), 128, 1);
    for (auto _ : state) benchmark::DoNotOptimize(knn_self(pool, 10, Metric::Cosine));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_KnnSelf)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

void BM_MiniBatchKMeans(benchmark::State& state) {
    const auto points = gaussian(10000, 128, 2);
    KMeansOptions o;
    o.clusters = static_cast<std::size_t>(state.range(0));
    o.batch_size = 100;
    o.epochs = 1.0;
    o.seed = 3;
    for (auto _ : state) benchmark::DoNotOptimize(minibatch_kmeans(points, o));
}
BENCHMARK(BM_MiniBatchKMeans)->Arg(100)->Arg(500)->Unit(benchmark::kMillisecond);

void BM_Pwcca(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = gaussian(n, 128, 4);
    const Matrix y = x * gaussian(128, 128, 5) + 0.5 * gaussian(n, 128, 6);
    for (auto _ : state) benchmark::DoNotOptimize(pwcca_distance(x, y));
}
BENCHMARK(BM_Pwcca)->Arg(2000)->Arg(20000)->Unit(benchmark::kMillisecond);

}  // namespace
