#include "repflow/model.hpp"

#include <benchmark/benchmark.h>

using namespace repflow;

namespace {

struct Setup {
    Transformer<float> model;
    TaskBatch batch;
};

Setup make_setup(std::size_t sentences) {
    ModelConfig cfg;
    cfg.src_vocab = 8000;
    cfg.dropout = 0.0;
    Rng rng(1);
    std::vector<Encoded> data(sentences);
    for (auto& s : data)
        for (std::size_t t = 0; t < 25; ++t)
            s.push_back(static_cast<TokenId>(Vocab::kNumReserved + rng.uniform_int(cfg.src_vocab - Vocab::kNumReserved)));
    return {Transformer<float>(cfg), make_lm_batch(data, 0)};
}

void BM_Forward(benchmark::State& state) {
    const auto s = make_setup(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(s.model.loss(s.batch));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.batch.num_predicted()));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
    const auto s = make_setup(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(s.model.loss_and_grad(s.batch));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.batch.num_predicted()));
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace
