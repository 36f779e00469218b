// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "retrolm/retrieval.hpp"

using namespace retrolm;

namespace {

const EmbeddingTable& table() {
    static const auto t = clustered_table(10000, 32, 32, 0.2, 1);
    return t;
}

void run_queries(benchmark::State& state, const Index& index) {
    const auto& t = table();
    std::size_t q = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(index.knn(t.row(q), 10));
        q = (q + 7919) % t.size();
    }
    state.SetItemsProcessed(state.iterations());
}

void BM_ExactKnn(benchmark::State& state) {
    const auto index = Index::build(table(), IndexParams{IndexMode::exact});
    run_queries(state, index);
}

void BM_IvfKnn(benchmark::State& state) {
    IndexParams p;
    p.mode = IndexMode::ivf;
    p.n_clusters = 100;
    p.n_probe = static_cast<std::size_t>(state.range(0));
    const auto index = Index::build(table(), p);
    run_queries(state, index);
}

void BM_IvfBuild(benchmark::State& state) {
    IndexParams p;
    p.mode = IndexMode::ivf;
    p.n_clusters = 100;
    for (auto _ : state) benchmark::DoNotOptimize(Index::build(table(), p));
}

} // namespace

BENCHMARK(BM_ExactKnn);
BENCHMARK(BM_IvfKnn)->Arg(1)->Arg(8)->Arg(32);
BENCHMARK(BM_IvfBuild)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
