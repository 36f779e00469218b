// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <optional>

#include "retrolm/model.hpp"
#include "retrolm/ops.hpp"
#include "retrolm/rng.hpp"

using namespace retrolm;
using namespace retrolm::nn;

namespace {

Tensor<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    auto t = Tensor<float>::matrix(r, c);
    for (auto& x : t.values()) x = static_cast<float>(rng.normal());
    return t;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) {
        Graph<float> g;
        benchmark::DoNotOptimize(matmul(g.constant(a), g.constant(b)).value());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_MaskedSoftmax(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto logits = random_matrix(n, n, 3);
    const auto mask = retrolm::decoder_self_attention_mask(n);
    for (auto _ : state) {
        Graph<float> g;
        benchmark::DoNotOptimize(masked_biased_softmax(g.constant(logits), std::optional<Var<float>>{}, mask).value());
    }
}

void BM_MatmulBackward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, n, 4), b = random_matrix(n, n, 5);
    for (auto _ : state) {
        Graph<float> g;
        auto x = g.leaf(a);
        auto y = g.leaf(b);
        g.backward(sum(matmul(x, y)));
        benchmark::DoNotOptimize(g.gradient(x));
    }
}

} // namespace

BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);
BENCHMARK(BM_MaskedSoftmax)->Arg(32)->Arg(128);
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
