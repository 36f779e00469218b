// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "retrolm/batching.hpp"
#include "retrolm/model.hpp"

using namespace retrolm;

namespace {

ModelConfig bench_model() {
    ModelConfig c;
    c.d_model = 64;
    c.d_ff = 256;
    c.n_heads = 4;
    c.encoder_layers = 2;
    c.decoder_layers = 2;
    c.segment_len = 32;
    return c;
}

Corpus bench_corpus() {
    std::vector<std::string> docs;
    for (int i = 0; i < 16; ++i) {
        std::string d;
        for (int j = 0; j < 128; ++j) d.push_back(static_cast<char>('a' + (i * 7 + j * 3) % 26));
        docs.push_back(d);
    }
    CorpusConfig cfg;
    cfg.segment_len = 32;
    return Corpus::from_documents(docs, cfg);
}

void BM_ForwardBackward(benchmark::State& state) {
    const auto params = ModelParams<float>::init(bench_model(), 1);
    const auto corpus = bench_corpus();
    const auto plan = cold_start_plan(corpus, 4, 0);
    const auto input = make_input(corpus, plan.sub_batches[0]);
    for (auto _ : state) {
        nn::Graph<float> g;
        auto model = bind(g, params);
        auto out = forward_subbatch(model, input);
        g.backward(out.loss_sum);
        benchmark::DoNotOptimize(gradients(g, model));
    }
}

void BM_EmbedCorpus(benchmark::State& state) {
    const auto params = ModelParams<float>::init(bench_model(), 2);
    const auto corpus = bench_corpus();
    for (auto _ : state) benchmark::DoNotOptimize(refresh_embeddings(params, corpus, 0));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(corpus.size()));
}

} // namespace

BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_EmbedCorpus)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
