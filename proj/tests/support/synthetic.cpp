// SPDX-License-Identifier: Apache-2.0
#include "synthetic.hpp"

#include "retrolm/rng.hpp"

namespace retrolm::testing {

namespace {

constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz ";
constexpr std::uint64_t kAlphabetSize = sizeof(kAlphabet) - 1;

char draw(Rng& rng) { return kAlphabet[rng.below(kAlphabetSize)]; }

} // namespace

TemplatedDocuments templated_documents(const TemplatedRecipe& recipe) {
    TemplatedDocuments out;
    Rng trng(Rng::derive(recipe.seed, {1}));
    const std::size_t len = recipe.segments * recipe.segment_len;
    for (std::size_t t = 0; t < recipe.templates; ++t) {
        std::string s(len, ' ');
        for (auto& c : s) c = draw(trng);
        out.templates.push_back(std::move(s));
    }
    auto noisy = [&](std::size_t i, Rng& rng) {
        std::string s = out.templates[i % recipe.templates];
        for (auto& c : s) {
            if (rng.uniform() < recipe.noise) c = draw(rng);
        }
        return s;
    };
    Rng train_rng(Rng::derive(recipe.seed, {2}));
    Rng eval_rng(Rng::derive(recipe.seed, {3}));
    for (std::size_t i = 0; i < recipe.train_docs; ++i) out.train.push_back(noisy(i, train_rng));
    for (std::size_t i = 0; i < recipe.eval_docs; ++i) out.eval.push_back(noisy(i, eval_rng));
    return out;
}

std::vector<std::string> random_documents(std::size_t count, std::size_t min_len, std::size_t max_len,
                                          std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::string> docs;
    for (std::size_t i = 0; i < count; ++i) {
        std::string s(min_len + rng.below(max_len - min_len + 1), ' ');
        for (auto& c : s) c = draw(rng);
        docs.push_back(std::move(s));
    }
    return docs;
}

Corpus make_corpus(const std::vector<std::string>& docs, std::size_t segment_len, const std::string& origin) {
    CorpusConfig cfg;
    cfg.segment_len = segment_len;
    return Corpus::from_documents(docs, cfg, origin);
}

TrainConfig tiny_train_config(std::uint64_t seed) {
    TrainConfig c;
    c.model.d_model = 32;
    c.model.d_ff = 64;
    c.model.n_heads = 2;
    c.model.encoder_layers = 2;
    c.model.decoder_layers = 2;
    c.model.segment_len = 8;
    c.steps = 500;
    c.refresh_interval = 100;
    c.batch = 4;
    c.m = 4;
    c.k = 8;
    c.lr = 3e-3;
    c.warmup = 50;
    c.seed = seed;
    return c;
}

} // namespace retrolm::testing
