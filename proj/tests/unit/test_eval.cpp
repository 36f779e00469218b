// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "retrolm/error.hpp"
#include "retrolm/eval.hpp"
#include "synthetic.hpp"

using namespace retrolm;
using Catch::Approx;

namespace {

TrainState untrained_state(std::uint64_t seed) {
    TrainState s;
    s.config = testing::tiny_train_config(seed);
    s.config.model.d_model = 16;
    s.config.model.d_ff = 32;
    s.config.model.decoder_layers = 1;
    s.params = ModelParams<TrainScalar>::init(s.config.model, seed);
    s.adam = AdamState::zeros(s.config.model);
    s.corpus_id = "training-corpus";
    return s;
}

Corpus eval_corpus(std::uint64_t seed) {
    testing::TemplatedRecipe recipe;
    recipe.templates = 4;
    recipe.segments = 3;
    recipe.train_docs = 4;
    recipe.eval_docs = 8;
    recipe.seed = seed;
    return testing::make_corpus(testing::templated_documents(recipe).eval, 8, "eval");
}

LossReport report_with(std::vector<double> means, std::vector<std::size_t> counts, const std::string& corpus_id) {
    LossReport r;
    r.corpus_id = corpus_id;
    double sum = 0.0;
    for (std::size_t i = 0; i < means.size(); ++i) {
        r.per_position.push_back({means[i], means[i] * counts[i], counts[i]});
        sum += means[i] * counts[i];
        r.tokens += counts[i];
    }
    r.overall_mean = sum / static_cast<double>(r.tokens);
    return r;
}

} // namespace

TEST_CASE("an untrained model is near the uniform loss everywhere") {
    const auto s = untrained_state(1);
    const auto corpus = eval_corpus(2);
    const auto r = per_position_loss(s, corpus);
    REQUIRE(r.per_position.size() == 24);
    for (const auto& p : r.per_position) {
        CHECK(p.count == 8);
        CHECK(p.mean_loss == Approx(std::log(259.0)).margin(0.1));
    }
    CHECK(r.tokens == corpus.size() * 8);
    CHECK(r.corpus_id == corpus.id());
    CHECK(r.model_id == model_id(s.params));
}

TEST_CASE("positions past every sample are absent") {
    const auto s = untrained_state(3);
    const auto corpus = testing::make_corpus({std::string(8, 'a'), std::string(16, 'b'), std::string(8, 'c')}, 8, "mem");
    const auto r = per_position_loss(s, corpus);
    REQUIRE(r.per_position.size() == 16);
    for (std::size_t i = 0; i < 8; ++i) CHECK(r.per_position[i].count == 3);
    for (std::size_t i = 8; i < 16; ++i) CHECK(r.per_position[i].count == 1);
    double weighted = 0.0;
    for (const auto& p : r.per_position) weighted += p.sum;
    CHECK(weighted / static_cast<double>(r.tokens) == Approx(r.overall_mean).epsilon(1e-12));
}

TEST_CASE("eval refuses the training corpus") {
    auto s = untrained_state(4);
    const auto corpus = eval_corpus(5);
    s.corpus_id = corpus.id();
    CHECK_THROWS_AS(per_position_loss(s, corpus), UsageError);
}

TEST_CASE("eval plan covers every segment once") {
    const auto s = untrained_state(6);
    const auto corpus = eval_corpus(7);
    const auto plan = make_eval_plan(s, corpus);
    const auto d = validate_plan(plan.plan, corpus);
    CHECK(d.ok());
    CHECK(d.targets == corpus.size());
    CHECK(plan.table.size() == corpus.size());
}

TEST_CASE("early token delta") {
    const auto a = report_with({3.0, 2.0, 1.0}, {4, 4, 2}, "x");
    const auto b = report_with({2.5, 2.5, 2.5}, {4, 4, 2}, "x");
    SECTION("a report against itself") {
        const auto d = early_token_delta(a, a, 2);
        CHECK(d.delta == 0.0);
        for (auto v : d.per_position) CHECK(v == 0.0);
    }
    SECTION("token-weighted over the first L positions") {
        CHECK(early_token_delta(a, b, 1).delta == Approx(0.5));
        CHECK(early_token_delta(a, b, 2).delta == Approx(0.0));
        CHECK(mean_below(a, 2) == Approx(2.5));
    }
    SECTION("L beyond every sample is the overall difference") {
        CHECK(early_token_delta(a, b, 1000).delta == Approx(a.overall_mean - b.overall_mean));
    }
    SECTION("different corpora are refused") {
        CHECK_THROWS_AS(early_token_delta(a, report_with({1.0}, {1}, "y"), 2), UsageError);
    }
}

TEST_CASE("spearman") {
    const std::vector<double> x = {1, 2, 3, 4, 5};
    const std::vector<double> up = {10, 20, 25, 40, 100}, down = {5, 4, 3, 2, 1};
    CHECK(spearman(x, up) == Approx(1.0));
    CHECK(spearman(x, down) == Approx(-1.0));
    // Ties: y ranks (1.5, 1.5, 3, 4, 5); Pearson of ranks computed by hand.
    const std::vector<double> tied = {7, 7, 8, 9, 10};
    const double rx[] = {1, 2, 3, 4, 5}, ry[] = {1.5, 1.5, 3, 4, 5};
    double mx = 3.0, my = 3.0, sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < 5; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    CHECK(spearman(x, tied) == Approx(sxy / std::sqrt(sxx * syy)));
    CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{2}), UsageError);

    const auto r = report_with({3.0, 2.0, 1.0, 0.5}, {1, 1, 1, 1}, "z");
    CHECK(position_loss_spearman(r, 3) == Approx(-1.0));
}

TEST_CASE("attention flop fraction") {
    CHECK(attention_flop_fraction({1024, 256, AttentionKind::full}) == Approx(0.8));
    CHECK(attention_flop_fraction({256.0 * 256.0, 256, AttentionKind::three_halves}) == Approx(0.5));
    CHECK(attention_flop_fraction({4096, 63, AttentionKind::linear}) == Approx(1.0 / 64.0));
    CHECK(parse_attention_kind("three_halves") == AttentionKind::three_halves);
    CHECK(to_string(AttentionKind::linear) == "linear");
    CHECK_THROWS_AS(parse_attention_kind("quadratic"), UsageError);
    CHECK_THROWS_AS(attention_flop_fraction({0, 256, AttentionKind::full}), UsageError);
}

TEST_CASE("compute allocation") {
    const auto one = compute_allocation(1.0);
    CHECK(one.model_mult == 1.0);
    CHECK(one.batch_mult == 1.0);
    CHECK(one.steps_mult == 1.0);
    const auto ten = compute_allocation(10.0);
    CHECK(ten.model_mult == Approx(std::pow(10.0, 0.73)));
    CHECK(ten.batch_mult == Approx(std::pow(10.0, 0.24)));
    CHECK(ten.steps_mult == Approx(std::pow(10.0, 0.03)));
    CHECK(ten.model_mult * ten.batch_mult * ten.steps_mult == Approx(10.0));
    CHECK_THROWS_AS(compute_allocation(0.0), UsageError);
    CHECK_THROWS_AS(compute_allocation(-2.0), UsageError);
}

TEST_CASE("top-k ffn evaluation") {
    const auto s = untrained_state(8);
    const auto corpus = eval_corpus(9);
    const auto full = topk_ffn_eval(s, corpus, s.config.model.d_ff);
    CHECK(full.delta == Approx(0.0).margin(1e-12));
    const auto one = topk_ffn_eval(s, corpus, 1);
    CHECK(one.unmasked_loss == Approx(full.unmasked_loss).epsilon(1e-12));
    CHECK(one.delta != 0.0);
    CHECK_THROWS_AS(topk_ffn_eval(s, corpus, 0), UsageError);
    CHECK_THROWS_AS(topk_ffn_eval(s, corpus, s.config.model.d_ff + 1), UsageError);
}

TEST_CASE("cold-start sources are all from the same document") {
    const auto corpus = eval_corpus(10);
    const auto d = validate_plan(cold_start_plan(corpus, 4, 0), corpus);
    CHECK(d.same_doc_frac == 1.0);
    CHECK(d.cross_doc_frac == 0.0);
    CHECK(d.predecessor_frac > 0.0);
}

TEST_CASE("retrieval diagnostics are consistent") {
    const auto s = untrained_state(11);
    const auto corpus = eval_corpus(12);
    const auto d = retrieval_diagnostics(s, corpus);
    CHECK(d.same_doc_frac + d.cross_doc_frac == Approx(1.0));
    CHECK(d.predecessor_frac <= d.same_doc_frac + 1e-12);
    CHECK(d.pairs > 0);
    CHECK(d.mean_pair_cosine <= 1.0 + 1e-9);
}

TEST_CASE("loss report output") {
    const auto r = report_with({3.0, 2.0}, {2, 1}, "c");
    std::ostringstream csv, summary;
    write_loss_report(csv, r);
    write_summary(summary, r);
    CHECK(csv.str().find("position") != std::string::npos);
    CHECK(summary.str().find("overall_mean") != std::string::npos);
}
