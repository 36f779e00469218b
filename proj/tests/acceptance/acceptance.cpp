// SPDX-License-Identifier: Apache-2.0
//
// Acceptance harness: one PASS/FAIL line per criterion. Run with criterion numbers
// as arguments (default: all). Exit status is non-zero when any selected criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "retrolm/batching.hpp"
#include "retrolm/container.hpp"
#include "retrolm/eval.hpp"
#include "retrolm/gradcheck.hpp"
#include "retrolm/model.hpp"
#include "retrolm/retrieval.hpp"
#include "retrolm/rng.hpp"
#include "retrolm/training.hpp"
#include "synthetic.hpp"

using namespace retrolm;

namespace {

// Tolerances.
constexpr double kGradRelTol = 1e-3;
constexpr double kGradStep = 1e-4;
constexpr double kDegeneracyTol = 1e-6;
constexpr double kIvfRecallMin = 0.9;
constexpr double kAllocationTol = 1e-3;
constexpr double kTopkMonotoneEps = 1e-6;
constexpr double kTopkFixtureRelTol = 1e-6;
// Masked-minus-dense eval loss at k = d_ff/10 for the criterion 9 checkpoint.
constexpr double kTopkTenthDeltaFixture = 0.0065544858823414209;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

TokenSeq random_tokens(Rng& rng, std::size_t n, std::size_t alphabet = 40) {
    TokenSeq t(n);
    for (auto& x : t) x = static_cast<Token>(97 + rng.below(alphabet));
    return t;
}

template <typename T>
void jitter(ModelParams<T>& p, Rng& rng, double scale) {
    p.weights.visit([&](const std::string&, nn::Tensor<T>& t) {
        for (auto& x : t.values()) x += static_cast<T>(scale * rng.normal());
    });
}

/// A sub-batch with explicit refs: `samples` distinct samples, segments drawn so
/// that same-sample sources and targets interleave.
struct RandomSubBatch {
    SubBatchInput input;
    std::vector<SegmentRef> source_refs;
    std::vector<SegmentRef> target_refs;
};

RandomSubBatch random_sub_batch(Rng& rng, std::size_t m, std::size_t n, std::size_t samples, std::size_t max_index) {
    RandomSubBatch r;
    std::map<SegmentRef, TokenSeq> text;
    auto seg = [&](SegmentRef ref) -> const TokenSeq& {
        auto it = text.find(ref);
        if (it == text.end()) it = text.emplace(ref, random_tokens(rng, n)).first;
        return it->second;
    };
    auto draw_ref = [&]() {
        return SegmentRef{static_cast<std::uint32_t>(rng.below(samples)), static_cast<std::uint32_t>(rng.below(max_index + 1))};
    };
    std::set<SegmentRef> used_targets;
    while (r.target_refs.size() < m) {
        auto ref = draw_ref();
        if (!used_targets.insert(ref).second) continue;
        r.target_refs.push_back(ref);
    }
    for (std::size_t i = 0; i < m; ++i) r.source_refs.push_back(draw_ref());
    for (auto ref : r.source_refs) r.input.sources.push_back(seg(ref));
    for (auto ref : r.target_refs) {
        r.input.targets.push_back(seg(ref));
        if (ref.index > 0) {
            r.input.contexts.push_back(seg({ref.sample, ref.index - 1}));
        } else {
            r.input.contexts.emplace_back();
        }
    }
    r.input.mask = causality_mask(r.source_refs, r.target_refs);
    return r;
}

ModelConfig random_tiny_model(Rng& rng) {
    ModelConfig c;
    const std::size_t widths[] = {8, 12, 16};
    c.d_model = widths[rng.below(3)];
    const std::size_t heads[] = {1, 2, 4};
    do {
        c.n_heads = heads[rng.below(3)];
    } while (c.d_model % c.n_heads != 0);
    c.d_ff = 4 + rng.below(29);
    c.encoder_layers = 2 + 2 * rng.below(2);
    c.decoder_layers = 1 + rng.below(2);
    c.segment_len = 3 + rng.below(6);
    c.beta_init = 4.0 * rng.uniform() - 2.0;
    c.output_init_std = 0.5;
    return c;
}

// 1. Gradient fidelity.
Outcome criterion1() {
    const auto t0 = Clock::now();
    constexpr std::size_t kConfigs = 20;
    Rng rng(Rng::derive(1, {0x7e57}));
    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
    bool beta_nonzero = true, embedder_bias_path = true;
    std::size_t absent_nonzero = 0;
    for (std::size_t c = 0; c < kConfigs; ++c) {
        const auto cfg = random_tiny_model(rng);
        auto params = ModelParams<double>::init(cfg, rng.next_u64());
        jitter(params, rng, 0.1);
        const std::size_t m = 1 + rng.below(3);
        auto sb = random_sub_batch(rng, m, cfg.segment_len, 2, 3);
        ForwardOptions opts;

        nn::Graph<double> g;
        auto model = bind(g, params);
        auto out = forward_subbatch(model, sb.input, opts);
        g.backward(out.loss_sum);
        const auto grads = gradients(g, model);

        // The embedder's gradient with the bias removed must differ: the bias path is live.
        nn::Graph<double> g0;
        auto model0 = bind(g0, params);
        ForwardOptions no_bias = opts;
        no_bias.use_bias = false;
        auto out0 = forward_subbatch(model0, sb.input, no_bias);
        g0.backward(out0.loss_sum);
        const auto grads0 = gradients(g0, model0);
        bool any_unmasked = false;
        for (std::size_t i = 0; i < sb.input.mask.rows(); ++i) {
            std::size_t open = 0;
            for (std::size_t j = 0; j < sb.input.mask.cols(); ++j) open += !sb.input.mask.masked(i, j);
            any_unmasked = any_unmasked || open >= 2;
        }
        if (any_unmasked) {
            if (grads.beta[0] == 0.0) beta_nonzero = false;
            double diff = 0.0;
            const auto& a = grads.encoder[0].self_attn.wq;
            const auto& b = grads0.encoder[0].self_attn.wq;
            for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
            if (diff == 0.0) embedder_bias_path = false;
        }

        std::vector<nn::GradCheckParam> list;
        std::vector<nn::Tensor<double>*> values;
        std::vector<const nn::Tensor<double>*> analytic;
        std::vector<std::string> names;
        params.weights.visit([&](const std::string& name, nn::Tensor<double>& t) {
            values.push_back(&t);
            names.push_back(name);
        });
        grads.visit([&](const std::string&, const nn::Tensor<double>& t) { analytic.push_back(&t); });
        // Embedding rows of absent tokens cannot affect the loss: their analytic
        // gradient must be exactly zero, and only present rows are differenced.
        std::set<Token> present = {kBos};
        for (const auto* group : {&sb.input.sources, &sb.input.targets, &sb.input.contexts}) {
            for (const auto& seq : *group) present.insert(seq.begin(), seq.end());
        }
        for (std::size_t i = 0; i < values.size(); ++i) {
            nn::GradCheckParam p{names[i], values[i], analytic[i], {}};
            if (names[i] == "enc_embed" || names[i] == "dec_embed") {
                const std::size_t d = values[i]->cols();
                for (std::size_t row = 0; row < values[i]->rows(); ++row) {
                    if (present.count(static_cast<Token>(row))) {
                        for (std::size_t col = 0; col < d; ++col) p.indices.push_back(row * d + col);
                    } else {
                        for (std::size_t col = 0; col < d; ++col) absent_nonzero += (*analytic[i])[row * d + col] != 0.0;
                    }
                }
            }
            list.push_back(std::move(p));
        }
        auto loss = [&]() {
            const auto l = evaluate_token_losses(params, sb.input, opts);
            double s = 0.0;
            for (double x : l) s += x;
            return s;
        };
        const auto report = nn::grad_check(loss, list, kGradStep, kGradRelTol);
        for (const auto& e : report.entries) {
            checked += e.checked;
            if (e.max_rel_error > worst) {
                worst = e.max_rel_error;
                worst_name = "config " + std::to_string(c) + " " + e.name;
            }
        }
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = worst < kGradRelTol && beta_nonzero && embedder_bias_path && absent_nonzero == 0 && secs < 300.0;
    o.detail = "configs=" + std::to_string(kConfigs) + " elements=" + std::to_string(checked) + " max_rel_err=" + fmt(worst) +
               (worst_name.empty() ? "" : " (" + worst_name + ")") + " dbeta_nonzero=" + (beta_nonzero ? "yes" : "no") +
               " embedder_bias_path=" + (embedder_bias_path ? "yes" : "no") +
               " absent_row_nonzero=" + std::to_string(absent_nonzero) + " secs=" + fmt(secs);
    return o;
}

// 2. Beta = 0 degeneracy.
Outcome criterion2() {
    Rng rng(Rng::derive(2, {0x7e57}));
    double worst64 = 0.0, worst32 = 0.0;
    for (std::size_t trial = 0; trial < 20; ++trial) {
        auto cfg = random_tiny_model(rng);
        cfg.beta_init = 0.0;
        auto p64 = ModelParams<double>::init(cfg, rng.next_u64());
        jitter(p64, rng, 0.1);
        p64.weights.beta[0] = 0.0;
        const auto p32 = p64.cast<float>();
        auto sb = random_sub_batch(rng, 1 + rng.below(4), cfg.segment_len, 3, 3);
        ForwardOptions with_bias, without_bias;
        without_bias.use_bias = false;
        const auto a = evaluate_token_losses(p64, sb.input, with_bias);
        const auto b = evaluate_token_losses(p64, sb.input, without_bias);
        const auto c = evaluate_token_losses(p32, sb.input, with_bias);
        const auto d = evaluate_token_losses(p32, sb.input, without_bias);
        for (std::size_t i = 0; i < a.size(); ++i) {
            worst64 = std::max(worst64, std::abs(a[i] - b[i]));
            worst32 = std::max(worst32, std::abs(c[i] - d[i]));
        }
    }
    return {worst64 < kDegeneracyTol && worst32 < kDegeneracyTol,
            "trials=20 max_abs_diff_f64=" + fmt(worst64) + " max_abs_diff_f32=" + fmt(worst32)};
}

// 3. Causality: perturbing source (s, u) leaves every target (s, v), v <= u, unchanged.
Outcome criterion3() {
    const auto t0 = Clock::now();
    Rng rng(Rng::derive(3, {0x7e57}));
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    cfg.segment_len = 8;
    cfg.beta_init = 1.5;
    std::size_t leaks = 0, vacuous = 0, protected_targets = 0, pairs = 0;
    while (pairs < 100) {
        auto params = ModelParams<double>::init(cfg, rng.next_u64());
        jitter(params, rng, 0.05);
        auto sb = random_sub_batch(rng, 2 + rng.below(3), cfg.segment_len, 2, 3);
        std::vector<std::size_t> visible;
        for (std::size_t j = 0; j < sb.source_refs.size(); ++j) {
            for (std::size_t t = 0; t < sb.target_refs.size(); ++t) {
                if (!sb.input.mask.masked(t, j)) {
                    visible.push_back(j);
                    break;
                }
            }
        }
        if (visible.empty()) continue;
        const std::size_t j = visible[rng.below(visible.size())];
        const auto ref = sb.source_refs[j];
        const std::size_t pos = rng.below(cfg.segment_len);
        auto flipped = sb.input;
        const Token old = sb.input.sources[j][pos];
        const Token repl = static_cast<Token>(97 + (old - 97 + 1 + rng.below(30)) % 40);
        // Every encoder-side copy of the segment changes; target text stays fixed.
        for (std::size_t s = 0; s < flipped.sources.size(); ++s) {
            if (sb.source_refs[s] == ref) flipped.sources[s][pos] = repl;
        }
        for (std::size_t t = 0; t < sb.target_refs.size(); ++t) {
            if (sb.target_refs[t].sample == ref.sample && sb.target_refs[t].index == ref.index + 1) flipped.contexts[t][pos] = repl;
        }
        const auto before = evaluate_token_losses(params, sb.input);
        const auto after = evaluate_token_losses(params, flipped);
        bool other_changed = false;
        for (std::size_t t = 0; t < sb.target_refs.size(); ++t) {
            const auto tr = sb.target_refs[t];
            bool changed = false;
            for (std::size_t o = 0; o < cfg.segment_len; ++o) changed = changed || before[t * cfg.segment_len + o] != after[t * cfg.segment_len + o];
            if (tr.sample == ref.sample && ref.index >= tr.index) {
                ++protected_targets;
                leaks += changed;
            } else {
                other_changed = other_changed || changed;
            }
        }
        vacuous += !other_changed;
        ++pairs;
    }
    const double secs = seconds_since(t0);
    return {leaks == 0 && vacuous == 0 && secs < 120.0,
            "pairs=" + std::to_string(pairs) + " protected_targets=" + std::to_string(protected_targets) +
                " leaks=" + std::to_string(leaks) + " pairs_without_other_change=" + std::to_string(vacuous) + " secs=" + fmt(secs)};
}

// 4. Retrieval oracle.
Outcome criterion4() {
    Rng rng(Rng::derive(4, {0x7e57}));
    auto table = clustered_table(1000, 16, 10, 0.3, 44);
    auto queries = clustered_table(100, 16, 10, 0.3, 45);
    IndexParams exact_params;
    const auto exact = Index::build(table, exact_params);
    std::size_t mismatches = 0;
    for (std::size_t k : {1, 5, 20}) {
        for (std::size_t q = 0; q < queries.size(); ++q) {
            const auto a = exact.knn(queries.row(q), k);
            const auto b = brute_force_knn(table, queries.row(q), k);
            bool same = a.neighbors.size() == b.neighbors.size();
            for (std::size_t i = 0; same && i < a.neighbors.size(); ++i) {
                same = a.neighbors[i].row == b.neighbors[i].row && a.neighbors[i].score == b.neighbors[i].score;
            }
            mismatches += !same;
        }
    }

    auto all = clustered_table(10100, 32, 32, 0.2, 46);
    EmbeddingTable big;
    big.dim = 32;
    big.vectors.assign(all.vectors.begin(), all.vectors.begin() + 10000 * 32);
    big.refs.assign(all.refs.begin(), all.refs.begin() + 10000);
    IndexParams ivf_params;
    ivf_params.mode = IndexMode::ivf;
    ivf_params.n_clusters = 100;
    ivf_params.n_probe = 8;
    ivf_params.seed = 47;
    const auto ivf = Index::build(big, ivf_params);
    const auto big_exact = Index::build(big, exact_params);
    double rec = 0.0;
    for (std::size_t q = 0; q < 100; ++q) {
        std::span<const float> v = std::span<const float>(all.vectors).subspan((10000 + q) * 32, 32);
        rec += recall(ivf.knn(v, 10), big_exact.knn(v, 10));
    }
    rec /= 100.0;
    return {mismatches == 0 && rec >= kIvfRecallMin,
            "exact_vs_bruteforce_mismatches=" + std::to_string(mismatches) + "/300 ivf_recall@10=" + fmt(rec) +
                " (n=10000 clusters=32 n_c=100 n_probe=8)"};
}

// 5. Batch-plan soundness.
Outcome criterion5() {
    std::size_t causality = 0, parity = 0, other = 0, plans = 0;
    double min_cold_same_doc = 1.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(Rng::derive(5, {seed}));
        const std::size_t n = 4 + rng.below(5);
        const auto docs = testing::random_documents(6 + rng.below(20), n, 6 * n, rng.next_u64());
        const auto corpus = testing::make_corpus(docs, n, "plan-" + std::to_string(seed));
        if (corpus.size() < 2) continue;
        const std::size_t m = 1 + rng.below(4);
        auto tally = [&](const PlanDiagnostics& d) {
            for (const auto& v : d.violations) {
                if (v.kind == "causality") {
                    ++causality;
                } else if (v.kind == "parity") {
                    ++parity;
                } else {
                    ++other;
                }
            }
            ++plans;
        };
        const auto cold = cold_start_plan(corpus, m, rng.next_u64());
        const auto dc = validate_plan(cold, corpus);
        tally(dc);
        min_cold_same_doc = std::min(min_cold_same_doc, dc.same_doc_frac);

        ModelConfig mc;
        mc.d_model = 8;
        mc.d_ff = 16;
        mc.n_heads = 2;
        mc.segment_len = n;
        const auto params = ModelParams<float>::init(mc, rng.next_u64());
        const auto table = refresh_embeddings(params, corpus, 1);
        IndexParams ip;
        ip.mode = seed % 2 ? IndexMode::ivf : IndexMode::exact;
        ip.n_probe = 2;
        ip.seed = rng.next_u64();
        const auto index = Index::build(table, ip);
        KnnPlanParams kp;
        kp.m = m;
        kp.k = 1 + rng.below(8);
        kp.seed = rng.next_u64();
        kp.epoch = 1;
        kp.co_target_index = ip;
        tally(validate_plan(knn_plan(index, table, corpus, kp), corpus));
    }
    return {causality == 0 && parity == 0 && other == 0 && min_cold_same_doc == 1.0,
            "plans=" + std::to_string(plans) + " causality=" + std::to_string(causality) + " parity=" + std::to_string(parity) +
                " other=" + std::to_string(other) + " min_cold_start_same_doc=" + fmt(min_cold_same_doc)};
}

/// Fixture for criteria 6 and 7.
TrainConfig end_to_end_config(std::uint64_t seed) {
    auto c = testing::tiny_train_config(seed);
    c.model.d_model = 16;
    c.model.beta_init = 10.0;
    c.lr = 1e-3;
    return c;
}

struct EndToEnd {
    LossReport retrieval, baseline;
    std::vector<RefreshRecord> refreshes;
    double secs = 0.0;
};

EndToEnd run_end_to_end(std::uint64_t seed, bool with_baseline) {
    const auto t0 = Clock::now();
    testing::TemplatedRecipe recipe;
    recipe.seed = seed;
    const auto docs = testing::templated_documents(recipe);
    const auto train = testing::make_corpus(docs.train, recipe.segment_len, "templated-train");
    const auto eval = testing::make_corpus(docs.eval, recipe.segment_len, "templated-eval");
    auto cfg = end_to_end_config(seed);
    EndToEnd r;
    Trainer tr(cfg, train);
    tr.run();
    r.retrieval = per_position_loss(tr.state(), eval, 0);
    r.refreshes = tr.refreshes();
    if (with_baseline) {
        cfg.retrieval = false;
        Trainer tb(cfg, train);
        tb.run();
        r.baseline = per_position_loss(tb.state(), eval, 0);
    }
    r.secs = seconds_since(t0);
    return r;
}

// 6. End-to-end retrieval benefit.
Outcome criterion6() {
    std::size_t a = 0, b = 0, c = 0;
    std::ostringstream detail;
    double max_secs = 0.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto r = run_end_to_end(seed, true);
        const std::size_t n = 8;
        const double da = r.retrieval.overall_mean - r.baseline.overall_mean;
        const double db = early_token_delta(r.retrieval, r.baseline, 2 * n).delta;
        const double c0 = r.refreshes.front().mean_pair_cosine, c1 = r.refreshes.back().mean_pair_cosine;
        a += da < 0.0;
        b += db < 0.0;
        c += c1 > c0;
        max_secs = std::max(max_secs, r.secs);
        detail << " [seed " << seed << ": loss " << fmt(r.retrieval.overall_mean) << " vs " << fmt(r.baseline.overall_mean)
               << ", early_delta " << fmt(db) << ", cos " << fmt(c0) << "->" << fmt(c1) << "]";
    }
    return {a == 3 && b == 3 && c == 3 && max_secs < 1800.0,
            "(a) " + std::to_string(a) + "/3 (b) " + std::to_string(b) + "/3 (c) " + std::to_string(c) + "/3" + detail.str()};
}

// 7. Per-position shape.
Outcome criterion7() {
    std::size_t neg = 0;
    std::ostringstream detail;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto r = run_end_to_end(seed, false);
        const double rho = position_loss_spearman(r.retrieval, 4 * 8);
        neg += rho < 0.0;
        detail << " seed" << seed << "=" << fmt(rho);
    }
    return {neg == 3, "negative_spearman " + std::to_string(neg) + "/3:" + detail.str()};
}

// 8. Calculators.
Outcome criterion8() {
    const auto r = compute_allocation(10.0);
    const bool exps = kModelSizeExponent == 0.73 && kBatchSizeExponent == 0.24 && kStepsExponent == 0.03;
    const bool vals = std::abs(r.model_mult - 5.370) <= kAllocationTol && std::abs(r.batch_mult - 1.738) <= kAllocationTol &&
                      std::abs(r.steps_mult - 1.072) <= kAllocationTol;
    bool half = true;
    for (double l : {1.0, 7.0, 64.0, 1024.0, 4096.0}) half = half && attention_flop_fraction({l, l, AttentionKind::full}) == 0.5;
    return {exps && vals && half, "allocation(10)=(" + fmt(r.model_mult) + ", " + fmt(r.batch_mult) + ", " + fmt(r.steps_mult) +
                                      ") exponents_exact=" + (exps ? "yes" : "no") + " flop_fraction(L=d)==0.5: " + (half ? "yes" : "no")};
}

// 9. Top-k FFN.
Outcome criterion9() {
    testing::TemplatedRecipe recipe;
    recipe.seed = 9;
    const auto docs = testing::templated_documents(recipe);
    const auto train = testing::make_corpus(docs.train, recipe.segment_len, "templated-train");
    const auto eval = testing::make_corpus(docs.eval, recipe.segment_len, "templated-eval");
    auto cfg = end_to_end_config(9);
    cfg.steps = 200;
    Trainer tr(cfg, train);
    tr.run();
    const std::size_t f = cfg.model.d_ff;
    const std::vector<std::size_t> ks = {f, f / 2, f / 10, 1};
    std::vector<double> deltas;
    std::ostringstream detail;
    for (auto k : ks) {
        const auto r = topk_ffn_eval(tr.state(), eval, k, 0);
        deltas.push_back(r.delta);
        detail << " k=" << k << ":" << fmt(r.delta);
    }
    bool monotone = true;
    for (std::size_t i = 1; i < deltas.size(); ++i) monotone = monotone && deltas[i] >= deltas[i - 1] - kTopkMonotoneEps;
    const double tenth = deltas[2];
    const bool fixture = std::abs(tenth - kTopkTenthDeltaFixture) <= kTopkFixtureRelTol * std::max(1.0, std::abs(kTopkTenthDeltaFixture));
    std::printf("  criterion 9 fixture: d_ff/10 delta = %.17g\n", tenth);
    return {deltas[0] == 0.0 && monotone && fixture,
            "deltas" + detail.str() + " dense_exact=" + (deltas[0] == 0.0 ? "yes" : "no") + " monotone=" + (monotone ? "yes" : "no") +
                " fixture=" + (fixture ? "match" : "MISMATCH")};
}

// 10. Determinism and persistence.
Outcome criterion10() {
    testing::TemplatedRecipe recipe;
    recipe.seed = 10;
    recipe.train_docs = 24;
    const auto docs = testing::templated_documents(recipe);
    const auto corpus = testing::make_corpus(docs.train, recipe.segment_len, "determinism");
    auto cfg = end_to_end_config(10);
    cfg.steps = 60;
    cfg.refresh_interval = 20;
    auto run_logs = [&](Trainer& t, std::ostringstream& metrics, std::ostringstream& refresh) {
        t.set_metrics_stream(&metrics);
        t.set_refresh_stream(&refresh);
        t.run();
    };
    std::ostringstream m1, r1, m2, r2;
    write_metrics_header(m1);
    write_refresh_header(r1);
    write_metrics_header(m2);
    write_refresh_header(r2);
    Trainer a(cfg, corpus), b(cfg, corpus);
    run_logs(a, m1, r1);
    run_logs(b, m2, r2);
    const bool identical = m1.str() == m2.str() && r1.str() == r2.str();
    const bool params_equal = encode_container(encode_checkpoint(a.state())) == encode_container(encode_checkpoint(b.state()));

    bool resume_ok = true;
    std::string where;
    const auto dir = std::filesystem::temp_directory_path() / ("retrolm-acceptance-" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    for (std::size_t stop : {20ul, 33ul}) {
        auto part = cfg;
        std::ostringstream mp, rp;
        write_metrics_header(mp);
        write_refresh_header(rp);
        Trainer first(cfg, corpus);
        first.set_metrics_stream(&mp);
        first.set_refresh_stream(&rp);
        while (first.state().step < stop) first.step();
        const auto path = dir / ("stop-" + std::to_string(stop) + ".ckpt");
        first.save(path);
        auto second = Trainer::resume(path, corpus, &part);
        second.set_metrics_stream(&mp);
        second.set_refresh_stream(&rp);
        second.run();
        const bool same = mp.str() == m1.str() && rp.str() == r1.str() &&
                          encode_container(encode_checkpoint(second.state())) == encode_container(encode_checkpoint(a.state()));
        if (!same) {
            resume_ok = false;
            where += " stop=" + std::to_string(stop);
        }
    }
    std::filesystem::remove_all(dir);
    return {identical && params_equal && resume_ok, std::string("identical_logs=") + (identical ? "yes" : "no") +
                                                        " identical_final_state=" + (params_equal ? "yes" : "no") +
                                                        " resume_matches=" + (resume_ok ? "yes" : "no" + where)};
}

} // namespace

int main(int argc, char** argv) {
    const std::map<int, std::function<Outcome()>> criteria = {
        {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
        {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10},
    };
    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
    if (selected.empty()) {
        for (const auto& [k, _] : criteria) selected.push_back(k);
    }
    int failures = 0;
    for (int id : selected) {
        const auto it = criteria.find(id);
        if (it == criteria.end()) {
            std::cerr << "unknown criterion " << id << '\n';
            return 2;
        }
        Outcome o;
        try {
            o = it->second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << std::endl;
        failures += !o.pass;
    }
    return failures == 0 ? 0 : 1;
}
