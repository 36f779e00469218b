// SPDX-License-Identifier: Apache-2.0
#include "retrolm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <ostream>

#include "retrolm/error.hpp"
#include "retrolm/rng.hpp"

namespace retrolm {

std::string model_id(const ModelParams<TrainScalar>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    params.weights.visit([&](const std::string& name, const nn::Tensor<TrainScalar>& t) {
        for (unsigned char c : name) h = (h ^ c) * 0x100000001b3ULL;
        for (auto x : t.values()) {
            std::uint32_t bits;
            std::memcpy(&bits, &x, 4);
            for (int b = 0; b < 4; ++b) h = (h ^ ((bits >> (8 * b)) & 0xffU)) * 0x100000001b3ULL;
        }
    });
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

EvalPlan make_eval_plan(const TrainState& ckpt, const Corpus& corpus, std::uint64_t seed) {
    if (corpus.empty()) throw UsageError("eval: empty corpus");
    if (corpus.segment_len() != ckpt.config.model.segment_len) {
        throw UsageError("eval: corpus segment length " + std::to_string(corpus.segment_len()) +
                         " differs from the model's " + std::to_string(ckpt.config.model.segment_len));
    }
    EvalPlan ep;
    const std::uint64_t epoch = 1;
    ep.table = refresh_embeddings(ckpt.params, corpus, epoch, ckpt.config.embed_chunk);
    auto ip = ckpt.config.index_params(epoch);
    if (ip.n_clusters > corpus.size()) ip.n_clusters = 0;
    const auto index = Index::build(ep.table, ip);
    KnnPlanParams p;
    p.m = ckpt.config.m;
    p.k = ckpt.config.k;
    p.seed = Rng::derive(seed, {0xe7a1});
    p.epoch = epoch;
    p.co_target_index = ip;
    ep.plan = knn_plan(index, ep.table, corpus, p);
    return ep;
}

LossReport evaluate_plan(const TrainState& ckpt, const Corpus& corpus, const EvalPlan& plan,
                         const ForwardOptions& options) {
    const auto params = ckpt.params.cast<double>();
    const std::size_t n = ckpt.config.model.segment_len;
    LossReport r;
    r.model_id = model_id(ckpt.params);
    r.corpus_id = corpus.id();
    double total = 0.0;
    for (const auto& sb : plan.plan.sub_batches) {
        const auto losses = evaluate_token_losses(params, make_input(corpus, sb), options);
        for (std::size_t t = 0; t < sb.targets.size(); ++t) {
            const std::size_t base = static_cast<std::size_t>(corpus.segment(sb.targets[t].row).ref.index) * n;
            for (std::size_t o = 0; o < n; ++o) {
                const std::size_t pos = base + o;
                if (r.per_position.size() <= pos) r.per_position.resize(pos + 1);
                const double l = losses[t * n + o];
                r.per_position[pos].sum += l;
                ++r.per_position[pos].count;
                total += l;
                ++r.tokens;
            }
        }
    }
    for (auto& p : r.per_position) p.mean_loss = p.count ? p.sum / static_cast<double>(p.count) : 0.0;
    r.overall_mean = r.tokens ? total / static_cast<double>(r.tokens) : 0.0;
    return r;
}

LossReport per_position_loss(const TrainState& ckpt, const Corpus& corpus, std::uint64_t seed) {
    if (corpus.id() == ckpt.corpus_id) {
        throw UsageError("eval corpus id " + corpus.id() + " equals the checkpoint's training corpus id");
    }
    const auto plan = make_eval_plan(ckpt, corpus, seed);
    return evaluate_plan(ckpt, corpus, plan, forward_options(ckpt.config));
}

double mean_below(const LossReport& report, std::size_t L) {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t p = 0; p < std::min(L, report.per_position.size()); ++p) {
        s += report.per_position[p].sum;
        c += report.per_position[p].count;
    }
    return c ? s / static_cast<double>(c) : 0.0;
}

EarlyTokenDelta early_token_delta(const LossReport& a, const LossReport& b, std::size_t L) {
    if (a.corpus_id != b.corpus_id) {
        throw UsageError("early_token_delta: reports cover different corpora (" + a.corpus_id + " vs " + b.corpus_id + ")");
    }
    EarlyTokenDelta d;
    d.delta = mean_below(a, L) - mean_below(b, L);
    const std::size_t n = std::min({L, a.per_position.size(), b.per_position.size()});
    for (std::size_t p = 0; p < n; ++p) d.per_position.push_back(a.per_position[p].mean_loss - b.per_position[p].mean_loss);
    return d;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = r;
        i = j + 1;
    }
    return rank;
}

} // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw UsageError("spearman: need two equal-length series of at least 2");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(rx.size());
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(ry.size());
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

double position_loss_spearman(const LossReport& report, std::size_t max_position) {
    std::vector<double> pos, loss;
    for (std::size_t p = 0; p < report.per_position.size() && p <= max_position; ++p) {
        if (report.per_position[p].count == 0) continue;
        pos.push_back(static_cast<double>(p));
        loss.push_back(report.per_position[p].mean_loss);
    }
    return spearman(pos, loss);
}

AttentionKind parse_attention_kind(std::string_view text) {
    if (text == "full") return AttentionKind::full;
    if (text == "three_halves") return AttentionKind::three_halves;
    if (text == "linear") return AttentionKind::linear;
    throw UsageError("attention kind must be full, three_halves or linear, got '" + std::string(text) + "'");
}

std::string to_string(AttentionKind kind) {
    switch (kind) {
    case AttentionKind::full: return "full";
    case AttentionKind::three_halves: return "three_halves";
    case AttentionKind::linear: return "linear";
    }
    return "full";
}

double attention_flop_fraction(const FlopsModel& fm) {
    if (!(fm.L > 0.0) || !(fm.d_model > 0.0)) throw UsageError("attention_flop_fraction: L and d_model must be positive");
    double f = fm.L;
    if (fm.kind == AttentionKind::full) f = fm.L * fm.L;
    if (fm.kind == AttentionKind::three_halves) f = fm.L * std::sqrt(fm.L);
    const double attn = f * fm.d_model;
    return attn / (fm.L * fm.d_model * fm.d_model + attn);
}

AllocationResult compute_allocation(double c) {
    if (!(c > 0.0) || !std::isfinite(c)) throw UsageError("compute_allocation: compute ratio must be positive");
    return {c, std::pow(c, kModelSizeExponent), std::pow(c, kBatchSizeExponent), std::pow(c, kStepsExponent)};
}

TopkFfnResult topk_ffn_eval(const TrainState& ckpt, const Corpus& corpus, std::size_t k, std::uint64_t seed) {
    if (k < 1 || k > ckpt.config.model.d_ff) {
        throw UsageError("topk_ffn_eval: k = " + std::to_string(k) + " must be in [1, " +
                         std::to_string(ckpt.config.model.d_ff) + "]");
    }
    const auto plan = make_eval_plan(ckpt, corpus, seed);
    auto opts = forward_options(ckpt.config);
    TopkFfnResult r;
    r.k = k;
    r.unmasked_loss = evaluate_plan(ckpt, corpus, plan, opts).overall_mean;
    opts.ffn_topk = k;
    r.masked_loss = evaluate_plan(ckpt, corpus, plan, opts).overall_mean;
    r.delta = r.masked_loss - r.unmasked_loss;
    return r;
}

RetrievalDiagnostics retrieval_diagnostics(const TrainState& ckpt, const Corpus& corpus, std::uint64_t seed) {
    const auto plan = make_eval_plan(ckpt, corpus, seed);
    const auto d = validate_plan(plan.plan, corpus);
    RetrievalDiagnostics r;
    r.same_doc_frac = d.same_doc_frac;
    r.cross_doc_frac = d.cross_doc_frac;
    r.predecessor_frac = d.predecessor_frac;
    r.null_source_frac = d.null_source_frac;
    r.identical_text_pairs = d.identical_text_pairs;
    r.pairs = d.pairs;
    r.mean_pair_cosine = mean_pair_cosine(plan.plan, plan.table, corpus);
    return r;
}

void write_loss_report(std::ostream& out, const LossReport& report) {
    out << "position,mean_loss,count\n";
    for (std::size_t p = 0; p < report.per_position.size(); ++p) {
        const auto& s = report.per_position[p];
        if (s.count == 0) continue;
        out << p << ',' << format_real(s.mean_loss) << ',' << s.count << '\n';
    }
}

void write_summary(std::ostream& out, const LossReport& report) {
    out << "model_id = " << report.model_id << '\n'
        << "corpus_id = " << report.corpus_id << '\n'
        << "tokens = " << report.tokens << '\n'
        << "overall_mean = " << format_real(report.overall_mean) << '\n';
}

} // namespace retrolm
