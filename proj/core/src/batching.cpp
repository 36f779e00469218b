// SPDX-License-Identifier: Apache-2.0
#include "retrolm/batching.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include "retrolm/error.hpp"
#include "retrolm/rng.hpp"

namespace retrolm {

namespace {

void finish_sub_batch(const Corpus& corpus, SubBatch& sb) {
    std::vector<SegmentRef> src, tgt;
    for (auto r : sb.sources) src.push_back(corpus.segment(r).ref);
    for (auto& t : sb.targets) tgt.push_back(corpus.segment(t.row).ref);
    sb.mask = causality_mask(src, tgt);
    for (std::size_t i = 0; i < sb.targets.size(); ++i) sb.targets[i].null_source = sb.mask.row_all_masked(i);
}

PlanTarget make_target(const Corpus& corpus, std::size_t row) {
    return {row, corpus.segment(row).ref.index, false};
}

std::string ref_text(SegmentRef r) {
    return std::to_string(r.sample) + ":" + std::to_string(r.index);
}

} // namespace

BatchPlan cold_start_plan(const Corpus& corpus, std::size_t m, std::uint64_t seed) {
    if (corpus.empty()) throw UsageError("cold_start_plan: empty corpus");
    if (m == 0) throw UsageError("cold_start_plan: m must be positive");
    BatchPlan plan;
    plan.seed = seed;
    plan.m = m;
    plan.cold_start = true;
    for (const auto& s : corpus.samples()) {
        if (s.segment_count == 1) {
            SubBatch sb;
            sb.targets.push_back(make_target(corpus, s.first_row));
            sb.sources.push_back(s.first_row);
            finish_sub_batch(corpus, sb);
            plan.sub_batches.push_back(std::move(sb));
            continue;
        }
        for (std::size_t v = 1; v < s.segment_count; v += m) {
            SubBatch sb;
            for (std::size_t t = v; t < std::min(v + m, s.segment_count); ++t) {
                sb.targets.push_back(make_target(corpus, s.first_row + t));
                sb.sources.push_back(s.first_row + t - 1);
            }
            finish_sub_batch(corpus, sb);
            plan.sub_batches.push_back(std::move(sb));
        }
    }
    Rng rng(seed);
    rng.shuffle(plan.sub_batches.begin(), plan.sub_batches.end());
    return plan;
}

EmbeddingTable query_table(const EmbeddingTable& table, const Corpus& corpus) {
    if (table.size() != corpus.size()) throw ShapeError("query_table: table does not cover the corpus");
    EmbeddingTable q;
    q.dim = table.dim;
    q.epoch = table.epoch;
    q.refs = table.refs;
    q.empty_query = table.empty_query;
    q.vectors.reserve(table.vectors.size());
    for (std::size_t r = 0; r < corpus.size(); ++r) {
        const auto v = context_query(table, corpus, r);
        q.vectors.insert(q.vectors.end(), v.begin(), v.end());
    }
    return q;
}

BatchPlan knn_plan(const Index& index, const EmbeddingTable& table, const Corpus& corpus, const KnnPlanParams& params) {
    if (index.epoch() != params.epoch || table.epoch != params.epoch) {
        throw StaleIndexError("knn_plan: index epoch " + std::to_string(index.epoch()) + ", table epoch " +
                              std::to_string(table.epoch) + ", current epoch " + std::to_string(params.epoch));
    }
    if (params.m == 0 || params.k == 0) throw UsageError("knn_plan: m and k must be positive");
    if (corpus.empty() || table.size() != corpus.size() || index.size() != corpus.size()) {
        throw ShapeError("knn_plan: index/table do not cover the corpus");
    }
    const std::size_t n = corpus.size();
    const auto queries = query_table(table, corpus);
    auto co_params = params.co_target_index;
    if (co_params.mode == IndexMode::ivf && co_params.n_clusters > n) co_params.n_clusters = 0;
    const auto co_index = Index::build(queries, co_params);

    BatchPlan plan;
    plan.epoch = params.epoch;
    plan.seed = params.seed;
    plan.m = params.m;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(params.seed);
    rng.shuffle(order.begin(), order.end());
    std::vector<char> used(n, 0);

    for (auto seed_row : order) {
        if (used[seed_row]) continue;
        SubBatch sb;
        used[seed_row] = 1;
        sb.targets.push_back(make_target(corpus, seed_row));
        if (params.m > 1) {
            auto co = co_index.knn(queries.row(seed_row), params.m - 1, [&](std::size_t r) { return used[r] != 0; });
            for (const auto& nb : co.neighbors) {
                used[nb.row] = 1;
                sb.targets.push_back(make_target(corpus, nb.row));
            }
        }

        std::set<std::size_t> chosen;
        for (const auto& t : sb.targets) {
            if (auto p = corpus.predecessor(t.row); p && !chosen.count(*p)) {
                chosen.insert(*p);
                sb.sources.push_back(*p);
            }
        }
        std::map<std::size_t, double> pool;
        for (const auto& t : sb.targets) {
            const auto tref = corpus.segment(t.row).ref;
            auto nbrs = index.knn(queries.row(t.row), params.k, [&](std::size_t r) {
                const auto& ref = corpus.segment(r).ref;
                return ref.sample == tref.sample && ref.index >= tref.index;
            });
            for (const auto& nb : nbrs.neighbors) {
                auto [it, fresh] = pool.emplace(nb.row, nb.score);
                if (!fresh) it->second = std::max(it->second, nb.score);
            }
        }
        std::vector<Neighbor> ranked;
        for (const auto& [row, score] : pool) {
            if (!chosen.count(row)) ranked.push_back({row, corpus.segment(row).ref, score});
        }
        std::sort(ranked.begin(), ranked.end(), [](const Neighbor& a, const Neighbor& b) {
            return a.score > b.score || (a.score == b.score && a.row < b.row);
        });
        for (const auto& nb : ranked) {
            if (sb.sources.size() >= sb.targets.size()) break;
            sb.sources.push_back(nb.row);
        }
        if (sb.sources.empty()) sb.sources.push_back(sb.targets.front().row);
        for (std::size_t i = 0; sb.sources.size() < sb.targets.size(); ++i) sb.sources.push_back(sb.sources[i]);
        finish_sub_batch(corpus, sb);
        plan.sub_batches.push_back(std::move(sb));
    }
    return plan;
}

PlanDiagnostics validate_plan(const BatchPlan& plan, const Corpus& corpus) {
    PlanDiagnostics d;
    d.sub_batches = plan.sub_batches.size();
    std::size_t same = 0, pred = 0;
    for (std::size_t b = 0; b < plan.sub_batches.size(); ++b) {
        const auto& sb = plan.sub_batches[b];
        auto violate = [&](std::string kind, std::string detail) {
            d.violations.push_back({b, std::move(kind), std::move(detail)});
        };
        if (sb.sources.size() != sb.targets.size()) {
            violate("parity", std::to_string(sb.sources.size()) + " sources for " + std::to_string(sb.targets.size()) + " targets");
        }
        if (sb.targets.empty()) violate("empty", "sub-batch has no targets");
        if (plan.m && sb.targets.size() > plan.m) {
            violate("size", std::to_string(sb.targets.size()) + " targets exceed m = " + std::to_string(plan.m));
        }
        bool rows_ok = true;
        for (auto r : sb.sources) rows_ok &= r < corpus.size();
        for (const auto& t : sb.targets) rows_ok &= t.row < corpus.size();
        if (!rows_ok) {
            violate("range", "row outside the corpus");
            continue;
        }
        if (sb.mask.rows() != sb.targets.size() || sb.mask.cols() != sb.sources.size()) {
            violate("mask_shape", std::to_string(sb.mask.rows()) + "x" + std::to_string(sb.mask.cols()));
            continue;
        }
        std::set<std::size_t> seen;
        for (std::size_t i = 0; i < sb.targets.size(); ++i) {
            const auto& t = sb.targets[i];
            const auto tref = corpus.segment(t.row).ref;
            if (!seen.insert(t.row).second) violate("duplicate_target", "target " + ref_text(tref) + " appears twice");
            if (t.prediction_index != tref.index) {
                violate("prediction_index", "target " + ref_text(tref) + " has prediction_index " + std::to_string(t.prediction_index));
            }
            if (t.null_source != sb.mask.row_all_masked(i)) {
                violate("null_flag", "target " + ref_text(tref) + " null-source flag disagrees with its mask row");
            }
            ++d.targets;
            if (sb.mask.row_all_masked(i)) ++d.null_source_targets;
            for (std::size_t j = 0; j < sb.sources.size(); ++j) {
                const auto& src = corpus.segment(sb.sources[j]);
                const bool must_mask = src.ref.sample == tref.sample && src.ref.index >= tref.index;
                const bool masked = sb.mask.masked(i, j);
                if (must_mask && !masked) {
                    violate("causality", "source " + ref_text(src.ref) + " visible to target " + ref_text(tref));
                } else if (masked && !must_mask) {
                    violate("over_masked", "source " + ref_text(src.ref) + " hidden from target " + ref_text(tref));
                }
                if (masked) continue;
                ++d.pairs;
                if (src.ref.sample == tref.sample) {
                    ++same;
                    if (src.ref.index + 1 == tref.index) ++pred;
                } else if (src.tokens == corpus.segment(t.row).tokens) {
                    ++d.identical_text_pairs;
                }
            }
        }
    }
    if (d.targets) d.null_source_frac = double(d.null_source_targets) / double(d.targets);
    if (d.pairs) {
        d.same_doc_frac = double(same) / double(d.pairs);
        d.cross_doc_frac = double(d.pairs - same) / double(d.pairs);
        d.predecessor_frac = double(pred) / double(d.pairs);
    }
    return d;
}

double mean_pair_cosine(const BatchPlan& plan, const EmbeddingTable& table, const Corpus& corpus) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& sb : plan.sub_batches) {
        for (std::size_t i = 0; i < sb.targets.size(); ++i) {
            const auto q = context_query(table, corpus, sb.targets[i].row);
            for (std::size_t j = 0; j < sb.sources.size(); ++j) {
                if (sb.mask.masked(i, j)) continue;
                total += dot(q, table.row(sb.sources[j]));
                ++count;
            }
        }
    }
    return count ? total / double(count) : 0.0;
}

SubBatchInput make_input(const Corpus& corpus, const SubBatch& sb) {
    SubBatchInput in;
    for (auto r : sb.sources) in.sources.push_back(corpus.segment(r).tokens);
    for (const auto& t : sb.targets) {
        in.targets.push_back(corpus.segment(t.row).tokens);
        if (auto p = corpus.predecessor(t.row)) {
            in.contexts.push_back(corpus.segment(*p).tokens);
        } else {
            in.contexts.emplace_back();
        }
    }
    in.mask = sb.mask;
    return in;
}

void dump_plan(const BatchPlan& plan, const Corpus& corpus, std::ostream& out) {
    out << "plan kind=" << (plan.cold_start ? "cold_start" : "knn") << " epoch=" << plan.epoch << " seed=" << plan.seed
        << " m=" << plan.m << " sub_batches=" << plan.sub_batches.size() << '\n';
    for (std::size_t b = 0; b < plan.sub_batches.size(); ++b) {
        const auto& sb = plan.sub_batches[b];
        out << "sub_batch " << b << '\n';
        for (const auto& t : sb.targets) {
            out << "  target row=" << t.row << " ref=" << ref_text(corpus.segment(t.row).ref) << " v=" << t.prediction_index
                << (t.null_source ? " null_source" : "") << '\n';
        }
        for (auto r : sb.sources) out << "  source row=" << r << " ref=" << ref_text(corpus.segment(r).ref) << '\n';
        out << "  mask\n";
        for (std::size_t i = 0; i < sb.mask.rows(); ++i) {
            out << "    ";
            for (std::size_t j = 0; j < sb.mask.cols(); ++j) out << (sb.mask.masked(i, j) ? 'x' : '.');
            out << '\n';
        }
    }
}

} // namespace retrolm
