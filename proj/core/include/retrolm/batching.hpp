// SPDX-License-Identifier: Apache-2.0
//
// Sub-batch construction. A sub-batch pairs targets (segments to predict) with an
// equal number of sources (segments the decoder may attend to), subject to the
// segment-level causality mask.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "retrolm/corpus.hpp"
#include "retrolm/model.hpp"
#include "retrolm/retrieval.hpp"
#include "retrolm/tensor.hpp"

namespace retrolm {

struct PlanTarget {
    std::size_t row = 0;
    std::uint32_t prediction_index = 0;  // the target's own seg_index
    bool null_source = false;            // every source is masked for this target
};

struct SubBatch {
    std::vector<std::size_t> sources;  // corpus rows; may repeat when the eligible pool is small
    std::vector<PlanTarget> targets;
    nn::Mask mask;                     // targets x sources, true = masked
};

struct BatchPlan {
    std::vector<SubBatch> sub_batches;
    std::uint64_t epoch = 0;
    std::uint64_t seed = 0;
    std::size_t m = 0;
    bool cold_start = false;
};

/// Same-sample sub-batches: a sample's targets S_1.. in chunks of m, each with the
/// predecessors of its targets as sources. Single-segment samples contribute S_0 as
/// a null-source target. Sub-batch order is shuffled by `seed`.
BatchPlan cold_start_plan(const Corpus& corpus, std::size_t m, std::uint64_t seed);

struct KnnPlanParams {
    std::size_t m = 4;
    std::size_t k = 8;
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;     // the current refresh epoch; table and index must match it
    IndexParams co_target_index; // how the query-vector index used for grouping targets is built
};

/// Greedy similarity clustering over `table`'s context queries; every corpus row is a
/// target exactly once. Throws StaleIndexError when the index or table is not at `epoch`.
BatchPlan knn_plan(const Index& index, const EmbeddingTable& table, const Corpus& corpus, const KnnPlanParams& params);

/// Query vectors of every row (see context_query) as their own table.
EmbeddingTable query_table(const EmbeddingTable& table, const Corpus& corpus);

struct PlanViolation {
    std::size_t sub_batch = 0;
    std::string kind;
    std::string detail;
};

struct PlanDiagnostics {
    std::size_t sub_batches = 0;
    std::size_t targets = 0;
    std::size_t null_source_targets = 0;
    std::size_t pairs = 0;     // unmasked (target, source) pairs
    double null_source_frac = 0.0;
    double same_doc_frac = 1.0;     // same_doc_frac + cross_doc_frac == 1
    double cross_doc_frac = 0.0;
    double predecessor_frac = 0.0;  // subset of same_doc_frac
    std::size_t identical_text_pairs = 0;  // cross-sample sources whose tokens equal the target's
    std::vector<PlanViolation> violations;
    bool ok() const noexcept { return violations.empty(); }
};

PlanDiagnostics validate_plan(const BatchPlan& plan, const Corpus& corpus);

/// Mean over unmasked pairs of query(target) . e(source), the similarity the bias sees.
double mean_pair_cosine(const BatchPlan& plan, const EmbeddingTable& table, const Corpus& corpus);

/// Tokens, contexts and mask for one forward pass.
SubBatchInput make_input(const Corpus& corpus, const SubBatch& sub_batch);

/// Human-readable listing: membership, refs and the mask ('x' = masked).
void dump_plan(const BatchPlan& plan, const Corpus& corpus, std::ostream& out);

} // namespace retrolm
