// SPDX-License-Identifier: Apache-2.0
//
// Evaluation harness: per-position loss, retrieval-vs-baseline comparison,
// retrieval diagnostics, and the closed-form FLOPs / allocation calculators.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retrolm/batching.hpp"
#include "retrolm/corpus.hpp"
#include "retrolm/training.hpp"

namespace retrolm {

struct PositionStat {
    double mean_loss = 0.0;
    double sum = 0.0;
    std::size_t count = 0;
};

struct LossReport {
    std::vector<PositionStat> per_position;  // index = absolute token position within the sample
    double overall_mean = 0.0;
    std::size_t tokens = 0;
    std::string model_id;
    std::string corpus_id;
};

/// Content hash (hex) of a model's parameters.
std::string model_id(const ModelParams<TrainScalar>& params);

/// Evaluation plan over the eval corpus alone, grouped with embeddings from the
/// checkpoint's parameters. Every eval segment is a target exactly once.
struct EvalPlan {
    BatchPlan plan;
    EmbeddingTable table;
};

EvalPlan make_eval_plan(const TrainState& checkpoint, const Corpus& corpus, std::uint64_t seed = 0);

/// Teacher-forced losses over `plan`, bucketed by seg_index * N + offset. 64-bit forward.
LossReport evaluate_plan(const TrainState& checkpoint, const Corpus& corpus, const EvalPlan& plan,
                         const ForwardOptions& options);

/// Throws UsageError when the corpus is the checkpoint's training corpus.
LossReport per_position_loss(const TrainState& checkpoint, const Corpus& corpus, std::uint64_t seed = 0);

struct EarlyTokenDelta {
    double delta = 0.0;  // token-weighted mean over positions < L: retrieval minus baseline
    std::vector<double> per_position;
};

/// Throws UsageError when the reports cover different corpora.
EarlyTokenDelta early_token_delta(const LossReport& retrieval, const LossReport& baseline, std::size_t L);

/// Token-weighted mean loss over positions < L.
double mean_below(const LossReport& report, std::size_t L);

/// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> x, std::span<const double> y);
/// Spearman between position and mean loss over the populated positions <= max_position.
double position_loss_spearman(const LossReport& report, std::size_t max_position);

enum class AttentionKind { full, three_halves, linear };
AttentionKind parse_attention_kind(std::string_view text);
std::string to_string(AttentionKind kind);

struct FlopsModel {
    double L = 1.0;
    double d_model = 1.0;
    AttentionKind kind = AttentionKind::full;
};

/// f(L) d / (L d^2 + f(L) d) with f(L) = L^2, L^1.5 or L.
double attention_flop_fraction(const FlopsModel& fm);

inline constexpr double kModelSizeExponent = 0.73;
inline constexpr double kBatchSizeExponent = 0.24;
inline constexpr double kStepsExponent = 0.03;

struct AllocationResult {
    double compute_ratio = 1.0;
    double model_mult = 1.0;
    double batch_mult = 1.0;
    double steps_mult = 1.0;
};

AllocationResult compute_allocation(double compute_ratio);

struct TopkFfnResult {
    std::size_t k = 0;
    double masked_loss = 0.0;
    double unmasked_loss = 0.0;
    double delta = 0.0;  // masked - unmasked
};

/// Eval-time top-k masking of every FFN's hidden units. Throws UsageError unless 1 <= k <= d_ff.
TopkFfnResult topk_ffn_eval(const TrainState& checkpoint, const Corpus& corpus, std::size_t k, std::uint64_t seed = 0);

struct RetrievalDiagnostics {
    double same_doc_frac = 1.0;
    double cross_doc_frac = 0.0;
    double predecessor_frac = 0.0;
    double mean_pair_cosine = 0.0;
    double null_source_frac = 0.0;
    std::size_t identical_text_pairs = 0;
    std::size_t pairs = 0;
};

RetrievalDiagnostics retrieval_diagnostics(const TrainState& checkpoint, const Corpus& corpus, std::uint64_t seed = 0);

void write_loss_report(std::ostream& out, const LossReport& report);
void write_summary(std::ostream& out, const LossReport& report);

} // namespace retrolm
