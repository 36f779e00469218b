// SPDX-License-Identifier: Apache-2.0
//
// Joint training loop: cold-start plans until the first refresh, then every I
// steps re-embed the corpus, rebuild the index and regroup sub-batches by
// similarity. Training runs in single precision.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "retrolm/batching.hpp"
#include "retrolm/config.hpp"
#include "retrolm/container.hpp"
#include "retrolm/corpus.hpp"
#include "retrolm/model.hpp"
#include "retrolm/retrieval.hpp"

namespace retrolm {

using TrainScalar = float;

struct AdamState {
    Weights<nn::Tensor<TrainScalar>> m, v;
    std::size_t t = 0;

    static AdamState zeros(const ModelConfig& config);
};

struct AdamHyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

/// One bias-corrected adaptive-moment update. Parameters named in `frozen` are left untouched.
void adam_update(Weights<nn::Tensor<TrainScalar>>& params, const Weights<nn::Tensor<TrainScalar>>& grads,
                 AdamState& state, const AdamHyper& hyper, const std::vector<std::string>& frozen = {});

double global_norm(const Weights<nn::Tensor<TrainScalar>>& grads);
/// Rescales to `max_norm` when the global norm exceeds it (0 disables). Returns the pre-clip norm.
double clip_gradients(Weights<nn::Tensor<TrainScalar>>& grads, double max_norm);

/// Linear warmup over `warmup` steps, then constant. `step` counts from 1.
double learning_rate(const TrainConfig& config, std::size_t step);

ForwardOptions forward_options(const TrainConfig& config);

struct StepMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double beta = 0.0;
    double lr = 0.0;
    double null_source_frac = 0.0;
    double same_doc_src_frac = 1.0;
    std::uint64_t epoch = 0;
    double grad_norm = 0.0;
};

struct RefreshRecord {
    std::uint64_t epoch = 0;
    std::size_t step = 0;
    double mean_pair_cosine = 0.0;
    double same_doc_frac = 1.0;
    double cross_doc_frac = 0.0;
    double predecessor_frac = 0.0;
    double null_source_frac = 0.0;
};

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const StepMetrics& m);
void write_refresh_header(std::ostream& out);
void write_refresh_row(std::ostream& out, const RefreshRecord& r);

/// Everything a checkpoint stores.
struct TrainState {
    TrainConfig config;
    std::string corpus_id;
    ModelParams<TrainScalar> params;
    AdamState adam;
    std::size_t step = 0;      // completed optimizer steps
    std::uint64_t epoch = 0;   // == step / refresh_interval
    std::uint64_t pass = 0;    // plan regenerations within the epoch
    std::size_t cursor = 0;    // next sub-batch of the current plan
    EmbeddingTable table;      // empty before the first refresh
};

Container encode_checkpoint(const TrainState& state);
/// Strict decode. Throws LoadError naming the offending field; never returns partial state.
TrainState decode_checkpoint(const Container& c);
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

/// Plan seed for (epoch, pass); the sole source of batch randomness.
std::uint64_t plan_seed(const TrainConfig& config, std::uint64_t epoch, std::uint64_t pass);

class Trainer {
public:
    Trainer(const TrainConfig& config, const Corpus& corpus);

    /// Resumes from a checkpoint. When `expected` is given, every key except
    /// `steps` and `checkpoint_every` must match (LoadError names the first
    /// mismatch) and its `steps` replaces the stored one.
    static Trainer resume(const std::filesystem::path& checkpoint, const Corpus& corpus,
                          const TrainConfig* expected = nullptr);

    /// One optimizer step; refreshes afterwards when step % I == 0.
    StepMetrics step();
    /// Steps until config.steps, checkpointing per config into `checkpoint_dir` when set.
    void run(const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

    bool done() const noexcept { return state_.step >= state_.config.steps; }
    const TrainState& state() const noexcept { return state_; }
    TrainState& mutable_state() noexcept { return state_; }
    const BatchPlan& plan() const noexcept { return plan_; }
    const std::optional<Index>& index() const noexcept { return index_; }

    const std::vector<StepMetrics>& metrics() const noexcept { return metrics_; }
    const std::vector<RefreshRecord>& refreshes() const noexcept { return refreshes_; }

    void set_metrics_stream(std::ostream* out) noexcept { metrics_out_ = out; }
    void set_refresh_stream(std::ostream* out) noexcept { refresh_out_ = out; }
    void set_plan_stream(std::ostream* out) noexcept { plan_out_ = out; }
    /// Where the state is written if a step produces a non-finite value.
    void set_dump_path(std::filesystem::path p) { dump_path_ = std::move(p); }

    void save(const std::filesystem::path& path) const { save_checkpoint(path, state_); }

private:
    Trainer(TrainState state, const Corpus& corpus);
    void rebuild_plan();
    void refresh();
    SubBatch next_sub_batch();

    TrainState state_;
    const Corpus* corpus_;
    std::optional<Index> index_;
    BatchPlan plan_;
    std::vector<StepMetrics> metrics_;
    std::vector<RefreshRecord> refreshes_;
    std::ostream* metrics_out_ = nullptr;
    std::ostream* refresh_out_ = nullptr;
    std::ostream* plan_out_ = nullptr;
    std::optional<std::filesystem::path> dump_path_;
};

} // namespace retrolm
