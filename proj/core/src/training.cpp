// SPDX-License-Identifier: Apache-2.0
#include "retrolm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "retrolm/error.hpp"
#include "retrolm/ops.hpp"
#include "retrolm/rng.hpp"

namespace retrolm {

using nn::Tensor;

namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kPlanTag = 0x91a7;
constexpr std::uint64_t kCoTargetTag = 0xc07a;
constexpr const char* kFormatVersion = "1";

std::vector<Tensor<TrainScalar>*> tensors_of(Weights<Tensor<TrainScalar>>& w) {
    std::vector<Tensor<TrainScalar>*> out;
    w.visit([&](const std::string&, Tensor<TrainScalar>& t) { out.push_back(&t); });
    return out;
}

std::vector<const Tensor<TrainScalar>*> tensors_of(const Weights<Tensor<TrainScalar>>& w) {
    std::vector<const Tensor<TrainScalar>*> out;
    w.visit([&](const std::string&, const Tensor<TrainScalar>& t) { out.push_back(&t); });
    return out;
}

std::vector<std::string> names_of(const Weights<Tensor<TrainScalar>>& w) {
    std::vector<std::string> out;
    w.visit([&](const std::string& n, const Tensor<TrainScalar>&) { out.push_back(n); });
    return out;
}

void add_weights(Container& c, const std::string& prefix, const Weights<Tensor<TrainScalar>>& w) {
    w.visit([&](const std::string& name, const Tensor<TrainScalar>& t) {
        c.add_tensor(prefix + name, t.shape(), std::vector<float>(t.data(), t.data() + t.size()));
    });
}

void read_weights(const Container& c, const std::string& prefix, Weights<Tensor<TrainScalar>>& w) {
    w.visit([&](const std::string& name, Tensor<TrainScalar>& t) {
        const auto& ct = c.tensor(prefix + name);
        if (ct.shape != t.shape()) {
            throw LoadError("checkpoint: tensor '" + prefix + name + "' has shape " + nn::shape_string(ct.shape) +
                            ", config implies " + nn::shape_string(t.shape()));
        }
        t = Tensor<TrainScalar>(t.shape(), ct.data);
    });
}

std::uint64_t require_uint(const Container& c, const std::string& key) {
    try {
        return parse_uint(c.require(key), key);
    } catch (const UsageError& e) {
        throw LoadError(std::string("checkpoint: ") + e.what());
    }
}

} // namespace

AdamState AdamState::zeros(const ModelConfig& config) {
    AdamState s;
    s.m = ModelParams<TrainScalar>::zeros(config).weights;
    s.v = s.m;
    return s;
}

void adam_update(Weights<Tensor<TrainScalar>>& params, const Weights<Tensor<TrainScalar>>& grads, AdamState& state,
                 const AdamHyper& h, const std::vector<std::string>& frozen) {
    auto p = tensors_of(params);
    auto g = tensors_of(grads);
    auto m = tensors_of(state.m);
    auto v = tensors_of(state.v);
    const auto names = names_of(grads);
    if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
        throw ShapeError("adam_update: parameter, gradient and moment structures differ");
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i]->shape() != g[i]->shape()) throw ShapeError("adam_update: gradient shape mismatch for " + names[i]);
        if (std::find(frozen.begin(), frozen.end(), names[i]) != frozen.end()) continue;
        for (std::size_t j = 0; j < p[i]->size(); ++j) {
            const double gj = (*g[i])[j];
            const double mj = h.beta1 * (*m[i])[j] + (1.0 - h.beta1) * gj;
            const double vj = h.beta2 * (*v[i])[j] + (1.0 - h.beta2) * gj * gj;
            (*m[i])[j] = static_cast<TrainScalar>(mj);
            (*v[i])[j] = static_cast<TrainScalar>(vj);
            const double step = h.lr * (mj / c1) / (std::sqrt(vj / c2) + h.eps);
            (*p[i])[j] = static_cast<TrainScalar>((*p[i])[j] - step);
        }
    }
}

double global_norm(const Weights<Tensor<TrainScalar>>& grads) {
    double s = 0.0;
    for (const auto* t : tensors_of(grads)) {
        for (auto x : t->values()) s += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(s);
}

double clip_gradients(Weights<Tensor<TrainScalar>>& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto* t : tensors_of(grads)) {
            for (auto& x : t->values()) x = static_cast<TrainScalar>(x * f);
        }
    }
    return norm;
}

double learning_rate(const TrainConfig& config, std::size_t step) {
    if (config.warmup == 0 || step >= config.warmup) return config.lr;
    return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup);
}

ForwardOptions forward_options(const TrainConfig& config) {
    ForwardOptions o;
    o.use_bias = config.retrieval;
    o.cross_attention = config.retrieval;
    return o;
}

void write_metrics_header(std::ostream& out) {
    out << "step,loss,beta,lr,null_source_frac,same_doc_src_frac,epoch\n";
}

void write_metrics_row(std::ostream& out, const StepMetrics& m) {
    out << m.step << ',' << format_real(m.loss) << ',' << format_real(m.beta) << ',' << format_real(m.lr) << ','
        << format_real(m.null_source_frac) << ',' << format_real(m.same_doc_src_frac) << ',' << m.epoch << '\n';
}

void write_refresh_header(std::ostream& out) {
    out << "epoch,step,mean_pair_cosine,same_doc_frac,cross_doc_frac,predecessor_frac,null_source_frac\n";
}

void write_refresh_row(std::ostream& out, const RefreshRecord& r) {
    out << r.epoch << ',' << r.step << ',' << format_real(r.mean_pair_cosine) << ',' << format_real(r.same_doc_frac)
        << ',' << format_real(r.cross_doc_frac) << ',' << format_real(r.predecessor_frac) << ','
        << format_real(r.null_source_frac) << '\n';
}

Container encode_checkpoint(const TrainState& s) {
    Container c("checkpoint");
    c.set("format_version", kFormatVersion);
    c.set("corpus_id", s.corpus_id.empty() ? "-" : s.corpus_id);
    c.set("step", std::to_string(s.step));
    c.set("epoch", std::to_string(s.epoch));
    c.set("pass", std::to_string(s.pass));
    c.set("cursor", std::to_string(s.cursor));
    c.set("adam_t", std::to_string(s.adam.t));
    c.set("table_rows", std::to_string(s.table.size()));
    for (const auto& k : config_keys()) c.set("config." + k.name, k.get(s.config));
    add_weights(c, "param.", s.params.weights);
    add_weights(c, "adam_m.", s.adam.m);
    add_weights(c, "adam_v.", s.adam.v);
    if (s.table.size() > 0) {
        c.add_tensor("table.vectors", {s.table.size(), s.table.dim}, s.table.vectors);
        c.add_tensor("table.empty_query", {s.table.empty_query.size()}, s.table.empty_query);
    }
    return c;
}

TrainState decode_checkpoint(const Container& c) {
    if (c.kind() != "checkpoint") throw LoadError("container kind is '" + c.kind() + "', expected 'checkpoint'");
    if (c.require("format_version") != kFormatVersion) {
        throw LoadError("checkpoint field 'format_version' is " + c.require("format_version") + ", expected " + kFormatVersion);
    }
    TrainState s;
    for (const auto& k : config_keys()) {
        const auto key = "config." + k.name;
        try {
            k.set(s.config, c.require(key));
        } catch (const UsageError& e) {
            throw LoadError("checkpoint field '" + key + "': " + e.what());
        }
    }
    try {
        s.config.validate();
    } catch (const UsageError& e) {
        throw LoadError(std::string("checkpoint config invalid: ") + e.what());
    }
    s.corpus_id = c.require("corpus_id");
    s.step = require_uint(c, "step");
    s.epoch = require_uint(c, "epoch");
    s.pass = require_uint(c, "pass");
    s.cursor = require_uint(c, "cursor");
    if (s.epoch != s.step / s.config.refresh_interval) {
        throw LoadError("checkpoint field 'epoch' (" + std::to_string(s.epoch) + ") disagrees with step / refresh_interval");
    }
    s.params = ModelParams<TrainScalar>::zeros(s.config.model);
    read_weights(c, "param.", s.params.weights);
    s.adam = AdamState::zeros(s.config.model);
    s.adam.t = require_uint(c, "adam_t");
    read_weights(c, "adam_m.", s.adam.m);
    read_weights(c, "adam_v.", s.adam.v);
    const auto rows = require_uint(c, "table_rows");
    if (rows > 0) {
        const auto& v = c.tensor("table.vectors");
        if (v.shape.size() != 2 || v.shape[0] != rows || v.shape[1] != s.config.model.d_model) {
            throw LoadError("checkpoint: tensor 'table.vectors' shape disagrees with 'table_rows' and d_model");
        }
        s.table.dim = s.config.model.d_model;
        s.table.epoch = s.epoch;
        s.table.vectors = v.data;
        s.table.empty_query = c.tensor("table.empty_query").data;
        if (s.table.empty_query.size() != s.table.dim) throw LoadError("checkpoint: 'table.empty_query' has the wrong size");
        s.table.refs.resize(rows);  // filled from the corpus on resume
    } else if (s.epoch > 0) {
        throw LoadError("checkpoint field 'table_rows' is 0 after a refresh");
    }
    return s;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    write_container(path, encode_checkpoint(state));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_container(path));
}

std::uint64_t plan_seed(const TrainConfig& config, std::uint64_t epoch, std::uint64_t pass) {
    return Rng::derive(config.seed, {kPlanTag, epoch, pass});
}

Trainer::Trainer(const TrainConfig& config, const Corpus& corpus) : corpus_(&corpus) {
    config.validate();
    if (corpus.size() < 2) throw UsageError("training needs a corpus of at least 2 segments, got " + std::to_string(corpus.size()));
    if (corpus.segment_len() != config.model.segment_len) {
        throw UsageError("config 'segment_len' is " + std::to_string(config.model.segment_len) + " but the corpus uses " +
                         std::to_string(corpus.segment_len()));
    }
    state_.config = config;
    state_.corpus_id = corpus.id();
    state_.params = ModelParams<TrainScalar>::init(config.model, Rng::derive(config.seed, {kInitTag}));
    state_.adam = AdamState::zeros(config.model);
    rebuild_plan();
}

Trainer::Trainer(TrainState state, const Corpus& corpus) : state_(std::move(state)), corpus_(&corpus) {
    if (state_.table.size() > 0) {
        for (std::size_t r = 0; r < corpus.size(); ++r) state_.table.refs[r] = corpus.segment(r).ref;
        index_ = Index::build(state_.table, state_.config.index_params(state_.epoch));
    }
    rebuild_plan();
    if (state_.cursor > plan_.sub_batches.size()) {
        throw LoadError("checkpoint field 'cursor' (" + std::to_string(state_.cursor) + ") exceeds the plan size " +
                        std::to_string(plan_.sub_batches.size()));
    }
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, const Corpus& corpus, const TrainConfig* expected) {
    auto state = load_checkpoint(checkpoint);
    if (state.corpus_id != corpus.id()) {
        throw LoadError("checkpoint field 'corpus_id' is " + state.corpus_id + " but the corpus id is " + corpus.id());
    }
    if (state.table.size() != 0 && state.table.size() != corpus.size()) {
        throw LoadError("checkpoint field 'table_rows' does not match the corpus size");
    }
    if (expected) {
        const auto diff = config_differences(state.config, *expected, {"steps", "checkpoint_every"});
        if (!diff.empty()) {
            throw LoadError("config field '" + diff.front() + "' differs: checkpoint has " +
                            get_config_value(state.config, diff.front()) + ", requested " +
                            get_config_value(*expected, diff.front()));
        }
        state.config.steps = expected->steps;
        state.config.checkpoint_every = expected->checkpoint_every;
        if (state.config.warmup > state.config.steps) throw UsageError("config 'warmup': must not exceed steps");
    }
    return Trainer(std::move(state), corpus);
}

void Trainer::rebuild_plan() {
    const auto seed = plan_seed(state_.config, state_.epoch, state_.pass);
    if (state_.epoch == 0) {
        plan_ = cold_start_plan(*corpus_, state_.config.m, seed);
    } else {
        KnnPlanParams p;
        p.m = state_.config.m;
        p.k = state_.config.k;
        p.seed = seed;
        p.epoch = state_.epoch;
        p.co_target_index = state_.config.index_params(state_.epoch);
        p.co_target_index.seed = Rng::derive(state_.config.seed, {kCoTargetTag, state_.epoch});
        plan_ = knn_plan(*index_, state_.table, *corpus_, p);
    }
    if (plan_out_) dump_plan(plan_, *corpus_, *plan_out_);
}

void Trainer::refresh() {
    state_.epoch = state_.step / state_.config.refresh_interval;
    state_.table = refresh_embeddings(state_.params, *corpus_, state_.epoch, state_.config.embed_chunk);
    index_ = Index::build(state_.table, state_.config.index_params(state_.epoch));
    state_.pass = 0;
    state_.cursor = 0;
    rebuild_plan();
    const auto d = validate_plan(plan_, *corpus_);
    if (!d.ok()) {
        throw Error("refresh produced an invalid plan: " + d.violations.front().kind + ": " + d.violations.front().detail);
    }
    RefreshRecord r;
    r.epoch = state_.epoch;
    r.step = state_.step;
    r.mean_pair_cosine = mean_pair_cosine(plan_, state_.table, *corpus_);
    r.same_doc_frac = d.same_doc_frac;
    r.cross_doc_frac = d.cross_doc_frac;
    r.predecessor_frac = d.predecessor_frac;
    r.null_source_frac = d.null_source_frac;
    refreshes_.push_back(r);
    if (refresh_out_) {
        write_refresh_row(*refresh_out_, r);
        refresh_out_->flush();
    }
}

SubBatch Trainer::next_sub_batch() {
    if (state_.cursor >= plan_.sub_batches.size()) {
        ++state_.pass;
        state_.cursor = 0;
        rebuild_plan();
    }
    return plan_.sub_batches[state_.cursor++];
}

StepMetrics Trainer::step() {
    const TrainState before = dump_path_ ? state_ : TrainState{};
    BatchPlan view;
    view.m = state_.config.m;
    for (std::size_t i = 0; i < state_.config.batch; ++i) view.sub_batches.push_back(next_sub_batch());
    const auto diag = validate_plan(view, *corpus_);

    const auto options = forward_options(state_.config);
    double loss_value = 0.0;
    Weights<Tensor<TrainScalar>> grads;
    try {
        nn::Graph<TrainScalar> g;
        auto model = bind(g, state_.params, true, state_.config.retrieval);
        std::vector<nn::Var<TrainScalar>> sums;
        std::size_t tokens = 0;
        for (const auto& sb : view.sub_batches) {
            auto out = forward_subbatch(model, make_input(*corpus_, sb), options);
            sums.push_back(out.loss_sum);
            tokens += out.tokens;
        }
        auto loss = nn::scale(nn::sum(nn::concat_rows<TrainScalar>(sums)), 1.0 / static_cast<double>(tokens));
        loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) throw NumericError("loss is " + format_real(loss_value));
        g.backward(loss);
        grads = gradients(g, model);
        const double n = global_norm(grads);
        if (!std::isfinite(n)) throw NumericError("gradient norm is " + format_real(n));
    } catch (const NumericError& e) {
        std::string where;
        if (dump_path_) {
            save_checkpoint(*dump_path_, before);
            where = "; state dumped to " + dump_path_->string();
        }
        throw NumericError("step " + std::to_string(state_.step + 1) + ": " + e.what() + where);
    }

    StepMetrics m;
    m.grad_norm = clip_gradients(grads, state_.config.clip_norm);
    ++state_.step;
    m.step = state_.step;
    m.loss = loss_value;
    m.lr = learning_rate(state_.config, state_.step);
    AdamHyper h{m.lr, state_.config.adam_beta1, state_.config.adam_beta2, state_.config.adam_eps};
    adam_update(state_.params.weights, grads, state_.adam, h,
                state_.config.retrieval ? std::vector<std::string>{} : std::vector<std::string>{"beta"});
    if (state_.step % state_.config.refresh_interval == 0) refresh();
    m.beta = state_.params.beta();
    m.null_source_frac = diag.null_source_frac;
    m.same_doc_src_frac = diag.same_doc_frac;
    m.epoch = state_.epoch;
    metrics_.push_back(m);
    if (metrics_out_) {
        write_metrics_row(*metrics_out_, m);
        metrics_out_->flush();
    }
    return m;
}

void Trainer::run(const std::optional<std::filesystem::path>& checkpoint_dir) {
    while (!done()) {
        step();
        if (checkpoint_dir && state_.config.checkpoint_every && state_.step % state_.config.checkpoint_every == 0) {
            char name[40];
            std::snprintf(name, sizeof(name), "step-%06zu.ckpt", state_.step);
            save(*checkpoint_dir / name);
        }
    }
    if (checkpoint_dir) save(*checkpoint_dir / "final.ckpt");
}

} // namespace retrolm
