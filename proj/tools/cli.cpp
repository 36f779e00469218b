// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "retrolm/batching.hpp"
#include "retrolm/config.hpp"
#include "retrolm/container.hpp"
#include "retrolm/corpus.hpp"
#include "retrolm/error.hpp"
#include "retrolm/eval.hpp"
#include "retrolm/retrieval.hpp"
#include "retrolm/training.hpp"

namespace fs = std::filesystem;

namespace retrolm::cli {

namespace {

std::string fixed3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

Corpus load_any(const fs::path& path, const CorpusConfig& cfg) {
    if (fs::is_directory(path)) return load_corpus_dir(path, cfg);
    return load_corpus(path, cfg);
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
    std::ofstream f(path, std::ios::out | mode);
    if (!f) throw Error("cannot open '" + path.string() + "' for writing");
    return f;
}

/// Keeps the header and rows whose first column is <= `step`.
void truncate_log(const fs::path& path, std::size_t step) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::vector<std::string> keep;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            keep.push_back(line);
            header = false;
            continue;
        }
        const auto comma = line.find(',');
        std::size_t first = 0;
        try {
            first = parse_uint(line.substr(0, comma), "log row");
        } catch (const UsageError&) {
            continue;
        }
        if (first <= step) keep.push_back(line);
    }
    in.close();
    auto out = open_out(path);
    for (const auto& l : keep) out << l << '\n';
}

fs::path under_out(const fs::path& out, const std::string& rel, const char* flag) {
    const fs::path p(rel);
    if (p.is_absolute()) throw UsageError(std::string(flag) + " must be a path relative to --out, got '" + rel + "'");
    for (const auto& part : p) {
        if (part == "..") throw UsageError(std::string(flag) + " must stay under --out, got '" + rel + "'");
    }
    return out / p;
}

void echo_options(std::ostream& out, const CLI::App& sub) {
    out << "# effective config (" << sub.get_name() << ")\n";
    for (const auto* opt : sub.get_options()) {
        if (opt->get_lnames().empty()) continue;
        const auto& name = opt->get_lnames().front();
        if (name == "help" || name == "help-all") continue;
        std::string value;
        if (opt->count() > 0) {
            for (const auto& r : opt->results()) value += (value.empty() ? "" : " ") + r;
        } else {
            value = opt->get_default_str();
        }
        if (opt->get_type_size() == 0) value = opt->count() ? "true" : "false";
        out << opt->get_lnames().front() << " = " << value << '\n';
    }
}

struct Args {
    std::string out = "retrolm-out";
    // ingest
    std::string input;
    std::size_t segment_len = 32;
    std::size_t min_segment_len = 0;
    // train / eval / plan-dump
    std::string corpus, config, resume, checkpoint, baseline, emit_plot_data;
    bool plan_dump = false;
    std::map<std::string, std::string> overrides;
    std::size_t early_l = 0;
    std::uint64_t eval_seed = 0;
    // knn-bench
    std::string table;
    std::size_t n = 10000, dim = 32, clusters = 32, queries = 100, k = 10, n_c = 100, n_probe = 8;
    double spread = 0.2;
    std::uint64_t seed = 0;
    // calculators
    double c = 1.0, flops_l = 1.0, flops_d = 1.0;
    std::string kind = "full";
    std::vector<std::size_t> ks;
};

int cmd_ingest(const Args& a, std::ostream& out) {
    CorpusConfig cfg{a.segment_len, a.min_segment_len};
    const auto corpus = load_any(a.input, cfg);
    fs::create_directories(a.out);
    auto f = open_out(fs::path(a.out) / "manifest.txt");
    write_manifest(corpus, f);
    out << "documents = " << corpus.doc_count() << '\n'
        << "samples = " << corpus.samples().size() << '\n'
        << "segments = " << corpus.size() << '\n'
        << "skipped_documents = " << corpus.skipped_documents() << '\n'
        << "dropped_tail_tokens = " << corpus.dropped_tail_tokens() << '\n'
        << "corpus_id = " << corpus.id() << '\n'
        << "manifest = " << (fs::path(a.out) / "manifest.txt").string() << '\n';
    return kExitOk;
}

TrainConfig resolve_config(const Args& a) {
    TrainConfig cfg;
    if (!a.config.empty()) apply_config_file(cfg, a.config);
    for (const auto& k : config_keys()) {
        if (auto it = a.overrides.find(k.name); it != a.overrides.end()) set_config_value(cfg, k.name, it->second);
    }
    cfg.validate();
    return cfg;
}

int cmd_train(const Args& a, std::ostream& out) {
    const auto cfg = resolve_config(a);
    out << "# effective config (train)\n"
        << "corpus = " << a.corpus << '\n'
        << "out = " << a.out << '\n'
        << "resume = " << a.resume << '\n'
        << config_text(cfg);
    const fs::path dir(a.out);
    fs::create_directories(dir / "checkpoints");
    {
        auto f = open_out(dir / "config.txt");
        f << config_text(cfg);
    }
    CorpusConfig cc{cfg.model.segment_len, 0};
    const auto corpus = load_any(a.corpus, cc);
    std::optional<Trainer> trainer;
    std::ofstream metrics, refresh, plans;
    if (a.resume.empty()) {
        trainer.emplace(cfg, corpus);
        metrics = open_out(dir / "metrics.csv");
        write_metrics_header(metrics);
        refresh = open_out(dir / "refresh.csv");
        write_refresh_header(refresh);
    } else {
        trainer.emplace(Trainer::resume(a.resume, corpus, &cfg));
        const auto step = trainer->state().step;
        for (const char* name : {"metrics.csv", "refresh.csv"}) truncate_log(dir / name, step);
        const bool fresh_metrics = !fs::exists(dir / "metrics.csv");
        const bool fresh_refresh = !fs::exists(dir / "refresh.csv");
        metrics = open_out(dir / "metrics.csv", std::ios::app);
        refresh = open_out(dir / "refresh.csv", std::ios::app);
        if (fresh_metrics) write_metrics_header(metrics);
        if (fresh_refresh) write_refresh_header(refresh);
        out << "resumed at step " << step << " (epoch " << trainer->state().epoch << ")\n";
    }
    trainer->set_metrics_stream(&metrics);
    trainer->set_refresh_stream(&refresh);
    trainer->set_dump_path(dir / "nan_dump.ckpt");
    if (a.plan_dump) {
        plans = open_out(dir / "plans.txt");
        dump_plan(trainer->plan(), corpus, plans);
        trainer->set_plan_stream(&plans);
    }
    trainer->run(dir / "checkpoints");
    const auto& s = trainer->state();
    out << "corpus_id = " << corpus.id() << '\n'
        << "segments = " << corpus.size() << '\n'
        << "steps = " << s.step << '\n'
        << "epoch = " << s.epoch << '\n'
        << "final_loss = " << (trainer->metrics().empty() ? std::string("-") : format_real(trainer->metrics().back().loss)) << '\n'
        << "beta = " << format_real(s.params.beta()) << '\n'
        << "checkpoint = " << (dir / "checkpoints" / "final.ckpt").string() << '\n';
    return kExitOk;
}

int cmd_eval(const Args& a, std::ostream& out) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    CorpusConfig cc{ckpt.config.model.segment_len, 0};
    const auto corpus = load_any(a.corpus, cc);
    const std::size_t n = ckpt.config.model.segment_len;
    const std::size_t L = a.early_l ? a.early_l : 2 * n;
    const fs::path dir(a.out);
    std::optional<fs::path> plot_dir;
    if (!a.emit_plot_data.empty()) plot_dir = under_out(dir, a.emit_plot_data, "--emit-plot-data");
    fs::create_directories(dir);

    const auto report = per_position_loss(ckpt, corpus, a.eval_seed);
    const auto diag = retrieval_diagnostics(ckpt, corpus, a.eval_seed);
    std::ostringstream summary;
    write_summary(summary, report);
    summary << "retrieval = " << (ckpt.config.retrieval ? "true" : "false") << '\n'
            << "early_L = " << L << '\n'
            << "early_mean = " << format_real(mean_below(report, L)) << '\n';
    if (report.per_position.size() >= 2) {
        summary << "spearman_0_4N = " << format_real(position_loss_spearman(report, 4 * n)) << '\n';
    }
    summary << "same_doc_frac = " << format_real(diag.same_doc_frac) << '\n'
            << "cross_doc_frac = " << format_real(diag.cross_doc_frac) << '\n'
            << "predecessor_frac = " << format_real(diag.predecessor_frac) << '\n'
            << "null_source_frac = " << format_real(diag.null_source_frac) << '\n'
            << "mean_pair_cosine = " << format_real(diag.mean_pair_cosine) << '\n'
            << "identical_text_pairs = " << diag.identical_text_pairs << '\n';
    std::optional<EarlyTokenDelta> delta;
    std::optional<LossReport> base;
    if (!a.baseline.empty()) {
        const auto bckpt = load_checkpoint(a.baseline);
        base = per_position_loss(bckpt, corpus, a.eval_seed);
        delta = early_token_delta(report, *base, L);
        summary << "baseline_overall_mean = " << format_real(base->overall_mean) << '\n'
                << "overall_delta = " << format_real(report.overall_mean - base->overall_mean) << '\n'
                << "early_token_delta = " << format_real(delta->delta) << '\n';
    }
    out << summary.str();
    {
        auto f = open_out(dir / "summary.txt");
        f << summary.str();
        auto p = open_out(dir / "per_position.csv");
        write_loss_report(p, report);
    }
    if (plot_dir) {
        fs::create_directories(*plot_dir);
        auto p = open_out(*plot_dir / "per_position_loss.csv");
        write_loss_report(p, report);
        if (base) {
            auto b = open_out(*plot_dir / "baseline_per_position_loss.csv");
            write_loss_report(b, *base);
            auto d = open_out(*plot_dir / "early_token_delta.csv");
            d << "position,delta\n";
            for (std::size_t i = 0; i < delta->per_position.size(); ++i) d << i << ',' << format_real(delta->per_position[i]) << '\n';
        }
    }
    return kExitOk;
}

int cmd_knn_bench(const Args& a, std::ostream& out) {
    EmbeddingTable table, queries;
    if (!a.table.empty()) {
        table = load_table(a.table);
        queries = table;
    } else {
        auto all = clustered_table(a.n + a.queries, a.dim, a.clusters, a.spread, a.seed);
        table.dim = queries.dim = a.dim;
        table.vectors.assign(all.vectors.begin(), all.vectors.begin() + static_cast<std::ptrdiff_t>(a.n * a.dim));
        table.refs.assign(all.refs.begin(), all.refs.begin() + static_cast<std::ptrdiff_t>(a.n));
        queries.vectors.assign(all.vectors.begin() + static_cast<std::ptrdiff_t>(a.n * a.dim), all.vectors.end());
        queries.refs.assign(all.refs.begin() + static_cast<std::ptrdiff_t>(a.n), all.refs.end());
    }
    const std::size_t nq = std::min(a.queries, queries.size());
    IndexParams ep;
    ep.mode = IndexMode::exact;
    IndexParams ip;
    ip.mode = IndexMode::ivf;
    ip.n_clusters = a.n_c;
    ip.n_probe = a.n_probe;
    ip.seed = a.seed;
    using clock = std::chrono::steady_clock;
    const auto exact = Index::build(table, ep);
    const auto t0 = clock::now();
    const auto ivf = Index::build(table, ip);
    const auto t1 = clock::now();
    double rec = 0.0, exact_s = 0.0, ivf_s = 0.0;
    for (std::size_t q = 0; q < nq; ++q) {
        const auto qa = clock::now();
        const auto truth = exact.knn(queries.row(q), a.k);
        const auto qb = clock::now();
        const auto found = ivf.knn(queries.row(q), a.k);
        const auto qc = clock::now();
        exact_s += std::chrono::duration<double>(qb - qa).count();
        ivf_s += std::chrono::duration<double>(qc - qb).count();
        rec += recall(found, truth);
    }
    std::ostringstream r;
    r << "vectors = " << table.size() << '\n'
      << "dim = " << table.dim << '\n'
      << "queries = " << nq << '\n'
      << "k = " << a.k << '\n'
      << "n_c = " << ivf.lists().size() << '\n'
      << "n_probe = " << ivf.n_probe() << '\n'
      << "recall_at_k = " << format_real(nq ? rec / double(nq) : 1.0) << '\n'
      << "ivf_build_seconds = " << format_real(std::chrono::duration<double>(t1 - t0).count()) << '\n'
      << "exact_qps = " << format_real(exact_s > 0 ? double(nq) / exact_s : 0.0) << '\n'
      << "ivf_qps = " << format_real(ivf_s > 0 ? double(nq) / ivf_s : 0.0) << '\n';
    out << r.str();
    fs::create_directories(a.out);
    auto f = open_out(fs::path(a.out) / "knn_bench.txt");
    f << r.str();
    return kExitOk;
}

int cmd_allocate(const Args& a, std::ostream& out) {
    const auto r = compute_allocation(a.c);
    out << "compute_ratio = " << format_real(r.compute_ratio) << '\n'
        << "exponents = " << format_real(kModelSizeExponent) << ' ' << format_real(kBatchSizeExponent) << ' '
        << format_real(kStepsExponent) << '\n'
        << "model_size_mult = " << fixed3(r.model_mult) << '\n'
        << "batch_size_mult = " << fixed3(r.batch_mult) << '\n'
        << "steps_mult = " << fixed3(r.steps_mult) << '\n';
    return kExitOk;
}

int cmd_flops(const Args& a, std::ostream& out) {
    FlopsModel fm{a.flops_l, a.flops_d, parse_attention_kind(a.kind)};
    out << "attention_flop_fraction = " << format_real(attention_flop_fraction(fm)) << '\n';
    return kExitOk;
}

int cmd_topk(const Args& a, std::ostream& out) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    CorpusConfig cc{ckpt.config.model.segment_len, 0};
    const auto corpus = load_any(a.corpus, cc);
    auto ks = a.ks;
    const std::size_t f = ckpt.config.model.d_ff;
    if (ks.empty()) ks = {f, std::max<std::size_t>(f / 2, 1), std::max<std::size_t>(f / 10, 1), 1};
    std::ostringstream r;
    r << "k,masked_loss,unmasked_loss,delta\n";
    for (auto k : ks) {
        const auto t = topk_ffn_eval(ckpt, corpus, k, a.eval_seed);
        r << t.k << ',' << format_real(t.masked_loss) << ',' << format_real(t.unmasked_loss) << ',' << format_real(t.delta) << '\n';
    }
    out << r.str();
    fs::create_directories(a.out);
    auto file = open_out(fs::path(a.out) / "topk_ffn.csv");
    file << r.str();
    return kExitOk;
}

int cmd_plan_dump(const Args& a, std::ostream& out) {
    std::optional<TrainState> ckpt;
    if (!a.checkpoint.empty()) ckpt = load_checkpoint(a.checkpoint);
    const std::size_t n = ckpt ? ckpt->config.model.segment_len : a.segment_len;
    const auto corpus = load_any(a.corpus, CorpusConfig{n, 0});
    BatchPlan plan;
    if (ckpt) {
        plan = make_eval_plan(*ckpt, corpus, a.eval_seed).plan;
    } else {
        plan = cold_start_plan(corpus, a.k ? a.k : 4, a.eval_seed);
    }
    const auto d = validate_plan(plan, corpus);
    fs::create_directories(a.out);
    auto f = open_out(fs::path(a.out) / "plan.txt");
    dump_plan(plan, corpus, f);
    out << "sub_batches = " << d.sub_batches << '\n'
        << "targets = " << d.targets << '\n'
        << "violations = " << d.violations.size() << '\n'
        << "same_doc_frac = " << format_real(d.same_doc_frac) << '\n'
        << "null_source_frac = " << format_real(d.null_source_frac) << '\n'
        << "plan = " << (fs::path(a.out) / "plan.txt").string() << '\n';
    for (const auto& v : d.violations) out << "violation sub_batch=" << v.sub_batch << ' ' << v.kind << ": " << v.detail << '\n';
    return d.ok() ? kExitOk : kExitRuntime;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    Args a;
    CLI::App app{"retrolm: retrieval-coupled segment language model trainer and evaluation harness", "retrolm"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "show help for every subcommand");

    auto add_out = [&](CLI::App* s) { s->add_option("--out", a.out, "output directory")->capture_default_str(); };

    auto* ingest = app.add_subcommand("ingest", "tokenize and segment documents, write a manifest");
    ingest->add_option("--input", a.input, "newline-delimited file or a directory of documents")->required()->check(CLI::ExistingPath);
    ingest->add_option("--segment_len", a.segment_len, "tokens per segment")->capture_default_str();
    ingest->add_option("--min_segment_len", a.min_segment_len, "minimum document length in tokens (0 = segment_len)")->capture_default_str();
    add_out(ingest);

    auto* train = app.add_subcommand("train", "train a model (or the no-retrieval baseline)");
    train->add_option("--corpus", a.corpus, "training corpus file or directory")->required()->check(CLI::ExistingPath);
    train->add_option("--config", a.config, "key = value config file; flags override it");
    train->add_option("--resume", a.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    train->add_flag("--plan-dump", a.plan_dump, "write every batch plan to <out>/plans.txt");
    add_out(train);
    const TrainConfig defaults;
    for (const auto& k : config_keys()) {
        train->add_option_function<std::string>("--" + k.name, [&a, name = k.name](const std::string& v) { a.overrides[name] = v; },
                                                k.help + " (default " + k.get(defaults) + ")");
    }

    auto* eval = app.add_subcommand("eval", "per-position loss, diagnostics and baseline comparison");
    eval->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--corpus", a.corpus, "eval corpus (must differ from the training corpus)")->required()->check(CLI::ExistingPath);
    eval->add_option("--baseline", a.baseline, "baseline checkpoint for the early-token comparison")->check(CLI::ExistingFile);
    eval->add_option("--early_l", a.early_l, "early-token threshold L (0 = 2N)")->capture_default_str();
    eval->add_option("--seed", a.eval_seed, "eval plan seed")->capture_default_str();
    eval->add_option("--emit-plot-data", a.emit_plot_data, "directory under --out for per-figure CSVs");
    add_out(eval);

    auto* knn = app.add_subcommand("knn-bench", "IVF recall and throughput against exact search");
    knn->add_option("--table", a.table, "embedding table file (default: synthetic clustered vectors)")->check(CLI::ExistingFile);
    knn->add_option("--n", a.n, "synthetic vectors")->capture_default_str();
    knn->add_option("--dim", a.dim, "synthetic dimension")->capture_default_str();
    knn->add_option("--clusters", a.clusters, "synthetic cluster count")->capture_default_str();
    knn->add_option("--spread", a.spread, "synthetic per-coordinate noise")->capture_default_str();
    knn->add_option("--queries", a.queries, "queries")->capture_default_str();
    knn->add_option("--k", a.k, "neighbors per query")->capture_default_str();
    knn->add_option("--n_c", a.n_c, "IVF lists")->capture_default_str();
    knn->add_option("--n_probe", a.n_probe, "IVF lists probed")->capture_default_str();
    knn->add_option("--seed", a.seed, "seed")->capture_default_str();
    add_out(knn);

    auto* alloc = app.add_subcommand("allocate", "split a compute increase across model size, batch size and steps");
    alloc->add_option("--c", a.c, "compute ratio C > 0")->required();

    auto* flops = app.add_subcommand("flops", "fraction of FLOPs spent in attention");
    flops->add_option("--l", a.flops_l, "sequence length L")->required();
    flops->add_option("--d", a.flops_d, "model width d_model")->required();
    flops->add_option("--kind", a.kind, "full | three_halves | linear")->capture_default_str();

    auto* topk = app.add_subcommand("topk-ffn", "eval-time top-k masking of FFN hidden units");
    topk->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    topk->add_option("--corpus", a.corpus, "eval corpus")->required()->check(CLI::ExistingPath);
    topk->add_option("--k", a.ks, "k values (default d_ff, d_ff/2, d_ff/10, 1)");
    topk->add_option("--seed", a.eval_seed, "eval plan seed")->capture_default_str();
    add_out(topk);

    auto* plan = app.add_subcommand("plan-dump", "print a batch plan with its masks");
    plan->add_option("--corpus", a.corpus, "corpus file or directory")->required()->check(CLI::ExistingPath);
    plan->add_option("--checkpoint", a.checkpoint, "build a kNN plan from this checkpoint (default: cold start)")->check(CLI::ExistingFile);
    plan->add_option("--segment_len", a.segment_len, "tokens per segment without a checkpoint")->capture_default_str();
    plan->add_option("--m", a.k, "sub-batch size for the cold-start plan")->default_val(4);
    plan->add_option("--seed", a.eval_seed, "plan seed")->capture_default_str();
    add_out(plan);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        if (sub != train) echo_options(out, *sub);
        if (sub == ingest) return cmd_ingest(a, out);
        if (sub == train) return cmd_train(a, out);
        if (sub == eval) return cmd_eval(a, out);
        if (sub == knn) return cmd_knn_bench(a, out);
        if (sub == alloc) return cmd_allocate(a, out);
        if (sub == flops) return cmd_flops(a, out);
        if (sub == topk) return cmd_topk(a, out);
        if (sub == plan) return cmd_plan_dump(a, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

} // namespace retrolm::cli
