// SPDX-License-Identifier: Apache-2.0
#include "retrolm/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "retrolm/container.hpp"
#include "retrolm/error.hpp"
#include "retrolm/rng.hpp"

namespace retrolm {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

bool parse_bool(std::string_view v, std::string_view key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("field '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

template <typename M>
ConfigKey size_key(std::string name, std::string help, M member) {
    return {name, std::move(help), [member](const TrainConfig& c) { return std::to_string(c.*member); },
            [member, name](TrainConfig& c, std::string_view v) { c.*member = parse_uint(v, name); }};
}

template <typename M>
ConfigKey real_key(std::string name, std::string help, M member) {
    return {name, std::move(help), [member](const TrainConfig& c) { return format_real(c.*member); },
            [member, name](TrainConfig& c, std::string_view v) { c.*member = parse_real(v, name); }};
}

template <typename M>
ConfigKey model_size_key(std::string name, std::string help, M member) {
    return {name, std::move(help), [member](const TrainConfig& c) { return std::to_string(c.model.*member); },
            [member, name](TrainConfig& c, std::string_view v) { c.model.*member = parse_uint(v, name); }};
}

template <typename M>
ConfigKey model_real_key(std::string name, std::string help, M member) {
    return {name, std::move(help), [member](const TrainConfig& c) { return format_real(c.model.*member); },
            [member, name](TrainConfig& c, std::string_view v) { c.model.*member = parse_real(v, name); }};
}

std::vector<ConfigKey> make_keys() {
    std::vector<ConfigKey> k;
    k.push_back(model_size_key("d_model", "model width", &ModelConfig::d_model));
    k.push_back(model_size_key("d_ff", "feed-forward hidden width", &ModelConfig::d_ff));
    k.push_back(model_size_key("n_heads", "attention heads", &ModelConfig::n_heads));
    k.push_back(model_size_key("encoder_layers", "encoder layers (even; first half embeds)", &ModelConfig::encoder_layers));
    k.push_back(model_size_key("decoder_layers", "decoder layers", &ModelConfig::decoder_layers));
    k.push_back(model_size_key("segment_len", "tokens per segment (N)", &ModelConfig::segment_len));
    k.push_back(model_real_key("beta_init", "initial attention-bias scale", &ModelConfig::beta_init));
    k.push_back(model_real_key("output_init_std", "init std of the output projection", &ModelConfig::output_init_std));
    k.push_back(size_key("steps", "optimizer steps", &TrainConfig::steps));
    k.push_back(size_key("refresh_interval", "steps between embedding/index refreshes (I)", &TrainConfig::refresh_interval));
    k.push_back(size_key("batch", "sub-batches per step (b)", &TrainConfig::batch));
    k.push_back(size_key("m", "targets (and sources) per sub-batch", &TrainConfig::m));
    k.push_back(size_key("k", "neighbors retrieved per target", &TrainConfig::k));
    k.push_back(real_key("lr", "base learning rate", &TrainConfig::lr));
    k.push_back(size_key("warmup", "linear warmup steps", &TrainConfig::warmup));
    k.push_back(real_key("adam_beta1", "first-moment decay", &TrainConfig::adam_beta1));
    k.push_back(real_key("adam_beta2", "second-moment decay", &TrainConfig::adam_beta2));
    k.push_back(real_key("adam_eps", "optimizer epsilon", &TrainConfig::adam_eps));
    k.push_back(real_key("clip_norm", "global gradient-norm clip (0 = off)", &TrainConfig::clip_norm));
    k.push_back(size_key("seed", "master seed", &TrainConfig::seed));
    k.push_back({"retrieval", "false trains the no-retrieval baseline",
                 [](const TrainConfig& c) { return std::string(c.retrieval ? "true" : "false"); },
                 [](TrainConfig& c, std::string_view v) { c.retrieval = parse_bool(v, "retrieval"); }});
    k.push_back({"index_mode", "exact or ivf", [](const TrainConfig& c) { return to_string(c.index_mode); },
                 [](TrainConfig& c, std::string_view v) { c.index_mode = parse_index_mode(v); }});
    k.push_back(size_key("n_clusters", "IVF lists (0 = ceil(sqrt(n)))", &TrainConfig::n_clusters));
    k.push_back(size_key("n_probe", "IVF lists scanned per query", &TrainConfig::n_probe));
    k.push_back(size_key("kmeans_iters", "k-means iterations", &TrainConfig::kmeans_iters));
    k.push_back(size_key("embed_chunk", "segments per embedding pass", &TrainConfig::embed_chunk));
    k.push_back(size_key("checkpoint_every", "steps between checkpoints (0 = final only)", &TrainConfig::checkpoint_every));
    return k;
}

const ConfigKey& find_key(std::string_view key) {
    for (const auto& k : config_keys()) {
        if (k.name == key) return k;
    }
    throw UsageError("unknown config key '" + std::string(key) + "'");
}

} // namespace

void TrainConfig::validate() const {
    model.validate();
    auto fail = [](const std::string& key, const std::string& msg) { throw UsageError("config '" + key + "': " + msg); };
    if (steps == 0) fail("steps", "must be positive");
    if (refresh_interval == 0) fail("refresh_interval", "must be at least 1");
    if (warmup > steps) fail("warmup", "must not exceed steps");
    if (batch == 0) fail("batch", "must be positive");
    if (m == 0) fail("m", "must be positive");
    if (k == 0) fail("k", "must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr", "must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "must be in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "must be in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps", "must be positive");
    if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm)) fail("clip_norm", "must be non-negative");
    if (n_probe == 0) fail("n_probe", "must be positive");
    if (embed_chunk == 0) fail("embed_chunk", "must be positive");
}

IndexParams TrainConfig::index_params(std::uint64_t epoch) const {
    IndexParams p;
    p.mode = index_mode;
    p.n_clusters = n_clusters;
    p.n_probe = n_probe;
    p.kmeans_iters = kmeans_iters;
    p.seed = Rng::derive(seed, {0x1dc5ULL, epoch});
    return p;
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = make_keys();
    return keys;
}

void set_config_value(TrainConfig& config, std::string_view key, std::string_view value) {
    find_key(key).set(config, trim(value));
}

std::string get_config_value(const TrainConfig& config, std::string_view key) {
    return find_key(key).get(config);
}

void apply_config_text(TrainConfig& config, std::string_view text, std::string_view source) {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto prefix = std::string(source) + ":" + std::to_string(line_no) + ": ";
        auto eq = line.find('=');
        if (eq == std::string_view::npos) throw UsageError(prefix + "expected 'key = value'");
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        try {
            set_config_value(config, key, value);
        } catch (const UsageError& e) {
            throw UsageError(prefix + e.what());
        }
    }
}

void apply_config_file(TrainConfig& config, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    apply_config_text(config, buf.str(), path.string());
}

std::string config_text(const TrainConfig& config) {
    std::string out;
    for (const auto& k : config_keys()) out += k.name + " = " + k.get(config) + "\n";
    return out;
}

std::vector<std::string> config_differences(const TrainConfig& a, const TrainConfig& b,
                                            const std::vector<std::string>& ignore) {
    std::vector<std::string> diff;
    for (const auto& k : config_keys()) {
        if (std::find(ignore.begin(), ignore.end(), k.name) != ignore.end()) continue;
        if (k.get(a) != k.get(b)) diff.push_back(k.name);
    }
    return diff;
}

} // namespace retrolm
