// SPDX-License-Identifier: Apache-2.0
//
// Training configuration and its flat `key = value` text form. Every field has
// a key; file values are applied first, then explicit overrides.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "retrolm/model.hpp"
#include "retrolm/retrieval.hpp"

namespace retrolm {

struct TrainConfig {
    ModelConfig model;
    std::size_t steps = 1000;
    std::size_t refresh_interval = 200;
    std::size_t batch = 4;  // sub-batches per step
    std::size_t m = 4;
    std::size_t k = 8;
    double lr = 3e-4;
    std::size_t warmup = 100;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    double clip_norm = 1.0;  // 0 disables clipping
    std::uint64_t seed = 0;
    bool retrieval = true;   // false trains the no-retrieval baseline
    IndexMode index_mode = IndexMode::ivf;
    std::size_t n_clusters = 0;
    std::size_t n_probe = 8;
    std::size_t kmeans_iters = 20;
    std::size_t embed_chunk = 64;
    std::size_t checkpoint_every = 0;  // 0 = final checkpoint only

    /// Throws UsageError naming the offending key.
    void validate() const;
    IndexParams index_params(std::uint64_t epoch) const;
};

struct ConfigKey {
    std::string name;
    std::string help;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, std::string_view)> set;
};

/// All keys in canonical order.
const std::vector<ConfigKey>& config_keys();

void set_config_value(TrainConfig& config, std::string_view key, std::string_view value);
std::string get_config_value(const TrainConfig& config, std::string_view key);

/// Parses `key = value` lines; '#' starts a comment. Errors carry "source:line:".
void apply_config_text(TrainConfig& config, std::string_view text, std::string_view source = "<config>");
void apply_config_file(TrainConfig& config, const std::filesystem::path& path);

/// Canonical text form; parsing it back yields an equal config.
std::string config_text(const TrainConfig& config);

/// Keys whose values differ; `ignore` names keys that may legitimately change.
std::vector<std::string> config_differences(const TrainConfig& a, const TrainConfig& b,
                                            const std::vector<std::string>& ignore = {});

} // namespace retrolm
