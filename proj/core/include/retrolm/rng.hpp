// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <iterator>
#include <utility>

namespace retrolm {

/// Counter-based generator: output i is a pure function of (key, i), so the whole
/// state is two integers and checkpoints restore it exactly.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

    /// Rebuilds a generator from a saved (key, counter) pair.
    static Rng from_state(std::uint64_t key, std::uint64_t counter);

    /// Mixes a seed with tags into an independent seed (one per purpose/epoch/pass).
    static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    /// Standard normal via Box-Muller; consumes two draws, caches nothing.
    double normal();
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(std::distance(first, last));
        for (std::uint64_t i = n; i > 1; --i) {
            auto j = below(i);
            using std::swap;
            swap(first[static_cast<std::ptrdiff_t>(i - 1)], first[static_cast<std::ptrdiff_t>(j)]);
        }
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) noexcept;

} // namespace retrolm
