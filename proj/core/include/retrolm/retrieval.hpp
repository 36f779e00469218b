// SPDX-License-Identifier: Apache-2.0
//
// Segment embedding table and cosine kNN over it (exact scan or IVF with a
// spherical k-means coarse quantizer). Vectors are unit-norm, so cosine is a
// plain inner product; scores accumulate in double and ties go to the lower row.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "retrolm/corpus.hpp"
#include "retrolm/model.hpp"

namespace retrolm {

struct EmbeddingTable {
    std::size_t dim = 0;
    std::vector<float> vectors;  // rows x dim, row-major; row i describes corpus row i
    std::vector<SegmentRef> refs;
    std::uint64_t epoch = 0;
    std::vector<float> empty_query;  // e([BOS]): context query for a sample's first segment

    std::size_t size() const noexcept { return refs.size(); }
    std::span<const float> row(std::size_t i) const { return std::span<const float>(vectors).subspan(i * dim, dim); }
    /// Throws UsageError unless rows are unit-norm (tol) and refs unique.
    void validate(double tol = 1e-5) const;
};

/// Re-embeds every corpus segment with the given params and stamps `epoch`.
template <typename T>
EmbeddingTable refresh_embeddings(const ModelParams<T>& params, const Corpus& corpus, std::uint64_t epoch,
                                  std::size_t chunk = 64);

/// The query vector used to retrieve for the segment at `row`: the embedding of its
/// predecessor, or the BOS-only embedding for a sample's first segment.
std::span<const float> context_query(const EmbeddingTable& table, const Corpus& corpus, std::size_t row);

void save_table(const std::filesystem::path& path, const EmbeddingTable& table, const std::string& corpus_id);
EmbeddingTable load_table(const std::filesystem::path& path, std::string* corpus_id = nullptr);

struct KMeansResult {
    std::vector<float> centroids;  // n_c x dim, unit-norm
    std::vector<std::size_t> assignment;
    std::vector<double> objective;  // sum of (1 - cos) after each iteration
    std::size_t iterations = 0;
};

/// Spherical Lloyd iterations from n_c distinct seeded rows; empty clusters are
/// re-seeded from the point farthest from its centroid. Stops early on a fixed point.
KMeansResult kmeans(std::span<const float> vectors, std::size_t dim, std::size_t n_c, std::size_t iters,
                    std::uint64_t seed);

enum class IndexMode { exact, ivf };

std::string to_string(IndexMode mode);
IndexMode parse_index_mode(std::string_view text);

struct IndexParams {
    IndexMode mode = IndexMode::exact;
    std::size_t n_clusters = 0;  // 0 = ceil(sqrt(n))
    std::size_t n_probe = 8;
    std::size_t kmeans_iters = 20;
    std::uint64_t seed = 0;
};

struct Neighbor {
    std::size_t row = 0;
    SegmentRef ref;
    double score = 0.0;
};

struct NeighborSet {
    std::vector<Neighbor> neighbors;  // score descending, row ascending on ties
    bool short_list = false;           // fewer than k eligible rows were found
};

/// Returns true for rows that must not be returned.
using ExcludeFn = std::function<bool(std::size_t row)>;

class Index {
public:
    /// Throws UsageError on an empty table or n_c > n.
    static Index build(const EmbeddingTable& table, const IndexParams& params);

    IndexMode mode() const noexcept { return mode_; }
    std::uint64_t epoch() const noexcept { return epoch_; }
    std::size_t size() const noexcept { return refs_.size(); }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t n_probe() const noexcept { return n_probe_; }
    std::span<const float> centroids() const noexcept { return centroids_; }
    const std::vector<std::vector<std::size_t>>& lists() const noexcept { return lists_; }
    const KMeansResult& clustering() const noexcept { return clustering_; }

    /// Top-k rows by cosine among rows not excluded. IVF scans the n_probe nearest
    /// lists, then further lists in centroid order only if fewer than k rows passed.
    NeighborSet knn(std::span<const float> query, std::size_t k, const ExcludeFn& exclude = {}) const;

private:
    IndexMode mode_ = IndexMode::exact;
    std::uint64_t epoch_ = 0;
    std::size_t dim_ = 0;
    std::size_t n_probe_ = 0;
    std::vector<float> vectors_;
    std::vector<SegmentRef> refs_;
    std::vector<float> centroids_;
    std::vector<std::vector<std::size_t>> lists_;
    KMeansResult clustering_;
};

double dot(std::span<const float> a, std::span<const float> b);

/// Brute-force oracle: full scan, same ordering rules as Index::knn.
NeighborSet brute_force_knn(const EmbeddingTable& table, std::span<const float> query, std::size_t k,
                            const ExcludeFn& exclude = {});

/// Fraction of `truth` rows present in `found` (recall@|truth|).
double recall(const NeighborSet& found, const NeighborSet& truth);

/// Unit vectors drawn around `clusters` random unit centres with per-coordinate
/// Gaussian noise `spread`, then renormalised. Refs are (row, 0).
EmbeddingTable clustered_table(std::size_t n, std::size_t dim, std::size_t clusters, double spread, std::uint64_t seed);

} // namespace retrolm
