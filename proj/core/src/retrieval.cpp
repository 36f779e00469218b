// SPDX-License-Identifier: Apache-2.0
#include "retrolm/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "retrolm/container.hpp"
#include "retrolm/error.hpp"
#include "retrolm/rng.hpp"

namespace retrolm {

namespace {

bool better(const Neighbor& a, const Neighbor& b) {
    return a.score > b.score || (a.score == b.score && a.row < b.row);
}

void keep_top(std::vector<Neighbor>& cands, std::size_t k) {
    if (cands.size() > k) {
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k), cands.end(), better);
        cands.resize(k);
    } else {
        std::sort(cands.begin(), cands.end(), better);
    }
}

// Maximum-inner-product centroid; ties to the lower index.
std::size_t nearest(std::span<const float> x, std::span<const float> centroids, std::size_t dim, double* score) {
    const std::size_t nc = centroids.size() / dim;
    std::size_t best = 0;
    double best_s = -INFINITY;
    for (std::size_t c = 0; c < nc; ++c) {
        const double s = dot(x, centroids.subspan(c * dim, dim));
        if (s > best_s) {
            best_s = s;
            best = c;
        }
    }
    if (score) *score = best_s;
    return best;
}

constexpr double kMaxExactRef = 16777216.0;  // 2^24: largest range where f32 stores every integer

} // namespace

double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

void EmbeddingTable::validate(double tol) const {
    if (vectors.size() != refs.size() * dim) throw UsageError("embedding table: vectors do not match refs x dim");
    for (std::size_t i = 0; i < size(); ++i) {
        const double n = std::sqrt(dot(row(i), row(i)));
        if (std::abs(n - 1.0) > tol) {
            throw UsageError("embedding table: row " + std::to_string(i) + " has norm " + format_real(n));
        }
    }
    auto sorted = refs;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw UsageError("embedding table: duplicate segment ref");
    }
}

template <typename T>
EmbeddingTable refresh_embeddings(const ModelParams<T>& params, const Corpus& corpus, std::uint64_t epoch,
                                  std::size_t chunk) {
    EmbeddingTable table;
    table.dim = params.config.d_model;
    table.epoch = epoch;
    std::vector<TokenSeq> seqs;
    seqs.reserve(corpus.size());
    for (const auto& s : corpus.segments()) {
        seqs.push_back(s.tokens);
        table.refs.push_back(s.ref);
    }
    if (!seqs.empty()) {
        const auto e = embed_batch(params, std::span<const TokenSeq>(seqs), chunk);
        table.vectors.assign(e.size(), 0.0f);
        for (std::size_t i = 0; i < e.size(); ++i) table.vectors[i] = static_cast<float>(e[i]);
    }
    const TokenSeq empty[1] = {TokenSeq{}};
    const auto q = embed_batch(params, std::span<const TokenSeq>(empty));
    table.empty_query.resize(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) table.empty_query[i] = static_cast<float>(q[i]);
    return table;
}

std::span<const float> context_query(const EmbeddingTable& table, const Corpus& corpus, std::size_t row) {
    if (auto p = corpus.predecessor(row)) return table.row(*p);
    return table.empty_query;
}

void save_table(const std::filesystem::path& path, const EmbeddingTable& table, const std::string& corpus_id) {
    Container c("embedding_table");
    c.set("epoch", std::to_string(table.epoch));
    c.set("dim", std::to_string(table.dim));
    c.set("rows", std::to_string(table.size()));
    c.set("corpus_id", corpus_id.empty() ? "-" : corpus_id);
    std::vector<float> refs;
    refs.reserve(2 * table.size());
    for (const auto& r : table.refs) {
        if (r.sample >= kMaxExactRef || r.index >= kMaxExactRef) throw UsageError("embedding table: ref too large to store");
        refs.push_back(static_cast<float>(r.sample));
        refs.push_back(static_cast<float>(r.index));
    }
    c.add_tensor("vectors", {table.size(), table.dim}, table.vectors);
    c.add_tensor("refs", {table.size(), 2}, std::move(refs));
    c.add_tensor("empty_query", {table.empty_query.size()}, table.empty_query);
    write_container(path, c);
}

EmbeddingTable load_table(const std::filesystem::path& path, std::string* corpus_id) {
    const auto c = read_container(path);
    if (c.kind() != "embedding_table") throw LoadError("'" + path.string() + "' is a " + c.kind() + ", not an embedding table");
    EmbeddingTable t;
    try {
        t.epoch = parse_uint(c.require("epoch"), "epoch");
        t.dim = parse_uint(c.require("dim"), "dim");
        const auto rows = parse_uint(c.require("rows"), "rows");
        const auto& v = c.tensor("vectors");
        const auto& r = c.tensor("refs");
        if (v.data.size() != rows * t.dim || r.data.size() != rows * 2) throw LoadError("embedding table: tensor sizes disagree with header");
        t.vectors = v.data;
        for (std::size_t i = 0; i < rows; ++i) {
            t.refs.push_back({static_cast<std::uint32_t>(r.data[2 * i]), static_cast<std::uint32_t>(r.data[2 * i + 1])});
        }
        t.empty_query = c.tensor("empty_query").data;
        if (t.empty_query.size() != t.dim) throw LoadError("embedding table: empty_query has the wrong size");
    } catch (const UsageError& e) {
        throw LoadError(std::string("embedding table: ") + e.what());
    }
    if (corpus_id) *corpus_id = c.require("corpus_id");
    return t;
}

KMeansResult kmeans(std::span<const float> vectors, std::size_t dim, std::size_t n_c, std::size_t iters,
                    std::uint64_t seed) {
    if (dim == 0 || vectors.size() % dim != 0) throw ShapeError("kmeans: vector data is not a multiple of dim");
    const std::size_t n = vectors.size() / dim;
    if (n_c == 0 || n_c > n) {
        throw UsageError("kmeans: n_c = " + std::to_string(n_c) + " must be in [1, " + std::to_string(n) + "]");
    }
    auto point = [&](std::size_t i) { return vectors.subspan(i * dim, dim); };

    KMeansResult r;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_c));
    r.centroids.resize(n_c * dim);
    for (std::size_t c = 0; c < n_c; ++c) {
        std::copy(point(order[c]).begin(), point(order[c]).end(), r.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
    }
    r.assignment.assign(n, n_c);
    std::vector<double> sim(n);

    auto assign = [&] {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = nearest(point(i), r.centroids, dim, &sim[i]);
            if (c != r.assignment[i]) {
                r.assignment[i] = c;
                changed = true;
            }
        }
        return changed;
    };

    for (std::size_t it = 0; it < iters; ++it) {
        if (!assign() && it > 0) break;
        std::vector<double> sums(n_c * dim, 0.0);
        std::vector<std::size_t> counts(n_c, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = r.assignment[i];
            ++counts[c];
            for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += point(i)[j];
        }
        for (std::size_t c = 0; c < n_c; ++c) {
            if (counts[c] == 0) continue;
            double norm = 0.0;
            for (std::size_t j = 0; j < dim; ++j) norm += sums[c * dim + j] * sums[c * dim + j];
            norm = std::sqrt(norm);
            if (norm == 0.0) continue;  // members cancel out; keep the previous direction
            for (std::size_t j = 0; j < dim; ++j) r.centroids[c * dim + j] = static_cast<float>(sums[c * dim + j] / norm);
        }
        for (std::size_t i = 0; i < n; ++i) sim[i] = dot(point(i), std::span<const float>(r.centroids).subspan(r.assignment[i] * dim, dim));
        for (std::size_t c = 0; c < n_c; ++c) {
            if (counts[c] != 0) continue;
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[r.assignment[i]] < 2) continue;
                if (far == n || sim[i] < sim[far]) far = i;
            }
            if (far == n) break;
            std::copy(point(far).begin(), point(far).end(), r.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
            --counts[r.assignment[far]];
            r.assignment[far] = c;
            counts[c] = 1;
            sim[far] = dot(point(far), point(far));
        }
        double obj = 0.0;
        for (std::size_t i = 0; i < n; ++i) obj += 1.0 - sim[i];
        r.objective.push_back(obj);
        ++r.iterations;
    }
    assign();
    return r;
}

std::string to_string(IndexMode mode) {
    return mode == IndexMode::exact ? "exact" : "ivf";
}

IndexMode parse_index_mode(std::string_view text) {
    if (text == "exact") return IndexMode::exact;
    if (text == "ivf") return IndexMode::ivf;
    throw UsageError("index mode must be 'exact' or 'ivf', got '" + std::string(text) + "'");
}

Index Index::build(const EmbeddingTable& table, const IndexParams& params) {
    if (table.size() == 0) throw UsageError("build_index: empty embedding table");
    if (table.vectors.size() != table.size() * table.dim) throw ShapeError("build_index: table vectors do not match refs");
    Index idx;
    idx.mode_ = params.mode;
    idx.epoch_ = table.epoch;
    idx.dim_ = table.dim;
    idx.vectors_ = table.vectors;
    idx.refs_ = table.refs;
    if (params.mode == IndexMode::ivf) {
        const std::size_t n = table.size();
        const std::size_t nc = params.n_clusters
                                   ? params.n_clusters
                                   : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
        if (nc > n) {
            throw UsageError("build_index: n_c = " + std::to_string(nc) + " exceeds " + std::to_string(n) + " segments");
        }
        if (params.n_probe == 0) throw UsageError("build_index: n_probe must be positive");
        idx.clustering_ = kmeans(table.vectors, table.dim, nc, params.kmeans_iters, params.seed);
        idx.centroids_ = idx.clustering_.centroids;
        idx.n_probe_ = std::min(params.n_probe, nc);
        idx.lists_.assign(nc, {});
        for (std::size_t i = 0; i < n; ++i) idx.lists_[idx.clustering_.assignment[i]].push_back(i);
    }
    return idx;
}

NeighborSet Index::knn(std::span<const float> query, std::size_t k, const ExcludeFn& exclude) const {
    if (k == 0) throw UsageError("knn: k must be at least 1");
    if (query.size() != dim_) throw ShapeError("knn: query has dimension " + std::to_string(query.size()) + ", index " + std::to_string(dim_));
    std::vector<Neighbor> cands;
    auto scan = [&](std::size_t row) {
        if (exclude && exclude(row)) return;
        cands.push_back({row, refs_[row], dot(query, std::span<const float>(vectors_).subspan(row * dim_, dim_))});
    };
    if (mode_ == IndexMode::exact) {
        for (std::size_t i = 0; i < refs_.size(); ++i) scan(i);
    } else {
        const std::size_t nc = lists_.size();
        std::vector<std::pair<double, std::size_t>> order;
        order.reserve(nc);
        for (std::size_t c = 0; c < nc; ++c) {
            order.emplace_back(dot(query, std::span<const float>(centroids_).subspan(c * dim_, dim_)), c);
        }
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            return a.first > b.first || (a.first == b.first && a.second < b.second);
        });
        for (std::size_t p = 0; p < nc; ++p) {
            if (p >= n_probe_ && cands.size() >= k) break;
            for (auto row : lists_[order[p].second]) scan(row);
        }
    }
    NeighborSet out;
    out.short_list = cands.size() < k;
    keep_top(cands, k);
    out.neighbors = std::move(cands);
    return out;
}

NeighborSet brute_force_knn(const EmbeddingTable& table, std::span<const float> query, std::size_t k,
                            const ExcludeFn& exclude) {
    std::vector<Neighbor> all;
    for (std::size_t i = 0; i < table.size(); ++i) {
        if (exclude && exclude(i)) continue;
        double s = 0.0;
        const auto r = table.row(i);
        for (std::size_t j = 0; j < table.dim; ++j) s += double(query[j]) * double(r[j]);
        all.push_back({i, table.refs[i], s});
    }
    std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.score > b.score; });
    NeighborSet out;
    out.short_list = all.size() < k;
    if (all.size() > k) all.resize(k);
    out.neighbors = std::move(all);
    return out;
}

double recall(const NeighborSet& found, const NeighborSet& truth) {
    if (truth.neighbors.empty()) return 1.0;
    std::size_t hit = 0;
    for (const auto& t : truth.neighbors) {
        for (const auto& f : found.neighbors) {
            if (f.row == t.row) {
                ++hit;
                break;
            }
        }
    }
    return static_cast<double>(hit) / static_cast<double>(truth.neighbors.size());
}

EmbeddingTable clustered_table(std::size_t n, std::size_t dim, std::size_t clusters, double spread, std::uint64_t seed) {
    if (n == 0 || dim == 0 || clusters == 0) throw UsageError("clustered_table: n, dim and clusters must be positive");
    Rng rng(seed);
    auto unit = [&](std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        s = std::sqrt(s);
        for (double& x : v) x /= s;
    };
    std::vector<std::vector<double>> centres(clusters, std::vector<double>(dim));
    for (auto& c : centres) {
        for (auto& x : c) x = rng.normal();
        unit(c);
    }
    EmbeddingTable t;
    t.dim = dim;
    t.vectors.reserve(n * dim);
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = centres[rng.below(clusters)];
        for (std::size_t j = 0; j < dim; ++j) v[j] = c[j] + spread * rng.normal();
        unit(v);
        for (double x : v) t.vectors.push_back(static_cast<float>(x));
        t.refs.push_back({static_cast<std::uint32_t>(i), 0});
    }
    t.empty_query.assign(dim, 0.0f);
    t.empty_query[0] = 1.0f;
    return t;
}

template EmbeddingTable refresh_embeddings(const ModelParams<float>&, const Corpus&, std::uint64_t, std::size_t);
template EmbeddingTable refresh_embeddings(const ModelParams<double>&, const Corpus&, std::uint64_t, std::size_t);

} // namespace retrolm
