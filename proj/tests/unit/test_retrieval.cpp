// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "retrolm/batching.hpp"
#include "retrolm/error.hpp"
#include "retrolm/retrieval.hpp"
#include "retrolm/rng.hpp"
#include "synthetic.hpp"

using namespace retrolm;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 2;
    c.encoder_layers = 2;
    c.decoder_layers = 1;
    c.segment_len = 8;
    return c;
}

double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += double(a[i]) * b[i];
        aa += double(a[i]) * a[i];
        bb += double(b[i]) * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

std::vector<std::size_t> rows_of(const NeighborSet& s) {
    std::vector<std::size_t> r;
    for (const auto& n : s.neighbors) r.push_back(n.row);
    return r;
}

} // namespace

TEST_CASE("clustered table rows are unit vectors") {
    const auto t = clustered_table(200, 16, 4, 0.2, 1);
    CHECK(t.size() == 200);
    CHECK_NOTHROW(t.validate());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(dot(t.row(i), t.row(i)) == Approx(1.0).margin(1e-5));
}

TEST_CASE("exact knn matches a brute-force scan") {
    const auto t = clustered_table(300, 8, 6, 0.3, 2);
    const auto index = Index::build(t, IndexParams{IndexMode::exact});
    Rng rng(3);
    for (int q = 0; q < 20; ++q) {
        const std::size_t row = rng.below(t.size());
        const auto found = index.knn(t.row(row), 7);
        // Independent scan: score every row, sort by (score desc, row asc).
        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t i = 0; i < t.size(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < t.dim; ++j) s += double(t.row(row)[j]) * t.row(i)[j];
            all.emplace_back(-s, i);
        }
        std::sort(all.begin(), all.end());
        REQUIRE(found.neighbors.size() == 7);
        for (std::size_t j = 0; j < 7; ++j) {
            CHECK(found.neighbors[j].row == all[j].second);
            CHECK(found.neighbors[j].score == Approx(-all[j].first).margin(1e-6));
        }
        CHECK(rows_of(found) == rows_of(brute_force_knn(t, t.row(row), 7)));
    }
}

TEST_CASE("a stored row is its own nearest neighbour") {
    const auto t = clustered_table(100, 16, 4, 0.5, 4);
    const auto index = Index::build(t, IndexParams{IndexMode::exact});
    const auto r = index.knn(t.row(42), 1);
    REQUIRE(r.neighbors.size() == 1);
    CHECK(r.neighbors[0].row == 42);
    CHECK(r.neighbors[0].score == Approx(1.0).margin(1e-6));
}

TEST_CASE("exclusion and short lists") {
    const auto t = clustered_table(5, 4, 1, 0.5, 5);
    const auto index = Index::build(t, IndexParams{IndexMode::exact});
    const auto r = index.knn(t.row(0), 10, [](std::size_t row) { return row % 2 == 0; });
    CHECK(r.short_list);
    CHECK(rows_of(r).size() == 2);
    for (auto row : rows_of(r)) CHECK(row % 2 == 1);
}

TEST_CASE("ivf with a single list equals exact search") {
    const auto t = clustered_table(250, 8, 5, 0.3, 6);
    IndexParams p;
    p.mode = IndexMode::ivf;
    p.n_clusters = 1;
    p.n_probe = 1;
    const auto ivf = Index::build(t, p);
    const auto exact = Index::build(t, IndexParams{IndexMode::exact});
    Rng rng(7);
    for (int q = 0; q < 10; ++q) {
        const auto row = rng.below(t.size());
        CHECK(rows_of(ivf.knn(t.row(row), 9)) == rows_of(exact.knn(t.row(row), 9)));
    }
}

TEST_CASE("ivf lists partition the rows") {
    const auto t = clustered_table(400, 8, 8, 0.2, 8);
    IndexParams p;
    p.mode = IndexMode::ivf;
    p.n_clusters = 12;
    const auto index = Index::build(t, p);
    CHECK(index.lists().size() == 12);
    std::vector<int> seen(t.size(), 0);
    for (const auto& list : index.lists()) {
        for (auto row : list) ++seen[row];
    }
    for (auto s : seen) CHECK(s == 1);
}

TEST_CASE("ivf falls back to further lists before returning a short list") {
    const auto t = clustered_table(120, 8, 6, 0.2, 9);
    IndexParams p;
    p.mode = IndexMode::ivf;
    p.n_clusters = 6;
    p.n_probe = 1;
    const auto index = Index::build(t, p);
    const auto r = index.knn(t.row(0), 100);
    CHECK_FALSE(r.short_list);
    CHECK(r.neighbors.size() == 100);
}

TEST_CASE("ivf build rejects impossible parameters") {
    const auto t = clustered_table(10, 4, 2, 0.2, 10);
    IndexParams p;
    p.mode = IndexMode::ivf;
    p.n_clusters = 11;
    CHECK_THROWS_AS(Index::build(t, p), UsageError);
    CHECK_THROWS_AS(Index::build(EmbeddingTable{}, IndexParams{}), UsageError);
}

TEST_CASE("kmeans") {
    SECTION("one centroid per vector lands on the vectors") {
        const auto t = clustered_table(12, 6, 12, 0.1, 11);
        const auto r = kmeans(t.vectors, t.dim, 12, 10, 1);
        std::set<std::size_t> used(r.assignment.begin(), r.assignment.end());
        CHECK(used.size() == 12);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const std::span<const float> c(r.centroids.data() + r.assignment[i] * t.dim, t.dim);
            CHECK(cosine(c, t.row(i)) == Approx(1.0).margin(1e-6));
        }
        CHECK(r.objective.back() == Approx(0.0).margin(1e-6));
    }
    SECTION("antipodal clusters are separated") {
        Rng rng(12);
        const std::size_t dim = 8, n = 100;
        std::vector<float> centre(dim);
        for (auto& x : centre) x = static_cast<float>(rng.normal());
        std::vector<float> v;
        for (std::size_t i = 0; i < n; ++i) {
            const float sign = i % 2 ? -1.0f : 1.0f;
            std::vector<float> row(dim);
            double norm = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                row[j] = sign * centre[j] + static_cast<float>(0.05 * rng.normal());
                norm += double(row[j]) * row[j];
            }
            for (auto& x : row) x = static_cast<float>(x / std::sqrt(norm));
            v.insert(v.end(), row.begin(), row.end());
        }
        const auto r = kmeans(v, dim, 2, 20, 3);
        const std::span<const float> c0(r.centroids.data(), dim), c1(r.centroids.data() + dim, dim);
        const std::span<const float> plus(centre);
        const double a = std::abs(cosine(c0, plus)), b = std::abs(cosine(c1, plus));
        CHECK(a > 0.99);
        CHECK(b > 0.99);
        CHECK(cosine(c0, c1) < -0.99);
        for (std::size_t i = 2; i < n; ++i) CHECK(r.assignment[i] == r.assignment[i % 2]);
    }
    SECTION("objective never increases") {
        const auto t = clustered_table(500, 16, 10, 0.4, 13);
        const auto r = kmeans(t.vectors, t.dim, 10, 25, 4);
        for (std::size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] <= r.objective[i - 1] + 1e-9);
    }
}

TEST_CASE("index modes parse") {
    CHECK(parse_index_mode("exact") == IndexMode::exact);
    CHECK(parse_index_mode("ivf") == IndexMode::ivf);
    CHECK(to_string(IndexMode::ivf) == "ivf");
    CHECK_THROWS_AS(parse_index_mode("hnsw"), UsageError);
}

TEST_CASE("refresh embeddings") {
    const auto docs = testing::random_documents(12, 16, 40, 14);
    const auto corpus = testing::make_corpus(docs, 8, "mem");
    const auto params = ModelParams<float>::init(small_model(), 15);
    const auto t = refresh_embeddings(params, corpus, 3);
    CHECK(t.epoch == 3);
    CHECK(t.size() == corpus.size());
    CHECK(t.dim == 16);
    CHECK_NOTHROW(t.validate());
    CHECK(t.empty_query.size() == 16);
    for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(t.refs[i] == corpus.segment(i).ref);

    SECTION("chunking does not change vectors") {
        const auto one = refresh_embeddings(params, corpus, 3, 1);
        for (std::size_t i = 0; i < t.vectors.size(); ++i) CHECK(one.vectors[i] == Approx(t.vectors[i]).margin(1e-5));
    }
    SECTION("rows match single-segment embedding") {
        for (std::size_t i = 0; i < corpus.size(); i += 3) {
            const auto e = embed_segment(params, corpus.segment(i));
            for (std::size_t j = 0; j < t.dim; ++j) CHECK(e.vector[j] == Approx(t.row(i)[j]).margin(1e-5));
        }
    }
    SECTION("vectors follow parameter changes") {
        auto moved = params;
        for (auto& x : moved.weights.enc_embed.values()) x += 0.1f;
        const auto t2 = refresh_embeddings(moved, corpus, 4);
        double diff = 0.0;
        for (std::size_t i = 0; i < t.vectors.size(); ++i) diff = std::max(diff, double(std::abs(t2.vectors[i] - t.vectors[i])));
        CHECK(diff > 1e-4);
    }
    SECTION("context query is the predecessor's vector") {
        for (std::size_t row = 0; row < corpus.size(); ++row) {
            const auto q = context_query(t, corpus, row);
            if (const auto p = corpus.predecessor(row)) {
                CHECK(q.data() == t.row(*p).data());
            } else {
                CHECK(std::equal(q.begin(), q.end(), t.empty_query.begin()));
            }
        }
    }
}

TEST_CASE("table save and load round trip") {
    const auto t = clustered_table(30, 8, 3, 0.2, 16);
    const auto path = fs::temp_directory_path() / ("retrolm-table-" + std::to_string(::getpid()) + ".bin");
    save_table(path, t, "abc123");
    std::string id;
    const auto back = load_table(path, &id);
    fs::remove(path);
    CHECK(id == "abc123");
    CHECK(back.dim == t.dim);
    CHECK(back.epoch == t.epoch);
    CHECK(back.vectors == t.vectors);
    CHECK(back.refs == t.refs);
    CHECK_THROWS_AS(load_table(path), LoadError);
}

TEST_CASE("planning against a stale index fails") {
    const auto docs = testing::random_documents(6, 16, 32, 17);
    const auto corpus = testing::make_corpus(docs, 8, "mem");
    const auto params = ModelParams<float>::init(small_model(), 18);
    const auto table = refresh_embeddings(params, corpus, 1);
    const auto index = Index::build(table, IndexParams{IndexMode::exact});
    KnnPlanParams p;
    p.m = 2;
    p.k = 2;
    p.epoch = 2;
    CHECK_THROWS_AS(knn_plan(index, table, corpus, p), StaleIndexError);
    p.epoch = 1;
    CHECK_NOTHROW(knn_plan(index, table, corpus, p));
}
