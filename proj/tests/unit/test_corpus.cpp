// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "retrolm/corpus.hpp"
#include "retrolm/error.hpp"
#include "retrolm/rng.hpp"

using namespace retrolm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("retrolm-corpus-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static inline int counter = 0;
};

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary);
    f << bytes;
}

TokenSeq iota_tokens(std::size_t n) {
    TokenSeq t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<Token>(i % 256);
    return t;
}

} // namespace

TEST_CASE("tokenize maps bytes to ids") {
    CHECK(tokenize("ab") == TokenSeq{97, 98});
    CHECK(tokenize("").empty());
    const std::string high("\xff\x00\x80", 3);
    CHECK(tokenize(high) == TokenSeq{255, 0, 128});
}

TEST_CASE("detokenize inverts tokenize on random bytes") {
    Rng rng(17);
    std::string s(1024, '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    CHECK(detokenize(tokenize(s)) == s);
}

TEST_CASE("detokenize rejects special ids") {
    const TokenSeq t{97, kBos};
    CHECK_THROWS_AS(detokenize(t), RangeError);
}

TEST_CASE("segment_document windowing") {
    SECTION("70 tokens, N=32, N_min=16") {
        const auto d = segment_document(iota_tokens(70), 32, 16, 5);
        REQUIRE(d.segments.size() == 2);
        CHECK(d.segments[0].ref == SegmentRef{5, 0});
        CHECK(d.segments[1].ref == SegmentRef{5, 1});
        CHECK(d.dropped_tail_tokens == 6);
        CHECK(d.segments[1].tokens.front() == 32);
    }
    SECTION("64 tokens, N=32") {
        const auto d = segment_document(iota_tokens(64), 32, 32);
        CHECK(d.segments.size() == 2);
        CHECK(d.dropped_tail_tokens == 0);
    }
    SECTION("10 tokens, N=32") {
        const auto d = segment_document(iota_tokens(10), 32, 32);
        CHECK(d.segments.empty());
    }
    SECTION("invalid lengths") {
        CHECK_THROWS_AS(segment_document(iota_tokens(4), 0, 0), UsageError);
        CHECK_THROWS_AS(segment_document(iota_tokens(4), 4, 5), UsageError);
    }
}

TEST_CASE("load_corpus reads one document per line") {
    TempDir dir;
    CorpusConfig cfg;
    cfg.segment_len = 32;

    SECTION("three 64-byte lines") {
        std::string text;
        for (int i = 0; i < 3; ++i) text += std::string(64, static_cast<char>('a' + i)) + "\n";
        write_file(dir.path / "c.txt", text);
        const auto c = load_corpus(dir.path / "c.txt", cfg);
        CHECK(c.size() == 6);
        CHECK(c.samples().size() == 3);
        CHECK(c.segment(2).ref == SegmentRef{1, 0});
        CHECK(c.segment(2).tokens.front() == 'b');
    }
    SECTION("empty file") {
        write_file(dir.path / "e.txt", "");
        const auto c = load_corpus(dir.path / "e.txt", cfg);
        CHECK(c.empty());
    }
    SECTION("one 100-byte line") {
        write_file(dir.path / "h.txt", std::string(100, 'x') + "\n");
        const auto c = load_corpus(dir.path / "h.txt", cfg);
        CHECK(c.size() == 3);
        CHECK(c.dropped_tail_tokens() == 4);
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(load_corpus(dir.path / "nope.txt", cfg), IngestError);
    }
}

TEST_CASE("byte ranges point back at source bytes") {
    TempDir dir;
    const std::string line0(10, 'q');
    const std::string line1 = "abcdefghijklmnopqrstuvwx";
    write_file(dir.path / "c.txt", line0 + "\n" + line1 + "\n");
    CorpusConfig cfg;
    cfg.segment_len = 8;
    const auto c = load_corpus(dir.path / "c.txt", cfg);
    REQUIRE(c.size() == 4);
    std::ifstream f(dir.path / "c.txt", std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string all = ss.str();
    for (std::size_t row = 0; row < c.size(); ++row) {
        const auto br = c.byte_range(row);
        CHECK(all.substr(br.offset, br.length) == detokenize(c.segment(row).tokens));
    }
    CHECK(c.skipped_documents() == 0);
    CHECK(c.dropped_tail_tokens() == 2);
}

TEST_CASE("directory corpora use lexicographic file order") {
    TempDir dir;
    write_file(dir.path / "b.txt", std::string(8, 'b'));
    write_file(dir.path / "a.txt", std::string(8, 'a'));
    CorpusConfig cfg;
    cfg.segment_len = 8;
    const auto c = load_corpus_dir(dir.path, cfg);
    REQUIRE(c.size() == 2);
    CHECK(c.segment(0).tokens.front() == 'a');
    CHECK(c.segment(1).tokens.front() == 'b');
}

TEST_CASE("corpus navigation and identity") {
    CorpusConfig cfg;
    cfg.segment_len = 4;
    const std::vector<std::string> docs = {"aaaabbbbcccc", "xy", "ddddeeee"};
    const auto c = Corpus::from_documents(docs, cfg);
    REQUIRE(c.size() == 5);
    CHECK(c.skipped_documents() == 1);
    CHECK(c.samples().size() == 2);
    CHECK(!c.predecessor(0));
    CHECK(c.predecessor(1) == 0u);
    CHECK(c.successor(2) == std::nullopt);
    CHECK(c.row_of({1, 1}) == 4u);
    CHECK(c.row_of({1, 2}) == std::nullopt);
    CHECK(c.sample_of(3).document == 2);

    const auto same = Corpus::from_documents(docs, cfg);
    CHECK(same.id() == c.id());
    const std::vector<std::string> other = {"aaaabbbbcccc", "xy", "ddddeeef"};
    CHECK(Corpus::from_documents(other, cfg).id() != c.id());
    cfg.segment_len = 2;
    CHECK(Corpus::from_documents(docs, cfg).id() != c.id());
}

TEST_CASE("manifest lists every sample") {
    CorpusConfig cfg;
    cfg.segment_len = 4;
    const std::vector<std::string> docs = {"aaaabbbb", "cccc"};
    const auto c = Corpus::from_documents(docs, cfg, "mem");
    std::ostringstream out;
    write_manifest(c, out);
    const auto s = out.str();
    CHECK(s.find("corpus_id = " + c.id()) != std::string::npos);
    CHECK(s.find("segments = 3") != std::string::npos);
    CHECK(s.find("sample 1 1 mem") != std::string::npos);
}
