// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenization and fixed-length segmentation of documents.
//
// Every document becomes consecutive non-overlapping windows of exactly N tokens;
// the trailing partial window is dropped and counted. Segments are the unit of
// retrieval, embedding and prediction.
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace retrolm {

using Token = std::uint16_t;
using TokenSeq = std::vector<Token>;

inline constexpr Token kBos = 256;
inline constexpr Token kEos = 257;
inline constexpr Token kPad = 258;
inline constexpr std::size_t kVocabSize = 259;

/// One token per byte; no BOS/EOS.
TokenSeq tokenize(std::string_view text);
/// Inverse of tokenize. Throws RangeError on ids >= 256.
std::string detokenize(std::span<const Token> tokens);

struct SegmentRef {
    std::uint32_t sample = 0;
    std::uint32_t index = 0;
    auto operator<=>(const SegmentRef&) const = default;
};

struct Segment {
    SegmentRef ref;
    TokenSeq tokens;
};

struct SegmentedDocument {
    std::vector<Segment> segments;
    std::size_t dropped_tail_tokens = 0;
};

/// Windows `tokens` into segments of exactly `n` tokens stamped with `sample_id`.
/// Requires 1 <= n_min <= n; a final window shorter than n is always dropped.
SegmentedDocument segment_document(std::span<const Token> tokens, std::size_t n, std::size_t n_min,
                                   std::uint32_t sample_id = 0);

struct CorpusConfig {
    std::size_t segment_len = 32;
    std::size_t min_segment_len = 0;  // 0 means "same as segment_len"
};

/// Where a sample's bytes came from. `origin` is the file path (or a caller label).
struct SampleInfo {
    std::uint32_t sample_id = 0;
    std::size_t document = 0;  // input ordinal, counting skipped documents
    std::string origin;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;
    std::size_t first_row = 0;
    std::size_t segment_count = 0;
    std::size_t dropped_tail_tokens = 0;
};

struct ByteRange {
    std::string origin;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

class Corpus {
public:
    Corpus() = default;

    /// Builds a corpus from in-memory documents; `origin` labels every sample.
    static Corpus from_documents(std::span<const std::string> documents, const CorpusConfig& config,
                                 std::string_view origin = "<memory>");

    std::span<const Segment> segments() const noexcept { return segments_; }
    std::span<const SampleInfo> samples() const noexcept { return samples_; }
    std::size_t size() const noexcept { return segments_.size(); }
    bool empty() const noexcept { return segments_.empty(); }
    const Segment& segment(std::size_t row) const { return segments_.at(row); }

    std::size_t segment_len() const noexcept { return segment_len_; }
    std::size_t doc_count() const noexcept { return doc_count_; }
    std::size_t skipped_documents() const noexcept { return skipped_documents_; }
    std::size_t dropped_tail_tokens() const noexcept { return dropped_tail_tokens_; }

    /// Content hash (hex) over segment length and document bytes.
    const std::string& id() const noexcept { return id_; }

    std::optional<std::size_t> row_of(SegmentRef ref) const;
    /// Row of S_{t-1} for the segment at `row`, if t > 0.
    std::optional<std::size_t> predecessor(std::size_t row) const;
    /// Row of S_{t+1}, if it exists.
    std::optional<std::size_t> successor(std::size_t row) const;
    const SampleInfo& sample_of(std::size_t row) const;

    /// Exact source bytes of a segment.
    ByteRange byte_range(std::size_t row) const;

    /// Appends one document; bookkeeping only, segmentation as in segment_document.
    void add_document(std::string_view bytes, std::string_view origin, std::uint64_t byte_offset);

private:
    friend Corpus load_corpus(const std::filesystem::path&, const CorpusConfig&);
    friend Corpus load_corpus_dir(const std::filesystem::path&, const CorpusConfig&);
    void configure(const CorpusConfig& config);
    void finish();

    std::vector<Segment> segments_;
    std::vector<SampleInfo> samples_;
    std::size_t segment_len_ = 0;
    std::size_t min_segment_len_ = 0;
    std::size_t doc_count_ = 0;
    std::size_t skipped_documents_ = 0;
    std::size_t dropped_tail_tokens_ = 0;
    std::uint64_t hash_state_ = 0;
    std::string id_;
};

/// Newline-delimited file, one document per line. Throws IngestError("path:line: ...").
Corpus load_corpus(const std::filesystem::path& path, const CorpusConfig& config);
/// One document per regular file, lexicographic filename order.
Corpus load_corpus_dir(const std::filesystem::path& dir, const CorpusConfig& config);

/// Text manifest: per-sample source offset/length, segment counts and drop counters.
void write_manifest(const Corpus& corpus, std::ostream& out);

} // namespace retrolm
