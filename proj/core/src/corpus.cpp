// SPDX-License-Identifier: Apache-2.0
#include "retrolm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "retrolm/error.hpp"

namespace retrolm {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_bytes(std::uint64_t& h, std::string_view bytes) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
}

void fnv_u64(std::uint64_t& h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffU;
        h *= kFnvPrime;
    }
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

} // namespace

TokenSeq tokenize(std::string_view text) {
    TokenSeq out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<Token>(c));
    return out;
}

std::string detokenize(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t > 255) throw RangeError("detokenize: special token id " + std::to_string(t) + " has no byte form");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

SegmentedDocument segment_document(std::span<const Token> tokens, std::size_t n, std::size_t n_min,
                                   std::uint32_t sample_id) {
    if (n == 0) throw UsageError("segment_document: N must be positive");
    if (n_min == 0 || n_min > n) throw UsageError("segment_document: N_min must satisfy 1 <= N_min <= N");
    SegmentedDocument doc;
    const std::size_t count = tokens.size() / n;
    doc.segments.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Segment s;
        s.ref = {sample_id, static_cast<std::uint32_t>(i)};
        s.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(i * n),
                        tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
        doc.segments.push_back(std::move(s));
    }
    doc.dropped_tail_tokens = tokens.size() - count * n;
    return doc;
}

void Corpus::configure(const CorpusConfig& config) {
    if (config.segment_len == 0) throw UsageError("corpus: segment_len must be positive");
    segment_len_ = config.segment_len;
    min_segment_len_ = config.min_segment_len == 0 ? config.segment_len : config.min_segment_len;
    if (min_segment_len_ > segment_len_) throw UsageError("corpus: min_segment_len must not exceed segment_len");
    hash_state_ = kFnvOffset;
    fnv_u64(hash_state_, segment_len_);
    finish();
}

void Corpus::finish() { id_ = hex64(hash_state_); }

void Corpus::add_document(std::string_view bytes, std::string_view origin, std::uint64_t byte_offset) {
    const std::size_t ordinal = doc_count_++;
    fnv_u64(hash_state_, bytes.size());
    fnv_bytes(hash_state_, bytes);
    finish();

    auto tokens = tokenize(bytes);
    auto sample_id = static_cast<std::uint32_t>(samples_.size());
    auto doc = segment_document(tokens, segment_len_, min_segment_len_, sample_id);
    dropped_tail_tokens_ += doc.dropped_tail_tokens;
    if (doc.segments.empty()) {
        ++skipped_documents_;
        return;
    }
    SampleInfo info;
    info.sample_id = sample_id;
    info.document = ordinal;
    info.origin = std::string(origin);
    info.byte_offset = byte_offset;
    info.byte_length = bytes.size();
    info.first_row = segments_.size();
    info.segment_count = doc.segments.size();
    info.dropped_tail_tokens = doc.dropped_tail_tokens;
    samples_.push_back(std::move(info));
    for (auto& s : doc.segments) segments_.push_back(std::move(s));
}

Corpus Corpus::from_documents(std::span<const std::string> documents, const CorpusConfig& config,
                              std::string_view origin) {
    Corpus c;
    c.configure(config);
    std::uint64_t offset = 0;
    for (const auto& d : documents) {
        c.add_document(d, origin, offset);
        offset += d.size() + 1;
    }
    return c;
}

std::optional<std::size_t> Corpus::row_of(SegmentRef ref) const {
    if (ref.sample >= samples_.size()) return std::nullopt;
    const auto& s = samples_[ref.sample];
    if (ref.index >= s.segment_count) return std::nullopt;
    return s.first_row + ref.index;
}

std::optional<std::size_t> Corpus::predecessor(std::size_t row) const {
    if (segments_.at(row).ref.index == 0) return std::nullopt;
    return row - 1;
}

std::optional<std::size_t> Corpus::successor(std::size_t row) const {
    const auto& info = sample_of(row);
    if (row + 1 >= info.first_row + info.segment_count) return std::nullopt;
    return row + 1;
}

const SampleInfo& Corpus::sample_of(std::size_t row) const {
    return samples_.at(segments_.at(row).ref.sample);
}

ByteRange Corpus::byte_range(std::size_t row) const {
    const auto& seg = segments_.at(row);
    const auto& info = samples_.at(seg.ref.sample);
    return {info.origin, info.byte_offset + static_cast<std::uint64_t>(seg.ref.index) * segment_len_,
            segment_len_};
}

Corpus load_corpus(const std::filesystem::path& path, const CorpusConfig& config) {
    Corpus c;
    c.configure(config);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError(path.string() + ":0: cannot open corpus file");
    std::string line;
    std::size_t line_no = 0;
    std::uint64_t offset = 0;
    while (true) {
        line.clear();
        if (!std::getline(in, line)) {
            if (in.bad()) throw IngestError(path.string() + ":" + std::to_string(line_no + 1) + ": read error");
            break;
        }
        ++line_no;
        c.add_document(line, path.string(), offset);
        offset += line.size() + 1;
        if (in.eof()) break;
    }
    return c;
}

Corpus load_corpus_dir(const std::filesystem::path& dir, const CorpusConfig& config) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IngestError(dir.string() + ":0: not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    Corpus c;
    c.configure(config);
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw IngestError(f.string() + ":0: cannot open corpus file");
        std::ostringstream buf;
        buf << in.rdbuf();
        if (in.bad()) throw IngestError(f.string() + ":1: read error");
        c.add_document(buf.str(), f.string(), 0);
    }
    return c;
}

void write_manifest(const Corpus& corpus, std::ostream& out) {
    out << "# retrolm corpus manifest\n";
    out << "corpus_id = " << corpus.id() << '\n';
    out << "segment_len = " << corpus.segment_len() << '\n';
    out << "documents = " << corpus.doc_count() << '\n';
    out << "samples = " << corpus.samples().size() << '\n';
    out << "skipped_documents = " << corpus.skipped_documents() << '\n';
    out << "segments = " << corpus.size() << '\n';
    out << "dropped_tail_tokens = " << corpus.dropped_tail_tokens() << '\n';
    out << "# sample_id document origin offset length segments dropped\n";
    for (const auto& s : corpus.samples()) {
        out << "sample " << s.sample_id << ' ' << s.document << ' ' << s.origin << ' ' << s.byte_offset << ' '
            << s.byte_length << ' ' << s.segment_count << ' ' << s.dropped_tail_tokens << '\n';
    }
}

} // namespace retrolm
