// SPDX-License-Identifier: Apache-2.0
#include "retrolm/container.hpp"

#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "retrolm/error.hpp"

namespace retrolm {

namespace {

constexpr std::string_view kMagic = "RETROLM-CONTAINER 1";

std::string shape_text(const std::vector<std::size_t>& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += 'x';
        s += std::to_string(shape[i]);
    }
    return s;
}

bool valid_key(std::string_view key) {
    if (key.empty()) return false;
    for (char c : key) {
        if (c == ' ' || c == '=' || c == '\n' || c == '\r') return false;
    }
    return true;
}

std::vector<std::string_view> split_spaces(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && line[i] == ' ') ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

} // namespace

std::string format_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_real(std::string_view text, std::string_view field) {
    double v = 0.0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw UsageError("field '" + std::string(field) + "': expected a real number, got '" + std::string(text) + "'");
    }
    return v;
}

std::uint64_t parse_uint(std::string_view text, std::string_view field) {
    std::uint64_t v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw UsageError("field '" + std::string(field) + "': expected a non-negative integer, got '" +
                         std::string(text) + "'");
    }
    return v;
}

void Container::set(std::string key, std::string value) {
    if (!valid_key(key)) throw UsageError("container: invalid field name '" + key + "'");
    if (value.find('\n') != std::string::npos) throw UsageError("container: field '" + key + "' contains a newline");
    for (auto& kv : fields_) {
        if (kv.first == key) {
            kv.second = std::move(value);
            return;
        }
    }
    fields_.emplace_back(std::move(key), std::move(value));
}

std::optional<std::string> Container::get(std::string_view key) const {
    for (const auto& kv : fields_) {
        if (kv.first == key) return kv.second;
    }
    return std::nullopt;
}

const std::string& Container::require(std::string_view key) const {
    for (const auto& kv : fields_) {
        if (kv.first == key) return kv.second;
    }
    throw LoadError("container: missing field '" + std::string(key) + "'");
}

void Container::add_tensor(std::string name, std::vector<std::size_t> shape, std::vector<float> data) {
    if (!valid_key(name)) throw UsageError("container: invalid tensor name '" + name + "'");
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (n != data.size()) throw ShapeError("container: tensor '" + name + "' data does not match its shape");
    tensors_.push_back({std::move(name), std::move(shape), std::move(data)});
}

const ContainerTensor& Container::tensor(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    throw LoadError("container: missing tensor '" + std::string(name) + "'");
}

bool Container::has_tensor(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return true;
    }
    return false;
}

std::string encode_container(const Container& c) {
    std::ostringstream head;
    head << kMagic << '\n';
    head << "kind = " << c.kind() << '\n';
    for (const auto& [k, v] : c.fields()) head << k << " = " << v << '\n';
    std::size_t offset = 0;
    for (const auto& t : c.tensors()) {
        head << "tensor " << t.name << ' ' << (t.shape.empty() ? std::string("1") : shape_text(t.shape)) << ' '
             << offset << ' ' << t.data.size() << '\n';
        offset += t.data.size() * 4;
    }
    head << "end " << offset << '\n';
    std::string out = head.str();
    out.reserve(out.size() + offset);
    for (const auto& t : c.tensors()) {
        for (float f : t.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffU));
        }
    }
    return out;
}

Container decode_container(std::string_view bytes) {
    std::size_t pos = 0;
    auto next_line = [&](std::string_view& line) {
        auto nl = bytes.find('\n', pos);
        if (nl == std::string_view::npos) throw LoadError("container: truncated header");
        line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
    };
    std::string_view line;
    next_line(line);
    if (line != kMagic) throw LoadError("container: bad magic/version line '" + std::string(line.substr(0, 40)) + "'");
    next_line(line);
    if (line.substr(0, 7) != "kind = ") throw LoadError("container: corrupt header, expected 'kind' field");
    Container c{std::string(line.substr(7))};

    struct Pending {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t offset, count;
    };
    std::vector<Pending> pending;
    std::size_t payload_bytes = 0;
    bool ended = false;
    while (!ended) {
        next_line(line);
        if (line.substr(0, 7) == "tensor ") {
            auto parts = split_spaces(line);
            if (parts.size() != 5) throw LoadError("container: corrupt tensor line '" + std::string(line) + "'");
            Pending p;
            p.name = std::string(parts[1]);
            std::string_view dims = parts[2];
            std::size_t start = 0;
            try {
                while (start <= dims.size()) {
                    auto x = dims.find('x', start);
                    auto tok = dims.substr(start, x == std::string_view::npos ? std::string_view::npos : x - start);
                    p.shape.push_back(parse_uint(tok, p.name));
                    if (x == std::string_view::npos) break;
                    start = x + 1;
                }
                p.offset = parse_uint(parts[3], p.name);
                p.count = parse_uint(parts[4], p.name);
            } catch (const UsageError& e) {
                throw LoadError(std::string("container: corrupt tensor line: ") + e.what());
            }
            std::size_t n = 1;
            for (auto d : p.shape) n *= d;
            if (n != p.count) throw LoadError("container: tensor '" + p.name + "' count does not match its shape");
            pending.push_back(std::move(p));
        } else if (line.substr(0, 4) == "end ") {
            try {
                payload_bytes = parse_uint(line.substr(4), "end");
            } catch (const UsageError& e) {
                throw LoadError(std::string("container: corrupt end line: ") + e.what());
            }
            ended = true;
        } else {
            auto eq = line.find(" = ");
            if (eq == std::string_view::npos || eq == 0) {
                throw LoadError("container: corrupt header line '" + std::string(line.substr(0, 60)) + "'");
            }
            c.set(std::string(line.substr(0, eq)), std::string(line.substr(eq + 3)));
        }
    }
    if (bytes.size() - pos != payload_bytes) {
        throw LoadError("container: payload is " + std::to_string(bytes.size() - pos) + " bytes, header declares " +
                        std::to_string(payload_bytes));
    }
    std::size_t expect = 0;
    for (const auto& p : pending) {
        if (p.offset != expect) throw LoadError("container: tensor '" + p.name + "' has a non-contiguous offset");
        expect += p.count * 4;
    }
    if (expect != payload_bytes) throw LoadError("container: tensor sizes do not add up to the payload");
    const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (auto& p : pending) {
        std::vector<float> data(p.count);
        for (std::size_t i = 0; i < p.count; ++i) {
            const unsigned char* b = payload + p.offset + 4 * i;
            std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                                 (std::uint32_t(b[3]) << 24);
            std::memcpy(&data[i], &bits, 4);
        }
        c.add_tensor(std::move(p.name), std::move(p.shape), std::move(data));
    }
    return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
    const auto bytes = encode_container(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write to '" + path.string() + "' failed");
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return decode_container(buf.str());
}

} // namespace retrolm
