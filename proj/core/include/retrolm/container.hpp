// SPDX-License-Identifier: Apache-2.0
//
// On-disk container for checkpoints and embedding tables:
//
//   RETROLM-CONTAINER 1
//   kind = checkpoint
//   <key> = <value>                       (ordered text fields)
//   tensor <name> <d0>x<d1> <offset> <count>
//   end <payload_bytes>
//   <payload: little-endian IEEE-754 binary32, tensors back to back>
//
// Offsets are byte offsets into the payload. Writing is deterministic, so
// save -> load -> save reproduces the file byte for byte.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace retrolm {

struct ContainerTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;
};

class Container {
public:
    explicit Container(std::string kind = {}) : kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

    void set(std::string key, std::string value);
    std::optional<std::string> get(std::string_view key) const;
    /// Throws LoadError naming the missing field.
    const std::string& require(std::string_view key) const;
    const std::vector<std::pair<std::string, std::string>>& fields() const noexcept { return fields_; }

    void add_tensor(std::string name, std::vector<std::size_t> shape, std::vector<float> data);
    const ContainerTensor& tensor(std::string_view name) const;
    bool has_tensor(std::string_view name) const;
    const std::vector<ContainerTensor>& tensors() const noexcept { return tensors_; }

private:
    std::string kind_;
    std::vector<std::pair<std::string, std::string>> fields_;
    std::vector<ContainerTensor> tensors_;
};

std::string encode_container(const Container& c);
/// Parses a whole container; throws LoadError and never returns partial state.
Container decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Shortest decimal text that parses back to the same double.
std::string format_real(double v);
double parse_real(std::string_view text, std::string_view field);
std::uint64_t parse_uint(std::string_view text, std::string_view field);

} // namespace retrolm
