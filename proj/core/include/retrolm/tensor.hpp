// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace retrolm::nn {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Ops only use rank 1 and rank 2; a rank-1 tensor of
/// length n behaves as a 1 x n matrix.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{});
    Tensor(Shape shape, std::vector<T> data);

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{}) { return Tensor({rows, cols}, fill); }
    static Tensor vector(std::size_t n, T fill = T{}) { return Tensor({n}, fill); }
    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : (shape_.empty() ? 0 : 1); }
    std::size_t cols() const noexcept { return shape_.size() == 2 ? shape_[1] : (shape_.empty() ? 0 : shape_[0]); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) noexcept { return std::span<T>(data_).subspan(r * cols(), cols()); }
    std::span<const T> row(std::size_t r) const noexcept {
        return std::span<const T>(data_).subspan(r * cols(), cols());
    }

    void fill(T v);
    bool all_finite() const noexcept;

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Boolean attention mask; `masked(r, c)` true means the entry is excluded.
class Mask {
public:
    Mask() = default;
    Mask(std::size_t rows, std::size_t cols, bool masked = false)
        : rows_(rows), cols_(cols), data_(rows * cols, masked ? 1 : 0) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool masked(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c] != 0; }
    void set(std::size_t r, std::size_t c, bool masked) noexcept { data_[r * cols_ + c] = masked ? 1 : 0; }
    bool row_all_masked(std::size_t r) const noexcept;

    bool operator==(const Mask&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> data_;
};

/// Block-diagonal mask over stacked sequences of the given lengths; with `causal`
/// each block is additionally lower-triangular.
Mask block_diagonal_mask(std::span<const std::size_t> lengths, bool causal);

/// Expands a (p x q) block mask token-wise: block (i, j) covers row_sizes[i] x col_sizes[j].
Mask expand_mask(const Mask& blocks, std::span<const std::size_t> row_sizes, std::span<const std::size_t> col_sizes);

extern template class Tensor<float>;
extern template class Tensor<double>;

} // namespace retrolm::nn
