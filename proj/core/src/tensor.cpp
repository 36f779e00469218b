// SPDX-License-Identifier: Apache-2.0
#include "retrolm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "retrolm/error.hpp"

namespace retrolm::nn {

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {
std::size_t product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
} // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != product(shape_)) {
        throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
    }
}

template <typename T>
void Tensor<T>::fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

bool Mask::row_all_masked(std::size_t r) const noexcept {
    for (std::size_t c = 0; c < cols_; ++c) {
        if (!masked(r, c)) return false;
    }
    return true;
}

Mask block_diagonal_mask(std::span<const std::size_t> lengths, bool causal) {
    const std::size_t total = std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
    Mask m(total, total, true);
    std::size_t base = 0;
    for (auto len : lengths) {
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t last = causal ? i + 1 : len;
            for (std::size_t j = 0; j < last; ++j) m.set(base + i, base + j, false);
        }
        base += len;
    }
    return m;
}

Mask expand_mask(const Mask& blocks, std::span<const std::size_t> row_sizes, std::span<const std::size_t> col_sizes) {
    if (row_sizes.size() != blocks.rows() || col_sizes.size() != blocks.cols()) {
        throw ShapeError("expand_mask: block sizes do not match mask " + std::to_string(blocks.rows()) + "x" +
                         std::to_string(blocks.cols()));
    }
    const std::size_t rows = std::accumulate(row_sizes.begin(), row_sizes.end(), std::size_t{0});
    const std::size_t cols = std::accumulate(col_sizes.begin(), col_sizes.end(), std::size_t{0});
    Mask out(rows, cols, false);
    std::size_t r0 = 0;
    for (std::size_t i = 0; i < blocks.rows(); ++i) {
        std::size_t c0 = 0;
        for (std::size_t j = 0; j < blocks.cols(); ++j) {
            if (blocks.masked(i, j)) {
                for (std::size_t r = 0; r < row_sizes[i]; ++r)
                    for (std::size_t c = 0; c < col_sizes[j]; ++c) out.set(r0 + r, c0 + c, true);
            }
            c0 += col_sizes[j];
        }
        r0 += row_sizes[i];
    }
    return out;
}

} // namespace retrolm::nn
