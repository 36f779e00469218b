// SPDX-License-Identifier: Apache-2.0
//
// Differentiable ops over Graph variables. All ops take and return rank-1/rank-2
// tensors; a rank-1 tensor of length n is treated as a 1 x n row.
#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "retrolm/autodiff.hpp"

namespace retrolm::nn {

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// a . b^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
/// Adds a length-n vector to every row of an m x n matrix.
template <typename T> Var<T> add_row(Var<T> a, Var<T> bias);
template <typename T> Var<T> scale(Var<T> a, double c);
/// Multiplies every entry by a 1-element variable.
template <typename T> Var<T> mul_scalar(Var<T> a, Var<T> s);

template <typename T> Var<T> relu(Var<T> a);
/// tanh approximation.
template <typename T> Var<T> gelu(Var<T> a);

template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, double eps = 1e-5);
/// Row-wise x / ||x||_2. Throws NumericError on a zero row.
template <typename T> Var<T> l2_normalize_rows(Var<T> x);

/// out[i] = table[rows[i]]; also serves as token embedding lookup.
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const std::size_t> rows);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);

/// Broadcasts block value s(i, j) over a row_sizes[i] x col_sizes[j] tile.
template <typename T>
Var<T> expand_blocks(Var<T> s, std::span<const std::size_t> row_sizes, std::span<const std::size_t> col_sizes);

/// Row softmax of (logits + bias) over unmasked entries. Masked entries are exactly
/// 0 and receive no gradient; fully masked rows come out as all zeros.
template <typename T>
Var<T> masked_biased_softmax(Var<T> logits, std::optional<Var<T>> bias, const Mask& mask);

/// Per-row -log softmax(logits)[target]; returns a length-T vector (nats).
template <typename T> Var<T> cross_entropy_tokens(Var<T> logits, std::span<const std::size_t> targets);
/// Mean of cross_entropy_tokens.
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> targets);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);

/// Keeps the k largest entries of every row (ties to the lower index), zeroes the rest.
template <typename T> Var<T> topk_rows(Var<T> x, std::size_t k);

} // namespace retrolm::nn
