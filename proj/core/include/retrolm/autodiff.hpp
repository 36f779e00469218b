// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape. Nodes are appended in execution order, so the recording
// order is a topological order and backward() is a single reverse sweep.
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>

#include "retrolm/tensor.hpp"

namespace retrolm::nn {

template <typename T>
class Graph;

template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

    bool valid() const noexcept { return graph_ != nullptr; }
    Graph<T>& graph() const noexcept { return *graph_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor<T>& value() const;
    bool requires_grad() const;

private:
    Graph<T>* graph_ = nullptr;
    std::size_t id_ = 0;
};

template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Parameter leaf; receives a gradient when `requires_grad`.
    Var<T> leaf(Tensor<T> value, bool requires_grad = true);
    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    /// Appends an op output. `backward` is dropped when no input requires a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward, const char* op);
    Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward, const char* op);

    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Gradient accumulator for a node, zero-initialised on first use.
    Tensor<T>& grad_buffer(std::size_t id);
    /// Upstream gradient of `id` during backward; nullptr when nothing flowed into it.
    const Tensor<T>* grad_if(std::size_t id) const;

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Loss must be scalar.
    void backward(Var<T> loss);
    /// Gradient of a node after backward(); zeros when it did not participate.
    Tensor<T> gradient(Var<T> v) const;

    std::size_t size() const noexcept { return nodes_.size(); }

    /// When set (the default) every op output is checked for NaN/Inf.
    void set_check_finite(bool on) noexcept { check_finite_ = on; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
        const char* op = "";
    };

    std::deque<Node> nodes_;
    bool check_finite_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return graph_->requires_grad(id_);
}

extern template class Graph<float>;
extern template class Graph<double>;

} // namespace retrolm::nn
