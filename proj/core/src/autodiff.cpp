// SPDX-License-Identifier: Apache-2.0
#include "retrolm/autodiff.hpp"

#include <string>

#include "retrolm/error.hpp"

namespace retrolm::nn {

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = "leaf";
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward, const char* op) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward), op);
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward, const char* op) {
    if (check_finite_ && !value.all_finite()) {
        throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
    bool needs = false;
    for (const auto& in : inputs) {
        if (&in.graph() != this) throw UsageError(std::string("op '") + op + "' mixes variables from different graphs");
        needs = needs || nodes_[in.id()].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Tensor<T>(n.value.shape(), T{0});
        n.has_grad = true;
    }
    return n.grad;
}

template <typename T>
const Tensor<T>* Graph<T>::grad_if(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.has_grad ? &n.grad : nullptr;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
    if (&loss.graph() != this) throw UsageError("backward: loss belongs to a different graph");
    if (nodes_[loss.id()].value.size() != 1) {
        throw UsageError("backward: loss must be a scalar, got shape " + shape_string(nodes_[loss.id()].value.shape()));
    }
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (n.has_grad && n.backward) n.backward(*this, i);
    }
}

template <typename T>
Tensor<T> Graph<T>::gradient(Var<T> v) const {
    const auto& n = nodes_[v.id()];
    if (n.has_grad) return n.grad;
    return Tensor<T>(n.value.shape(), T{0});
}

template class Graph<float>;
template class Graph<double>;

} // namespace retrolm::nn
