// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "retrolm/tensor.hpp"

namespace retrolm::nn {

/// A parameter tensor (perturbed in place) and its analytic gradient.
struct GradCheckParam {
    std::string name;
    Tensor<double>* value = nullptr;
    const Tensor<double>* analytic = nullptr;
    std::vector<std::size_t> indices;  // flat element indices to check; empty = every element
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

/// Compares analytic gradients against central differences (f(x+h) - f(x-h)) / 2h.
/// Relative error is |a - n| / max(|a|, |n|, abs_floor); the floor keeps
/// round-off on near-zero gradients from dominating.
GradCheckReport grad_check(const std::function<double()>& loss, std::span<const GradCheckParam> params, double h,
                           double tol, double abs_floor = 1e-6);

} // namespace retrolm::nn
