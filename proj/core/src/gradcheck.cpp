// SPDX-License-Identifier: Apache-2.0
#include "retrolm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "retrolm/error.hpp"

namespace retrolm::nn {

GradCheckReport grad_check(const std::function<double()>& loss, std::span<const GradCheckParam> params, double h,
                           double tol, double abs_floor) {
    GradCheckReport report;
    report.tolerance = tol;
    for (const auto& p : params) {
        if (!p.value || !p.analytic || p.value->shape() != p.analytic->shape()) {
            throw ShapeError("grad_check: parameter '" + p.name + "' has no matching analytic gradient");
        }
        GradCheckEntry e;
        e.name = p.name;
        auto& x = *p.value;
        const std::size_t count = p.indices.empty() ? x.size() : p.indices.size();
        for (std::size_t c = 0; c < count; ++c) {
            const std::size_t i = p.indices.empty() ? c : p.indices[c];
            if (i >= x.size()) throw ShapeError("grad_check: index out of range for '" + p.name + "'");
            const double orig = x[i];
            x[i] = orig + h;
            const double up = loss();
            x[i] = orig - h;
            const double down = loss();
            x[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = (*p.analytic)[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel > e.max_rel_error || e.checked == 0) {
                e.max_rel_error = rel;
                e.worst_index = i;
                e.analytic_at_worst = analytic;
                e.numeric_at_worst = numeric;
            }
            ++e.checked;
        }
        report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
        report.entries.push_back(std::move(e));
    }
    report.passed = report.max_rel_error < tol;
    return report;
}

} // namespace retrolm::nn
