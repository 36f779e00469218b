// SPDX-License-Identifier: Apache-2.0
#include "retrolm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "retrolm/error.hpp"

namespace retrolm::nn {

namespace {

// C[m x n] += A[m x k] . B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            if (av == T{0}) continue;
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x n] += A^T . B with A[k x m], B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* ap = a + p * m;
        const T* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = ap[i];
            if (av == T{0}) continue;
            T* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x n] += A[m x k] . B^T with B[n x k]
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_nn(m, n, k, a, bt.data(), c);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

template <typename T>
Shape matrix_shape(const Tensor<T>& like, std::size_t rows, std::size_t cols) {
    if (like.rank() == 1 && rows == 1) return {cols};
    return {rows, cols};
}

} // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (bv.rows() != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
    }
    Tensor<T> out(matrix_shape(av, m, n));
    gemm_nn(m, n, k, av.data(), bv.data(), out.data());
    const auto ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {a, b}, [ia, ib, m, n, k](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        if (g.requires_grad(ia)) gemm_nt(m, k, n, go.data(), g.value(ib).data(), g.grad_buffer(ia).data());
        if (g.requires_grad(ib)) gemm_tn(k, n, m, g.value(ia).data(), go.data(), g.grad_buffer(ib).data());
    }, "matmul");
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    if (bv.cols() != k) {
        throw ShapeError("matmul_nt: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()) + "^T");
    }
    Tensor<T> out(Shape{m, n});
    gemm_nt(m, n, k, av.data(), bv.data(), out.data());
    const auto ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {a, b}, [ia, ib, m, n, k](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        if (g.requires_grad(ia)) gemm_nn(m, k, n, go.data(), g.value(ib).data(), g.grad_buffer(ia).data());
        if (g.requires_grad(ib)) gemm_tn(n, k, m, go.data(), g.value(ia).data(), g.grad_buffer(ib).data());
    }, "matmul_nt");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const auto ia = a.id(), ib = b.id();
    return a.graph().record(std::move(out), {a, b}, [ia, ib](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        for (auto id : {ia, ib}) {
            if (!g.requires_grad(id)) continue;
            auto& gi = g.grad_buffer(id);
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        }
    }, "add");
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
    const auto& av = a.value();
    const auto& bv = bias.value();
    const std::size_t m = av.rows(), n = av.cols();
    if (bv.size() != n) {
        throw ShapeError("add_row: bias " + shape_string(bv.shape()) + " does not match " + shape_string(av.shape()));
    }
    Tensor<T> out = av;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bv[j];
    const auto ia = a.id(), ib = bias.id();
    return a.graph().record(std::move(out), {a, bias}, [ia, ib, m, n](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        if (g.requires_grad(ia)) {
            auto& ga = g.grad_buffer(ia);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (g.requires_grad(ib)) {
            auto& gb = g.grad_buffer(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
        }
    }, "add_row");
}

template <typename T>
Var<T> scale(Var<T> a, double c) {
    Tensor<T> out = a.value();
    const T cv = static_cast<T>(c);
    for (auto& v : out.values()) v *= cv;
    const auto ia = a.id();
    return a.graph().record(std::move(out), {a}, [ia, cv](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        auto& ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += cv * go[i];
    }, "scale");
}

template <typename T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
    if (s.value().size() != 1) throw ShapeError("mul_scalar: scalar operand has shape " + shape_string(s.value().shape()));
    const T sv = s.value()[0];
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= sv;
    const auto ia = a.id(), is = s.id();
    return a.graph().record(std::move(out), {a, s}, [ia, is](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        const auto& av = g.value(ia);
        const T sv = g.value(is)[0];
        if (g.requires_grad(ia)) {
            auto& ga = g.grad_buffer(ia);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += sv * go[i];
        }
        if (g.requires_grad(is)) {
            T acc{0};
            for (std::size_t i = 0; i < go.size(); ++i) acc += av[i] * go[i];
            g.grad_buffer(is)[0] += acc;
        }
    }, "mul_scalar");
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = v > T{0} ? v : T{0};
    const auto ia = a.id();
    return a.graph().record(std::move(out), {a}, [ia](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        const auto& x = g.value(ia);
        auto& ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < go.size(); ++i) {
            if (x[i] > T{0}) ga[i] += go[i];
        }
    }, "relu");
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

template <typename T>
Var<T> gelu(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) {
        const T x = v;
        const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
        v = T{0.5} * x * (T{1} + std::tanh(u));
    }
    const auto ia = a.id();
    return a.graph().record(std::move(out), {a}, [ia](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        const auto& xs = g.value(ia);
        auto& ga = g.grad_buffer(ia);
        for (std::size_t i = 0; i < go.size(); ++i) {
            const T x = xs[i];
            const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
            const T t = std::tanh(u);
            const T du = static_cast<T>(kGeluC) * (T{1} + T{3} * static_cast<T>(kGeluA) * x * x);
            ga[i] += go[i] * (T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * du);
        }
    }, "gelu");
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, double eps) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), d = xv.cols();
    if (d == 0) throw ShapeError("layer_norm: feature dimension must be >= 1");
    if (gain.value().size() != d || shift.value().size() != d) {
        throw ShapeError("layer_norm: affine parameters do not match feature dimension " + std::to_string(d));
    }
    Tensor<T> out(xv.shape());
    std::vector<T> xhat(m * d);
    std::vector<T> rstd(m);
    const auto& gv = gain.value();
    const auto& sv = shift.value();
    for (std::size_t i = 0; i < m; ++i) {
        auto row = xv.row(i);
        T mu{0};
        for (auto v : row) mu += v;
        mu /= static_cast<T>(d);
        T var{0};
        for (auto v : row) var += (v - mu) * (v - mu);
        var /= static_cast<T>(d);
        const T r = T{1} / std::sqrt(var + static_cast<T>(eps));
        rstd[i] = r;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mu) * r;
            xhat[i * d + j] = h;
            out.at(i, j) = gv[j] * h + sv[j];
        }
    }
    const auto ix = x.id(), ig = gain.id(), is = shift.id();
    return x.graph().record(
        std::move(out), {x, gain, shift},
        [ix, ig, is, m, d, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& g, std::size_t self) {
            const auto& go = *g.grad_if(self);
            const auto& gv = g.value(ig);
            if (g.requires_grad(ig)) {
                auto& gg = g.grad_buffer(ig);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += go[i * d + j] * xhat[i * d + j];
            }
            if (g.requires_grad(is)) {
                auto& gs = g.grad_buffer(is);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) gs[j] += go[i * d + j];
            }
            if (g.requires_grad(ix)) {
                auto& gx = g.grad_buffer(ix);
                std::vector<T> dh(d);
                for (std::size_t i = 0; i < m; ++i) {
                    T mean_dh{0}, mean_dh_h{0};
                    for (std::size_t j = 0; j < d; ++j) {
                        dh[j] = go[i * d + j] * gv[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * xhat[i * d + j];
                    }
                    mean_dh /= static_cast<T>(d);
                    mean_dh_h /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        gx[i * d + j] += rstd[i] * (dh[j] - mean_dh - xhat[i * d + j] * mean_dh_h);
                    }
                }
            }
        },
        "layer_norm");
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> x) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), d = xv.cols();
    Tensor<T> out(xv.shape());
    std::vector<T> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        T ss{0};
        for (auto v : xv.row(i)) ss += v * v;
        const T nrm = std::sqrt(ss);
        if (!(nrm > T{0})) throw NumericError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
        norms[i] = nrm;
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) / nrm;
    }
    const auto ix = x.id();
    return x.graph().record(std::move(out), {x}, [ix, m, d, norms = std::move(norms)](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        const auto& y = g.value(self);
        auto& gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i) {
            T dot{0};
            for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * go[i * d + j];
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += (go[i * d + j] - y[i * d + j] * dot) / norms[i];
        }
    }, "l2_normalize_rows");
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> rows) {
    const auto& tv = table.value();
    const std::size_t d = tv.cols();
    Tensor<T> out(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= tv.rows()) {
            throw RangeError("gather_rows: index " + std::to_string(rows[i]) + " out of range for " +
                             std::to_string(tv.rows()) + " rows");
        }
        std::copy_n(tv.data() + rows[i] * d, d, out.data() + i * d);
    }
    const auto it = table.id();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return table.graph().record(std::move(out), {table}, [it, d, idx = std::move(idx)](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        auto& gt = g.grad_buffer(it);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += go[i * d + j];
    }, "gather_rows");
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    if (begin > end || end > n) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_string(xv.shape()));
    }
    const std::size_t w = end - begin;
    Tensor<T> out(Shape{m, w});
    for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data() + i * n + begin, w, out.data() + i * w);
    const auto ix = x.id();
    return x.graph().record(std::move(out), {x}, [ix, m, n, begin, w](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        auto& gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += go[i * w + j];
    }, "slice_cols");
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].value().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.value().rows() != m) throw ShapeError("concat_cols: row counts differ");
        widths.push_back(p.value().cols());
        total += widths.back();
    }
    Tensor<T> out(Shape{m, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].value();
        for (std::size_t i = 0; i < m; ++i) std::copy_n(pv.data() + i * widths[k], widths[k], out.data() + i * total + off);
        off += widths[k];
    }
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    return parts[0].graph().record(std::move(out), parts,
        [ids = std::move(ids), widths = std::move(widths), m, total](Graph<T>& g, std::size_t self) {
            const auto& go = *g.grad_if(self);
            std::size_t off = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (g.requires_grad(ids[k])) {
                    auto& gp = g.grad_buffer(ids[k]);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += go[i * total + off + j];
                }
                off += widths[k];
            }
        },
        "concat_cols");
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts[0].value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.value().cols() != n) throw ShapeError("concat_rows: column counts differ");
        rows += p.value().rows();
    }
    Tensor<T> out(Shape{rows, n});
    std::size_t off = 0;
    std::vector<std::size_t> ids, sizes;
    for (const auto& p : parts) {
        const auto& pv = p.value();
        std::copy_n(pv.data(), pv.size(), out.data() + off);
        off += pv.size();
        ids.push_back(p.id());
        sizes.push_back(pv.size());
    }
    return parts[0].graph().record(std::move(out), parts,
        [ids = std::move(ids), sizes = std::move(sizes)](Graph<T>& g, std::size_t self) {
            const auto& go = *g.grad_if(self);
            std::size_t off = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (g.requires_grad(ids[k])) {
                    auto& gp = g.grad_buffer(ids[k]);
                    for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += go[off + i];
                }
                off += sizes[k];
            }
        },
        "concat_rows");
}

template <typename T>
Var<T> expand_blocks(Var<T> s, std::span<const std::size_t> row_sizes, std::span<const std::size_t> col_sizes) {
    const auto& sv = s.value();
    if (sv.rows() != row_sizes.size() || sv.cols() != col_sizes.size()) {
        throw ShapeError("expand_blocks: block matrix " + shape_string(sv.shape()) + " does not match " +
                         std::to_string(row_sizes.size()) + "x" + std::to_string(col_sizes.size()) + " tiling");
    }
    std::vector<std::size_t> row_block, col_block;
    for (std::size_t i = 0; i < row_sizes.size(); ++i) row_block.insert(row_block.end(), row_sizes[i], i);
    for (std::size_t j = 0; j < col_sizes.size(); ++j) col_block.insert(col_block.end(), col_sizes[j], j);
    const std::size_t rows = row_block.size(), cols = col_block.size(), q = sv.cols();
    Tensor<T> out(Shape{rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = sv[row_block[r] * q + col_block[c]];
    const auto is = s.id();
    return s.graph().record(std::move(out), {s},
        [is, q, row_block = std::move(row_block), col_block = std::move(col_block)](Graph<T>& g, std::size_t self) {
            const auto& go = *g.grad_if(self);
            auto& gs = g.grad_buffer(is);
            const std::size_t cols = col_block.size();
            for (std::size_t r = 0; r < row_block.size(); ++r)
                for (std::size_t c = 0; c < cols; ++c) gs[row_block[r] * q + col_block[c]] += go[r * cols + c];
        },
        "expand_blocks");
}

template <typename T>
Var<T> masked_biased_softmax(Var<T> logits, std::optional<Var<T>> bias, const Mask& mask) {
    const auto& lv = logits.value();
    const std::size_t m = lv.rows(), n = lv.cols();
    if (mask.rows() != m || mask.cols() != n) {
        throw ShapeError("masked_biased_softmax: mask " + std::to_string(mask.rows()) + "x" +
                         std::to_string(mask.cols()) + " does not match logits " + shape_string(lv.shape()));
    }
    if (bias && bias->value().shape() != lv.shape()) {
        throw ShapeError("masked_biased_softmax: bias " + shape_string(bias->value().shape()) +
                         " does not match logits " + shape_string(lv.shape()));
    }
    const T* bv = bias ? bias->value().data() : nullptr;
    Tensor<T> out(lv.shape());
    for (std::size_t i = 0; i < m; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = i * n + j;
            if (std::isnan(lv[k]) || (bv && std::isnan(bv[k]))) {
                throw NumericError("masked_biased_softmax: NaN input at (" + std::to_string(i) + ", " +
                                   std::to_string(j) + ")");
            }
            if (mask.masked(i, j)) continue;
            const T z = bv ? lv[k] + bv[k] : lv[k];
            mx = any ? std::max(mx, z) : z;
            any = true;
        }
        if (!any) continue;
        T denom{0};
        for (std::size_t j = 0; j < n; ++j) {
            if (mask.masked(i, j)) continue;
            const std::size_t k = i * n + j;
            const T e = std::exp((bv ? lv[k] + bv[k] : lv[k]) - mx);
            out[k] = e;
            denom += e;
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= denom;
    }
    const auto il = logits.id();
    const std::size_t ib = bias ? bias->id() : il;
    const bool has_bias = bias.has_value();
    auto backward = [il, ib, has_bias, m, n](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        const auto& p = g.value(self);
        std::vector<T> dz(n);
        T* gl = g.requires_grad(il) ? g.grad_buffer(il).data() : nullptr;
        T* gb = has_bias && g.requires_grad(ib) ? g.grad_buffer(ib).data() : nullptr;
        for (std::size_t i = 0; i < m; ++i) {
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += p[i * n + j] * go[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t k = i * n + j;
                // Masked entries have p == 0 exactly, so they receive exactly zero.
                const T d = p[k] * (go[k] - dot);
                if (gl) gl[k] += d;
                if (gb) gb[k] += d;
            }
        }
    };
    if (bias) return logits.graph().record(std::move(out), {logits, *bias}, std::move(backward), "masked_biased_softmax");
    return logits.graph().record(std::move(out), {logits}, std::move(backward), "masked_biased_softmax");
}

template <typename T>
Var<T> cross_entropy_tokens(Var<T> logits, std::span<const std::size_t> targets) {
    const auto& lv = logits.value();
    const std::size_t rows = lv.rows(), v = lv.cols();
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                         " rows");
    }
    Tensor<T> probs(Shape{rows, v});
    Tensor<T> out(Shape{rows});
    for (std::size_t i = 0; i < rows; ++i) {
        if (targets[i] >= v) {
            throw RangeError("cross_entropy: target id " + std::to_string(targets[i]) + " >= vocabulary size " +
                             std::to_string(v));
        }
        auto row = lv.row(i);
        for (auto x : row) {
            if (std::isnan(x)) throw NumericError("cross_entropy: NaN logit in row " + std::to_string(i));
        }
        const T mx = *std::max_element(row.begin(), row.end());
        T denom{0};
        for (std::size_t j = 0; j < v; ++j) {
            const T e = std::exp(row[j] - mx);
            probs.at(i, j) = e;
            denom += e;
        }
        for (std::size_t j = 0; j < v; ++j) probs.at(i, j) /= denom;
        out[i] = std::log(denom) + mx - row[targets[i]];
    }
    const auto il = logits.id();
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return logits.graph().record(std::move(out), {logits},
        [il, v, tg = std::move(tg), probs = std::move(probs)](Graph<T>& g, std::size_t self) {
            const auto& go = *g.grad_if(self);
            auto& gl = g.grad_buffer(il);
            for (std::size_t i = 0; i < tg.size(); ++i) {
                const T w = go[i];
                if (w == T{0}) continue;
                for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += w * probs.at(i, j);
                gl[i * v + tg[i]] -= w;
            }
        },
        "cross_entropy");
}

template <typename T>
Var<T> sum(Var<T> x) {
    T acc{0};
    for (auto v : x.value().values()) acc += v;
    const auto ix = x.id();
    return x.graph().record(Tensor<T>::scalar(acc), {x}, [ix](Graph<T>& g, std::size_t self) {
        const T go = (*g.grad_if(self))[0];
        auto& gx = g.grad_buffer(ix);
        for (auto& v : gx.values()) v += go;
    }, "sum");
}

template <typename T>
Var<T> mean(Var<T> x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw ShapeError("mean: empty input");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> targets) {
    return mean(cross_entropy_tokens(logits, targets));
}

template <typename T>
Var<T> topk_rows(Var<T> x, std::size_t k) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    if (k == 0 || k > n) throw UsageError("topk_rows: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    Tensor<T> out(xv.shape(), T{0});
    std::vector<std::uint8_t> keep(m * n, 0);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        auto row = xv.row(i);
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(),
                         [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
        for (std::size_t t = 0; t < k; ++t) {
            keep[i * n + idx[t]] = 1;
            out[i * n + idx[t]] = row[idx[t]];
        }
    }
    const auto ix = x.id();
    return x.graph().record(std::move(out), {x}, [ix, keep = std::move(keep)](Graph<T>& g, std::size_t self) {
        const auto& go = *g.grad_if(self);
        auto& gx = g.grad_buffer(ix);
        for (std::size_t i = 0; i < keep.size(); ++i) {
            if (keep[i]) gx[i] += go[i];
        }
    }, "topk_rows");
}

#define RETROLM_INSTANTIATE_OPS(T)                                                                        \
    template Var<T> matmul(Var<T>, Var<T>);                                                               \
    template Var<T> matmul_nt(Var<T>, Var<T>);                                                            \
    template Var<T> add(Var<T>, Var<T>);                                                                  \
    template Var<T> add_row(Var<T>, Var<T>);                                                              \
    template Var<T> scale(Var<T>, double);                                                                \
    template Var<T> mul_scalar(Var<T>, Var<T>);                                                           \
    template Var<T> relu(Var<T>);                                                                         \
    template Var<T> gelu(Var<T>);                                                                         \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, double);                                           \
    template Var<T> l2_normalize_rows(Var<T>);                                                            \
    template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                                    \
    template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                         \
    template Var<T> concat_cols(std::span<const Var<T>>);                                                 \
    template Var<T> concat_rows(std::span<const Var<T>>);                                                 \
    template Var<T> expand_blocks(Var<T>, std::span<const std::size_t>, std::span<const std::size_t>);    \
    template Var<T> masked_biased_softmax(Var<T>, std::optional<Var<T>>, const Mask&);                    \
    template Var<T> cross_entropy_tokens(Var<T>, std::span<const std::size_t>);                           \
    template Var<T> cross_entropy(Var<T>, std::span<const std::size_t>);                                  \
    template Var<T> sum(Var<T>);                                                                          \
    template Var<T> mean(Var<T>);                                                                         \
    template Var<T> topk_rows(Var<T>, std::size_t);

RETROLM_INSTANTIATE_OPS(float)
RETROLM_INSTANTIATE_OPS(double)

#undef RETROLM_INSTANTIATE_OPS

} // namespace retrolm::nn
