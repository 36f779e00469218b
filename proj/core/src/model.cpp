// SPDX-License-Identifier: Apache-2.0
#include "retrolm/model.hpp"

#include <algorithm>
#include <cmath>

#include "retrolm/error.hpp"
#include "retrolm/ops.hpp"

namespace retrolm {

using nn::Graph;
using nn::Mask;
using nn::Tensor;
using nn::Var;

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw UsageError("model config: " + msg); };
    if (d_model == 0) fail("d_model must be positive");
    if (n_heads == 0) fail("n_heads must be positive");
    if (d_model % n_heads != 0) fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                                     std::to_string(n_heads) + ")");
    if (d_ff == 0) fail("d_ff must be positive");
    if (encoder_layers < 2 || encoder_layers % 2 != 0) fail("encoder_layers must be even and at least 2");
    if (decoder_layers == 0) fail("decoder_layers must be positive");
    if (vocab < kVocabSize) fail("vocab must be at least " + std::to_string(kVocabSize));
    if (segment_len == 0) fail("segment_len must be positive");
    if (!std::isfinite(beta_init)) fail("beta_init must be finite");
    if (!(output_init_std > 0.0) || !std::isfinite(output_init_std)) fail("output_init_std must be positive");
}

namespace {

template <typename T>
Weights<Tensor<T>> shaped_weights(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab;
    auto w = Weights<Tensor<T>>::with_layers(c.encoder_layers, c.decoder_layers);
    auto norm = [&](LayerNormWeights<Tensor<T>>& n) {
        n.gain = Tensor<T>::vector(d);
        n.shift = Tensor<T>::vector(d);
    };
    auto attn = [&](AttentionWeights<Tensor<T>>& a) {
        a.wq = a.wk = a.wv = a.wo = Tensor<T>::matrix(d, d);
    };
    auto ffn = [&](FeedForwardWeights<Tensor<T>>& x) {
        x.w1 = Tensor<T>::matrix(d, f);
        x.b1 = Tensor<T>::vector(f);
        x.w2 = Tensor<T>::matrix(f, d);
        x.b2 = Tensor<T>::vector(d);
    };
    w.enc_embed = Tensor<T>::matrix(v, d);
    w.dec_embed = Tensor<T>::matrix(v, d);
    for (auto& l : w.encoder) {
        norm(l.attn_norm);
        attn(l.self_attn);
        norm(l.ffn_norm);
        ffn(l.ffn);
    }
    norm(w.enc_norm);
    for (auto& l : w.decoder) {
        norm(l.self_norm);
        attn(l.self_attn);
        norm(l.cross_norm);
        attn(l.cross_attn);
        norm(l.ffn_norm);
        ffn(l.ffn);
    }
    norm(w.dec_norm);
    w.out_w = Tensor<T>::matrix(d, v);
    w.out_b = Tensor<T>::vector(v);
    w.beta = Tensor<T>::vector(1);
    return w;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
Tensor<T> sinusoid(std::size_t len, std::size_t d) {
    Tensor<T> pe = Tensor<T>::matrix(len, d);
    for (std::size_t p = 0; p < len; ++p) {
        for (std::size_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double a = static_cast<double>(p) * rate;
            pe.at(p, i) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
        }
    }
    return pe;
}

/// Stacked token embeddings plus per-sequence positions restarting at 0.
template <typename T>
Var<T> embed_tokens(Graph<T>& g, Var<T> table, const std::vector<std::vector<std::size_t>>& seqs, std::size_t d) {
    std::vector<std::size_t> ids;
    std::size_t longest = 0;
    for (const auto& s : seqs) {
        ids.insert(ids.end(), s.begin(), s.end());
        longest = std::max(longest, s.size());
    }
    const auto table_pe = sinusoid<T>(longest, d);
    Tensor<T> pe = Tensor<T>::matrix(ids.size(), d);
    std::size_t r = 0;
    for (const auto& s : seqs) {
        for (std::size_t p = 0; p < s.size(); ++p, ++r) {
            std::copy(table_pe.row(p).begin(), table_pe.row(p).end(), pe.row(r).begin());
        }
    }
    return nn::add(nn::gather_rows(table, ids), g.constant(std::move(pe)));
}

template <typename T>
Var<T> norm(const LayerNormWeights<Var<T>>& n, Var<T> x) {
    return nn::layer_norm(x, n.gain, n.shift);
}

template <typename T>
Var<T> attention(const AttentionWeights<Var<T>>& w, Var<T> xq, Var<T> xkv, const Mask& mask,
                 std::optional<Var<T>> bias, std::size_t heads) {
    auto q = nn::matmul(xq, w.wq);
    auto k = nn::matmul(xkv, w.wk);
    auto v = nn::matmul(xkv, w.wv);
    const std::size_t d = q.value().cols(), dk = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
    auto head = [&](Var<T> qh, Var<T> kh, Var<T> vh) {
        auto p = nn::masked_biased_softmax(nn::scale(nn::matmul_nt(qh, kh), inv), bias, mask);
        return nn::matmul(p, vh);
    };
    Var<T> o;
    if (heads == 1) {
        o = head(q, k, v);
    } else {
        std::vector<Var<T>> parts;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t b = h * dk, e = b + dk;
            parts.push_back(head(nn::slice_cols(q, b, e), nn::slice_cols(k, b, e), nn::slice_cols(v, b, e)));
        }
        o = nn::concat_cols<T>(parts);
    }
    return nn::matmul(o, w.wo);
}

template <typename T>
Var<T> encoder_layer(const EncoderLayerWeights<Var<T>>& w, Var<T> x, const Mask& mask, std::size_t heads,
                     std::size_t topk) {
    auto h = norm(w.attn_norm, x);
    x = nn::add(x, attention(w.self_attn, h, h, mask, std::optional<Var<T>>{}, heads));
    return nn::add(x, feed_forward(w.ffn, norm(w.ffn_norm, x), topk));
}

std::vector<std::size_t> with_bos(std::span<const Token> tokens) {
    std::vector<std::size_t> out;
    out.reserve(tokens.size() + 1);
    out.push_back(kBos);
    out.insert(out.end(), tokens.begin(), tokens.end());
    return out;
}

void check_tokens(std::span<const Token> tokens, std::size_t vocab, const char* what) {
    for (auto t : tokens) {
        if (t >= vocab) throw RangeError(std::string(what) + ": token id " + std::to_string(t) + " >= vocab");
    }
}

/// Runs the first `layers` encoder layers over [BOS]+seq blocks; returns the stacked states.
template <typename T>
Var<T> run_encoder(const BoundModel<T>& model, const std::vector<std::vector<std::size_t>>& seqs,
                   std::size_t layers, std::size_t topk, std::vector<std::size_t>& offsets, Var<T>* mid = nullptr) {
    const auto& c = *model.config;
    auto& g = model.w.enc_embed.graph();
    std::vector<std::size_t> lengths;
    offsets.clear();
    std::size_t off = 0;
    for (const auto& s : seqs) {
        offsets.push_back(off);
        lengths.push_back(s.size());
        off += s.size();
    }
    const auto mask = nn::block_diagonal_mask(lengths, false);
    auto x = embed_tokens(g, model.w.enc_embed, seqs, c.d_model);
    for (std::size_t l = 0; l < layers; ++l) {
        x = encoder_layer(model.w.encoder[l], x, mask, c.n_heads, topk);
        if (mid && l + 1 == c.embedder_layers()) {
            *mid = nn::l2_normalize_rows(nn::gather_rows(x, offsets));
        }
    }
    return x;
}

} // namespace

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    p.weights = shaped_weights<T>(config);
    return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
    auto p = zeros(config);
    std::uint64_t ordinal = 0;
    p.weights.visit([&](const std::string& name, Tensor<T>& t) {
        Rng rng(Rng::derive(seed, {ordinal++}));
        if (ends_with(name, ".gain")) {
            t.fill(T(1));
        } else if (ends_with(name, ".shift") || ends_with(name, ".b1") || ends_with(name, ".b2") || name == "out_b") {
            t.fill(T(0));
        } else if (name == "beta") {
            t.fill(static_cast<T>(config.beta_init));
        } else {
            double sd = 1.0 / std::sqrt(static_cast<double>(t.rows()));
            if (name == "enc_embed" || name == "dec_embed") sd = 1.0;
            if (name == "out_w") sd = config.output_init_std;
            for (auto& x : t.values()) x = static_cast<T>(sd * rng.normal());
        }
    });
    return p;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    weights.visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab;
    const std::size_t ffn = d * f + f + f * d + d;
    const std::size_t enc = 4 * d + 4 * d * d + ffn;
    const std::size_t dec = 6 * d + 8 * d * d + ffn;
    return 2 * v * d + c.encoder_layers * enc + 2 * d + c.decoder_layers * dec + 2 * d + d * v + v + 1;
}

template <typename T>
BoundModel<T> bind(Graph<T>& graph, const ModelParams<T>& params, bool trainable, bool train_beta) {
    BoundModel<T> m;
    m.config = &params.config;
    m.w = Weights<Var<T>>::with_layers(params.config.encoder_layers, params.config.decoder_layers);
    std::vector<std::pair<std::string, const Tensor<T>*>> src;
    params.weights.visit([&](const std::string& name, const Tensor<T>& t) { src.emplace_back(name, &t); });
    std::size_t i = 0;
    m.w.visit([&](const std::string&, Var<T>& v) {
        const auto& [name, t] = src[i++];
        const bool grad = trainable && (name != "beta" || train_beta);
        v = graph.leaf(*t, grad);
    });
    return m;
}

template <typename T>
Weights<Tensor<T>> gradients(const Graph<T>& graph, const BoundModel<T>& model) {
    auto out = Weights<Tensor<T>>::with_layers(model.w.encoder.size(), model.w.decoder.size());
    std::vector<Var<T>> vars;
    model.w.visit([&](const std::string&, const Var<T>& v) { vars.push_back(v); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Tensor<T>& t) { t = graph.gradient(vars[i++]); });
    return out;
}

template <typename T>
Var<T> feed_forward(const FeedForwardWeights<Var<T>>& w, Var<T> x, std::size_t topk, Var<T>* hidden) {
    auto h = nn::gelu(nn::add_row(nn::matmul(x, w.w1), w.b1));
    if (topk > 0 && topk < h.value().cols()) h = nn::topk_rows(h, topk);
    if (hidden) *hidden = h;
    return nn::add_row(nn::matmul(h, w.w2), w.b2);
}

template <typename T>
Var<T> embed_sequences(const BoundModel<T>& model, std::span<const TokenSeq> seqs, std::size_t ffn_topk) {
    const auto& c = *model.config;
    if (seqs.empty()) throw ShapeError("embed_sequences: no sequences");
    std::vector<std::vector<std::size_t>> ids;
    for (const auto& s : seqs) {
        if (s.size() > c.segment_len) {
            throw ShapeError("embed_sequences: sequence of " + std::to_string(s.size()) + " tokens exceeds segment length " +
                             std::to_string(c.segment_len));
        }
        check_tokens(s, c.vocab, "embed_sequences");
        ids.push_back(with_bos(s));
    }
    std::vector<std::size_t> offsets;
    auto x = run_encoder(model, ids, c.embedder_layers(), ffn_topk, offsets);
    return nn::l2_normalize_rows(nn::gather_rows(x, offsets));
}

template <typename T>
SubBatchOutput<T> forward_subbatch(const BoundModel<T>& model, const SubBatchInput& input,
                                   const ForwardOptions& options) {
    const auto& c = *model.config;
    const std::size_t n = c.segment_len, nt = input.targets.size(), ns = input.sources.size();
    if (nt == 0) throw ShapeError("forward_subbatch: no targets");
    for (const auto& t : input.targets) {
        if (t.size() != n) throw ShapeError("forward_subbatch: target has " + std::to_string(t.size()) + " tokens, expected " + std::to_string(n));
        check_tokens(t, c.vocab, "forward_subbatch");
    }
    for (const auto& s : input.sources) {
        if (s.size() != n) throw ShapeError("forward_subbatch: source has " + std::to_string(s.size()) + " tokens, expected " + std::to_string(n));
        check_tokens(s, c.vocab, "forward_subbatch");
    }
    if (input.mask.rows() != nt || input.mask.cols() != ns) {
        throw ShapeError("forward_subbatch: mask " + std::to_string(input.mask.rows()) + "x" +
                         std::to_string(input.mask.cols()) + " does not match " + std::to_string(nt) + " targets x " +
                         std::to_string(ns) + " sources");
    }
    auto& g = model.w.enc_embed.graph();
    SubBatchOutput<T> out;
    const bool cross = options.cross_attention && ns > 0;

    Var<T> memory;
    Mask cross_mask;
    std::optional<Var<T>> bias;
    if (cross) {
        std::vector<std::vector<std::size_t>> ids;
        for (const auto& s : input.sources) ids.push_back(with_bos(s));
        std::vector<std::size_t> offsets;
        memory = norm(model.w.enc_norm,
                      run_encoder(model, ids, c.encoder_layers, options.ffn_topk, offsets, &out.source_embeddings));
        const std::vector<std::size_t> rows(nt, n), cols(ns, n + 1);
        cross_mask = nn::expand_mask(input.mask, rows, cols);
        if (options.use_bias) {
            if (input.contexts.size() != nt) {
                throw ShapeError("forward_subbatch: " + std::to_string(input.contexts.size()) + " contexts for " +
                                 std::to_string(nt) + " targets");
            }
            for (const auto& q : input.contexts) {
                if (!q.empty() && q.size() != n) throw ShapeError("forward_subbatch: context must be empty or one segment");
            }
            out.query_embeddings = embed_sequences(model, std::span<const TokenSeq>(input.contexts), options.ffn_topk);
            auto sim = nn::matmul_nt(out.query_embeddings, out.source_embeddings);
            bias = nn::expand_blocks(nn::mul_scalar(sim, model.w.beta), rows, cols);
        }
    }

    std::vector<std::vector<std::size_t>> dec_ids;
    std::vector<std::size_t> labels;
    for (const auto& t : input.targets) {
        std::vector<std::size_t> seq{kBos};
        seq.insert(seq.end(), t.begin(), t.end() - 1);
        dec_ids.push_back(std::move(seq));
        labels.insert(labels.end(), t.begin(), t.end());
    }
    const std::vector<std::size_t> lengths(nt, n);
    const auto self_mask = nn::block_diagonal_mask(lengths, true);
    auto x = embed_tokens(g, model.w.dec_embed, dec_ids, c.d_model);
    for (const auto& l : model.w.decoder) {
        auto h = norm(l.self_norm, x);
        x = nn::add(x, attention(l.self_attn, h, h, self_mask, std::optional<Var<T>>{}, c.n_heads));
        if (cross) {
            x = nn::add(x, attention(l.cross_attn, norm(l.cross_norm, x), memory, cross_mask, bias, c.n_heads));
        }
        x = nn::add(x, feed_forward(l.ffn, norm(l.ffn_norm, x), options.ffn_topk));
    }
    auto logits = nn::add_row(nn::matmul(norm(model.w.dec_norm, x), model.w.out_w), model.w.out_b);
    out.token_losses = nn::cross_entropy_tokens(logits, labels);
    out.loss_sum = nn::sum(out.token_losses);
    out.tokens = labels.size();
    return out;
}

template <typename T>
SegmentEmbedding embed_segment(const ModelParams<T>& params, const Segment& segment, std::uint64_t epoch) {
    if (segment.tokens.size() != params.config.segment_len) {
        throw ShapeError("embed_segment: segment has " + std::to_string(segment.tokens.size()) +
                         " tokens, expected " + std::to_string(params.config.segment_len));
    }
    const TokenSeq seqs[1] = {segment.tokens};
    auto e = embed_batch(params, std::span<const TokenSeq>(seqs));
    SegmentEmbedding out;
    out.vector.assign(e.data(), e.data() + e.size());
    out.ref = segment.ref;
    out.epoch = epoch;
    return out;
}

template <typename T>
Tensor<T> embed_batch(const ModelParams<T>& params, std::span<const TokenSeq> seqs, std::size_t chunk) {
    const std::size_t d = params.config.d_model;
    Tensor<T> out = Tensor<T>::matrix(seqs.size(), d);
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t b = 0; b < seqs.size(); b += chunk) {
        const std::size_t e = std::min(seqs.size(), b + chunk);
        Graph<T> g;
        auto model = bind(g, params, false);
        auto v = embed_sequences(model, seqs.subspan(b, e - b));
        std::copy(v.value().data(), v.value().data() + v.value().size(), out.row(b).data());
    }
    return out;
}

template <typename T>
std::vector<double> evaluate_token_losses(const ModelParams<T>& params, const SubBatchInput& input,
                                          const ForwardOptions& options) {
    Graph<T> g;
    auto model = bind(g, params, false);
    auto out = forward_subbatch(model, input, options);
    const auto& v = out.token_losses.value();
    return std::vector<double>(v.data(), v.data() + v.size());
}

Mask causality_mask(std::span<const SegmentRef> sources, std::span<const SegmentRef> targets) {
    Mask m(targets.size(), sources.size());
    for (std::size_t t = 0; t < targets.size(); ++t) {
        for (std::size_t s = 0; s < sources.size(); ++s) {
            m.set(t, s, sources[s].sample == targets[t].sample && sources[s].index >= targets[t].index);
        }
    }
    return m;
}

Mask decoder_self_attention_mask(std::size_t t) {
    const std::size_t len[1] = {t};
    return nn::block_diagonal_mask(len, true);
}

#define RETROLM_INSTANTIATE(T)                                                                                    \
    template struct ModelParams<T>;                                                                               \
    template BoundModel<T> bind(Graph<T>&, const ModelParams<T>&, bool, bool);                                    \
    template Weights<Tensor<T>> gradients(const Graph<T>&, const BoundModel<T>&);                                 \
    template Var<T> feed_forward(const FeedForwardWeights<Var<T>>&, Var<T>, std::size_t, Var<T>*);                \
    template Var<T> embed_sequences(const BoundModel<T>&, std::span<const TokenSeq>, std::size_t);                \
    template SubBatchOutput<T> forward_subbatch(const BoundModel<T>&, const SubBatchInput&, const ForwardOptions&); \
    template SegmentEmbedding embed_segment(const ModelParams<T>&, const Segment&, std::uint64_t);                \
    template Tensor<T> embed_batch(const ModelParams<T>&, std::span<const TokenSeq>, std::size_t);                \
    template std::vector<double> evaluate_token_losses(const ModelParams<T>&, const SubBatchInput&,               \
                                                       const ForwardOptions&);

RETROLM_INSTANTIATE(float)
RETROLM_INSTANTIATE(double)

} // namespace retrolm
