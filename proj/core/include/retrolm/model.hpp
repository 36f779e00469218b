// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder transformer with a retrieval-coupled cross-attention bias.
//
// The first half of the encoder doubles as the segment embedder: its residual
// state at the BOS slot, L2-normalised, is e(.). Cross-attention logits from a
// target token to every token of source z_i get the additive term
// beta * e(q_j) . e(z_i), where q_j is the target's causal context (the
// preceding segment of the same sample, or BOS alone for a sample's first
// segment). The softmax runs over all tokens of all sources in the sub-batch,
// minus those the segment-level causality mask excludes.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retrolm/autodiff.hpp"
#include "retrolm/corpus.hpp"
#include "retrolm/rng.hpp"
#include "retrolm/tensor.hpp"

namespace retrolm {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t n_heads = 4;
    std::size_t encoder_layers = 2;  // must be even; the embedder is the first half
    std::size_t decoder_layers = 2;
    std::size_t vocab = kVocabSize;
    std::size_t segment_len = 32;
    double beta_init = 1.0;
    double output_init_std = 0.02;

    std::size_t d_k() const noexcept { return n_heads ? d_model / n_heads : 0; }
    std::size_t embedder_layers() const noexcept { return encoder_layers / 2; }
    /// Throws UsageError naming the first violated invariant.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

template <typename L>
struct LayerNormWeights {
    L gain, shift;
};

template <typename L>
struct AttentionWeights {
    L wq, wk, wv, wo;
};

template <typename L>
struct FeedForwardWeights {
    L w1, b1, w2, b2;
};

template <typename L>
struct EncoderLayerWeights {
    LayerNormWeights<L> attn_norm;
    AttentionWeights<L> self_attn;
    LayerNormWeights<L> ffn_norm;
    FeedForwardWeights<L> ffn;
};

template <typename L>
struct DecoderLayerWeights {
    LayerNormWeights<L> self_norm;
    AttentionWeights<L> self_attn;
    LayerNormWeights<L> cross_norm;
    AttentionWeights<L> cross_attn;
    LayerNormWeights<L> ffn_norm;
    FeedForwardWeights<L> ffn;
};

/// Every weight of the model, generic over the leaf type (tensors, graph variables).
template <typename L>
struct Weights {
    L enc_embed, dec_embed;
    std::vector<EncoderLayerWeights<L>> encoder;
    LayerNormWeights<L> enc_norm;
    std::vector<DecoderLayerWeights<L>> decoder;
    LayerNormWeights<L> dec_norm;
    L out_w, out_b;
    L beta;

    static Weights with_layers(std::size_t encoder_layers, std::size_t decoder_layers) {
        Weights w;
        w.encoder.resize(encoder_layers);
        w.decoder.resize(decoder_layers);
        return w;
    }

    /// Calls f(name, leaf) in a fixed order; checkpoints and optimizers rely on it.
    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& s, F& f) {
        auto norm = [&](const std::string& p, auto& n) {
            f(p + ".gain", n.gain);
            f(p + ".shift", n.shift);
        };
        auto attn = [&](const std::string& p, auto& a) {
            f(p + ".wq", a.wq);
            f(p + ".wk", a.wk);
            f(p + ".wv", a.wv);
            f(p + ".wo", a.wo);
        };
        auto ffn = [&](const std::string& p, auto& w) {
            f(p + ".w1", w.w1);
            f(p + ".b1", w.b1);
            f(p + ".w2", w.w2);
            f(p + ".b2", w.b2);
        };
        f(std::string("enc_embed"), s.enc_embed);
        f(std::string("dec_embed"), s.dec_embed);
        for (std::size_t i = 0; i < s.encoder.size(); ++i) {
            const std::string p = "encoder." + std::to_string(i);
            norm(p + ".attn_norm", s.encoder[i].attn_norm);
            attn(p + ".self_attn", s.encoder[i].self_attn);
            norm(p + ".ffn_norm", s.encoder[i].ffn_norm);
            ffn(p + ".ffn", s.encoder[i].ffn);
        }
        norm("enc_norm", s.enc_norm);
        for (std::size_t i = 0; i < s.decoder.size(); ++i) {
            const std::string p = "decoder." + std::to_string(i);
            norm(p + ".self_norm", s.decoder[i].self_norm);
            attn(p + ".self_attn", s.decoder[i].self_attn);
            norm(p + ".cross_norm", s.decoder[i].cross_norm);
            attn(p + ".cross_attn", s.decoder[i].cross_attn);
            norm(p + ".ffn_norm", s.decoder[i].ffn_norm);
            ffn(p + ".ffn", s.decoder[i].ffn);
        }
        norm("dec_norm", s.dec_norm);
        f(std::string("out_w"), s.out_w);
        f(std::string("out_b"), s.out_b);
        f(std::string("beta"), s.beta);
    }
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    Weights<nn::Tensor<T>> weights;

    /// Linear weights ~ N(0, 1/fan_in), token embeddings ~ N(0, 1), output
    /// projection ~ N(0, output_init_std), norms at identity, beta = beta_init.
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
    /// Zero-valued tensors with this model's shapes.
    static ModelParams zeros(const ModelConfig& config);

    std::size_t parameter_count() const;
    T beta() const { return weights.beta[0]; }

    template <typename U>
    ModelParams<U> cast() const {
        auto out = ModelParams<U>::zeros(config);
        std::vector<const nn::Tensor<T>*> src;
        weights.visit([&](const std::string&, const nn::Tensor<T>& t) { src.push_back(&t); });
        std::size_t i = 0;
        out.weights.visit([&](const std::string&, nn::Tensor<U>& t) { t = src[i++]->template cast<U>(); });
        return out;
    }
};

std::size_t expected_parameter_count(const ModelConfig& config);

/// Tokens for one forward pass over a sub-batch. `mask` is targets x sources,
/// true = the source is hidden from that target.
struct SubBatchInput {
    std::vector<TokenSeq> sources;
    std::vector<TokenSeq> targets;
    std::vector<TokenSeq> contexts;  // per target: preceding segment, or empty
    nn::Mask mask;
};

struct ForwardOptions {
    bool use_bias = true;          // false drops the beta * e.e term entirely
    bool cross_attention = true;   // false forces cross-attention output to zero
    std::size_t ffn_topk = 0;      // 0 = dense FFN; else keep top-k hidden units per token
};

template <typename T>
struct BoundModel {
    const ModelConfig* config = nullptr;
    Weights<nn::Var<T>> w;
};

/// Registers every weight as a graph leaf. `train_beta = false` freezes beta.
template <typename T>
BoundModel<T> bind(nn::Graph<T>& graph, const ModelParams<T>& params, bool trainable = true, bool train_beta = true);

/// Gradients of every bound weight after graph.backward().
template <typename T>
Weights<nn::Tensor<T>> gradients(const nn::Graph<T>& graph, const BoundModel<T>& model);

template <typename T>
struct SubBatchOutput {
    nn::Var<T> token_losses;      // (targets * N), row-major by target
    nn::Var<T> loss_sum;          // scalar
    nn::Var<T> query_embeddings;  // targets x d, valid when the bias is active
    nn::Var<T> source_embeddings; // sources x d, valid when cross-attention runs
    std::size_t tokens = 0;
};

template <typename T>
SubBatchOutput<T> forward_subbatch(const BoundModel<T>& model, const SubBatchInput& input,
                                   const ForwardOptions& options = {});

/// Unit-norm embeddings of [BOS] + seq for each sequence (length 0..N), as rows.
template <typename T>
nn::Var<T> embed_sequences(const BoundModel<T>& model, std::span<const TokenSeq> seqs, std::size_t ffn_topk = 0);

struct SegmentEmbedding {
    std::vector<float> vector;
    SegmentRef ref;
    std::uint64_t epoch = 0;
};

/// Embeds one segment of exactly N tokens. Throws ShapeError otherwise.
template <typename T>
SegmentEmbedding embed_segment(const ModelParams<T>& params, const Segment& segment, std::uint64_t epoch = 0);

/// Gradient-free batched embedding; rows follow `seqs`. Sequences may be empty
/// (the BOS-only context) or exactly N tokens.
template <typename T>
nn::Tensor<T> embed_batch(const ModelParams<T>& params, std::span<const TokenSeq> seqs, std::size_t chunk = 64);

/// Source (s, u) is masked for target (s, v) iff same sample and u >= v. Rows are targets.
nn::Mask causality_mask(std::span<const SegmentRef> sources, std::span<const SegmentRef> targets);
/// Token-level lower-triangular mask of size t x t.
nn::Mask decoder_self_attention_mask(std::size_t t);

/// Position-wise FFN on already-normalised rows; with topk > 0 every row keeps only
/// its k largest post-activation hidden units. `hidden` receives the (masked) activations.
template <typename T>
nn::Var<T> feed_forward(const FeedForwardWeights<nn::Var<T>>& w, nn::Var<T> x, std::size_t topk,
                        nn::Var<T>* hidden = nullptr);

/// Evaluation helper: per-target-token losses of one sub-batch, no gradients.
template <typename T>
std::vector<double> evaluate_token_losses(const ModelParams<T>& params, const SubBatchInput& input,
                                          const ForwardOptions& options = {});

} // namespace retrolm
