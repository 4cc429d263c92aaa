// Copyright 2026 MATE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy dual encoders sharing the production contract: the acoustic encoder
// maps a feature sequence to a per-frame embedding sequence which is pooled
// by attentive statistics; the text encoder embeds phoneme ids and average
// pools. Both sides emit l2-normalized D-dim utterance embeddings.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mate/error.hpp"
#include "mate/rng.hpp"
#include "mate/tensor.hpp"

namespace mate {

struct EncoderDims {
    std::size_t feat_dim = 20;       // F
    std::size_t hidden_dim = 32;     // H
    std::size_t embed_dim = 64;      // D
    std::size_t phoneme_count = 40;  // P
};

/// Variable-length acoustic input, one row of features per frame.
struct FeatureSequence {
    Tensor frames;  // T_a x F
    std::size_t length() const { return frames.rows(); }
};

/// Phoneme-id input for the text encoder.
struct TokenSequence {
    std::vector<std::size_t> tokens;

    bool operator==(const TokenSequence& other) const = default;
};

/// Full-dimension normalized utterance embeddings for one (audio, text) pair.
struct EmbeddingPair {
    Tensor audio;       // u_a, unit norm
    Tensor text;        // u_t, unit norm
    int keyword_label;  // y
};

struct EncoderParams {
    EncoderDims dims;

    Tensor a_frame_w;  // F x H frame projection
    Tensor a_frame_b;  // H
    Tensor a_mix_w;    // H x H causal state mixing
    Tensor a_out_w;    // H x D
    Tensor a_out_b;    // D
    Tensor a_attn_w;   // D pooling attention scorer
    Tensor a_pool_w;   // 2D x D pooling projection
    Tensor a_pool_b;   // D
    Tensor t_embed;    // P x H phoneme embedding table
    Tensor t_out_w;    // H x D
    Tensor t_out_b;    // D

    /// Named parameter blocks in a fixed order; the checkpoint layout and
    /// the optimizer state both follow this order.
    std::vector<std::pair<std::string, Tensor*>> blocks() {
        return {{"a_frame_w", &a_frame_w}, {"a_frame_b", &a_frame_b},
                {"a_mix_w", &a_mix_w},     {"a_out_w", &a_out_w},
                {"a_out_b", &a_out_b},     {"a_attn_w", &a_attn_w},
                {"a_pool_w", &a_pool_w},   {"a_pool_b", &a_pool_b},
                {"t_embed", &t_embed},     {"t_out_w", &t_out_w},
                {"t_out_b", &t_out_b}};
    }

    static EncoderParams init(const EncoderDims& dims, RngStream& rng) {
        const std::size_t f = dims.feat_dim, h = dims.hidden_dim;
        const std::size_t d = dims.embed_dim, p = dims.phoneme_count;
        EncoderParams out;
        out.dims = dims;
        auto uniform_block = [&](Shape shape, std::size_t fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::size_t n = 1;
            for (auto e : shape) n *= e;
            std::vector<double> v(n);
            for (auto& x : v) x = rng.uniform(-bound, bound);
            return Tensor::leaf(std::move(shape), std::move(v), true);
        };
        out.a_frame_w = uniform_block({f, h}, f);
        out.a_frame_b = uniform_block({h}, f);
        out.a_mix_w = uniform_block({h, h}, h);
        out.a_out_w = uniform_block({h, d}, h);
        out.a_out_b = uniform_block({d}, h);
        out.a_attn_w = uniform_block({d}, d);
        out.a_pool_w = uniform_block({2 * d, d}, 2 * d);
        out.a_pool_b = uniform_block({d}, 2 * d);
        out.t_embed = uniform_block({p, h}, h);
        out.t_out_w = uniform_block({h, d}, h);
        out.t_out_b = uniform_block({d}, h);
        return out;
    }
};

/// Variance floor inside the pooled std; keeps the gradient finite when all
/// frames agree.
inline constexpr double kPoolVarianceEps = 1e-8;

/// Per-frame embedding sequence: frame projection + tanh, a causal linear
/// state update standing in for temporal context, then projection to D.
inline Tensor encode_audio(const EncoderParams& params, const FeatureSequence& input) {
    if (input.frames.ndim() != 2 || input.frames.cols() != params.dims.feat_dim) {
        throw ParameterError(
            "encode_audio: feature width " +
            std::to_string(input.frames.ndim() == 2 ? input.frames.cols() : 0) +
            " does not match configured " + std::to_string(params.dims.feat_dim));
    }
    const std::size_t t_len = input.frames.rows();
    Tensor state = Tensor::zeros({params.dims.hidden_dim});
    std::vector<Tensor> rows;
    rows.reserve(t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
        Tensor x = select_row(input.frames, t);
        Tensor h = tanh(add(vecmat(x, params.a_frame_w), params.a_frame_b));
        state = add(vecmat(state, params.a_mix_w), h);
        rows.push_back(add(vecmat(state, params.a_out_w), params.a_out_b));
    }
    return stack_rows(rows);
}

/// Attentive statistics pooling: softmax attention over frames, weighted
/// mean and weighted std concatenated, projected back to D, normalized.
inline Tensor pool_audio(const EncoderParams& params, const Tensor& sequence) {
    if (sequence.ndim() != 2 || sequence.cols() != params.dims.embed_dim) {
        throw ParameterError("pool_audio: expected [T x D] sequence, got " +
                             detail::shape_str(sequence.shape()));
    }
    Tensor weights = softmax(matvec(sequence, params.a_attn_w), 1.0);
    Tensor mu = vecmat(weights, sequence);
    Tensor ex2 = vecmat(weights, mul(sequence, sequence));
    Tensor sd = sqrt(clamp_min(sub(ex2, mul(mu, mu)), kPoolVarianceEps));
    Tensor pooled = add(vecmat(concat(mu, sd), params.a_pool_w), params.a_pool_b);
    return l2_normalize(pooled);
}

inline Tensor encode_utterance(const EncoderParams& params, const FeatureSequence& input) {
    return pool_audio(params, encode_audio(params, input));
}

/// Text embedding: table lookup, global average over tokens, linear, then
/// l2 normalization. Rows are averaged in sorted token order, so permuted
/// sequences produce bit-identical embeddings.
inline Tensor encode_text(const EncoderParams& params, const TokenSequence& input) {
    if (input.tokens.empty()) throw ParameterError("encode_text: empty token sequence");
    std::vector<std::size_t> ids = input.tokens;
    std::sort(ids.begin(), ids.end());
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    for (std::size_t id : ids) {
        if (id >= params.dims.phoneme_count) {
            throw ParameterError("encode_text: token " + std::to_string(id) +
                                 " out of range [0, " +
                                 std::to_string(params.dims.phoneme_count) + ")");
        }
        rows.push_back(select_row(params.t_embed, id));
    }
    Tensor avg = mean_rows(stack_rows(rows));
    return l2_normalize(add(vecmat(avg, params.t_out_w), params.t_out_b));
}

}  // namespace mate
