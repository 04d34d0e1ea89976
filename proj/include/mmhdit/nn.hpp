#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmhdit/ops.hpp"
#include "mmhdit/rng.hpp"
#include "mmhdit/tensor.hpp"

namespace mmh {

/// Shape of one transformer block. `head_count` may differ per block.
struct BlockSpec {
    std::int64_t model_dim = 0;
    std::int64_t head_count = 1;
    std::int64_t mlp_hidden_dim = 0;
    double norm_eps = 1e-6;

    std::int64_t head_dim() const { return model_dim / head_count; }
    /// Throws ConfigError unless model_dim % head_count == 0 and head_dim % 4 == 0.
    void validate() const;
};

/// 2-D rotary coordinate. Text tokens use (0, index); image tokens (row + 1, col).
struct PositionId {
    std::int64_t axis0 = 0;
    std::int64_t axis1 = 0;
    bool operator==(const PositionId&) const = default;
};

std::vector<PositionId> text_positions(std::int64_t count);
std::vector<PositionId> image_positions(std::int64_t grid_h, std::int64_t grid_w);

/// Several sequences packed back to back along the token axis. Sequence s
/// owns rows [offsets[s], offsets[s + 1]). Attention never crosses sequences.
struct SequenceLayout {
    std::vector<std::int64_t> offsets{0};

    static SequenceLayout single(std::int64_t tokens) { return {{0, tokens}}; }
    static SequenceLayout from_lengths(std::span<const std::int64_t> lengths);

    std::size_t count() const { return offsets.size() - 1; }
    std::int64_t tokens() const { return offsets.back(); }
    std::int64_t length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
    /// Sequence index of every packed row.
    std::vector<std::int64_t> row_owner() const;
};

/// Named tensor registry shared by the model, optimizer, and checkpoints.
template <class T>
struct NamedParameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

template <class T>
using ParameterList = std::vector<NamedParameter<T>>;

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out], undefined when bias-free

    static Linear init(Rng& rng, std::int64_t in, std::int64_t out, bool with_bias, bool zero = false);
    Tensor<T> operator()(const Tensor<T>& x) const;
    void collect(const std::string& prefix, ParameterList<T>& out) const;
};

/// Rotates the first half of each head by axis0 angles and the second half by
/// axis1 angles. x: [tokens, heads, head_dim].
template <class T>
Tensor<T> rope2d_rotate(const Tensor<T>& x, std::span<const PositionId> positions, double base = 10000.0);

/// Softmax(q k^T / sqrt(head_dim)) v per packed sequence and head.
/// q, k, v: [tokens, heads, head_dim]. When `probabilities` is non-null it
/// receives the attention matrices, sequence-major then head-major, row-major.
template <class T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                       const SequenceLayout& layout, std::vector<T>* probabilities = nullptr);

template <class T>
struct AttentionWeights {
    Linear<T> query, key, value, out;

    static AttentionWeights init(Rng& rng, std::int64_t dim);
    void collect(const std::string& prefix, ParameterList<T>& out_list) const;
};

struct AttentionOptions {
    bool rope = true;
    double rope_base = 10000.0;
};

/// Joint self-attention over packed [text, image] sequences with per-head
/// RMS-normalized queries/keys. seq: [tokens, model_dim].
template <class T>
Tensor<T> joint_self_attention(const Tensor<T>& seq, std::span<const PositionId> positions,
                               const SequenceLayout& layout, const BlockSpec& spec, const AttentionWeights<T>& w,
                               const AttentionOptions& options = {}, std::vector<T>* probabilities = nullptr);

template <class T>
struct SwiGluWeights {
    Linear<T> gate, up, down;

    static SwiGluWeights init(Rng& rng, std::int64_t dim, std::int64_t hidden);
    void collect(const std::string& prefix, ParameterList<T>& out) const;
};

/// down(silu(gate x) * up x), all projections bias-free.
template <class T>
Tensor<T> swiglu_mlp(const Tensor<T>& x, const SwiGluWeights<T>& w);

/// Per-row conditioning for one sandwiched sublayer, each [tokens, model_dim].
template <class T>
struct Modulation {
    Tensor<T> shift, scale, gate;
};

/// x + gate * rms(sublayer(rms(x) * (1 + scale) + shift)).
template <class T>
Tensor<T> sandwich_block(const Tensor<T>& x, const Modulation<T>& mod,
                         const std::function<Tensor<T>(const Tensor<T>&)>& sublayer, T eps);

/// Two-layer projection of the conditioning vector into `chunks` modulation
/// vectors: out(silu(hidden(silu(c)))). The output layer starts at zero.
template <class T>
struct ConditioningProjection {
    Linear<T> hidden, out;
    std::int64_t chunks = 6;

    static ConditioningProjection init(Rng& rng, std::int64_t dim, std::int64_t chunks);
    /// cond [sequences, dim] -> `chunks` tensors [tokens, dim], broadcast per sequence.
    std::vector<Tensor<T>> operator()(const Tensor<T>& cond, const SequenceLayout& layout) const;
    void collect(const std::string& prefix, ParameterList<T>& out_list) const;
};

/// One transformer block: sandwiched attention then sandwiched SwiGLU MLP.
template <class T>
struct DiTBlock {
    BlockSpec spec;
    AttentionWeights<T> attention;
    SwiGluWeights<T> mlp;
    ConditioningProjection<T> modulation;

    static DiTBlock init(Rng& rng, const BlockSpec& spec);
    Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& cond, std::span<const PositionId> positions,
                         const SequenceLayout& layout, const AttentionOptions& options = {}) const;
    void collect(const std::string& prefix, ParameterList<T>& out) const;
};

}  // namespace mmh
