#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mmhdit/nn.hpp"

namespace mmh {

/// Full architecture description, including the per-block head schedule.
struct ModelConfig {
    std::int64_t layers = 8;
    std::int64_t model_dim = 192;
    std::vector<std::int64_t> head_schedule;  // one entry per layer
    std::int64_t patch_size = 2;
    std::int64_t latent_channels = 16;
    std::int64_t text_embed_dim = 64;
    std::int64_t max_text_tokens = 16;  // BOS included
    std::int64_t vocab_hash_size = 1024;
    std::int64_t mlp_hidden_dim = 512;
    std::int64_t time_freq_dim = 64;
    double norm_eps = 1e-6;
    double rope_base = 10000.0;
    bool pooled_text_conditioning = false;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    BlockSpec block_spec(std::int64_t layer) const;

    nlohmann::json to_json() const;
    /// Parses and validates; errors name the JSON field (prefixed by `where`).
    static ModelConfig from_json(const nlohmann::json& j, const std::string& where = "model");

    static ModelConfig desk();
    static ModelConfig paper_scale();

    bool operator==(const ModelConfig&) const = default;
};

/// Four equal contiguous groups of 8, 16, 24, 48 heads (few heads early,
/// many late). Throws ConfigError unless layers % 4 == 0.
std::vector<std::int64_t> head_schedule_default(std::int64_t layers);

/// Space-to-depth: [B, C, H, W] -> [B, (H/p)(W/p), p*p*C] (or the unbatched
/// [C, H, W] -> [(H/p)(W/p), p*p*C]). Tokens are row-major over the patch grid;
/// feature index is c*p*p + dy*p + dx.
template <class T>
Tensor<T> patchify(const Tensor<T>& latent, std::int64_t patch);

/// Inverse of patchify for a target latent extent.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::int64_t channels, std::int64_t height, std::int64_t width,
                     std::int64_t patch);

/// Token embeddings of one prompt: [n_tokens, text_embed_dim], BOS first.
template <class T>
struct TextEmbedding {
    Tensor<T> tokens;
    std::int64_t size() const { return tokens.size(0); }
};

/// Stand-in text encoder: whitespace tokens hashed (FNV-1a) into a frozen
/// random table, with a frozen BOS vector prepended.
template <class T>
class ToyTextEmbedder {
   public:
    ToyTextEmbedder() = default;
    ToyTextEmbedder(Rng& rng, std::int64_t vocab_size, std::int64_t embed_dim, std::int64_t max_tokens);

    /// Bucket ids of the words (BOS excluded), truncated to max_tokens - 1.
    std::vector<std::int64_t> tokenize(std::string_view prompt) const;
    TextEmbedding<T> operator()(std::string_view prompt) const;
    void collect(const std::string& prefix, ParameterList<T>& out) const;

   private:
    Tensor<T> table_;  // [vocab, embed_dim]
    Tensor<T> bos_;    // [1, embed_dim]
    std::int64_t max_tokens_ = 1;
};

std::uint64_t fnv1a64(std::string_view text);

/// Anything that predicts a velocity field for a batch of latents.
template <class T>
class VelocityField {
   public:
    virtual ~VelocityField() = default;
    /// x: [B, C, H, W]; t and texts have B entries.
    virtual Tensor<T> velocity(const Tensor<T>& x, std::span<const double> t,
                               std::span<const TextEmbedding<T>> texts) const = 0;
    virtual TextEmbedding<T> encode_prompt(std::string_view prompt) const = 0;
};

/// The diffusion transformer: embedders, block stack with its head
/// schedule, and a conditioned output head predicting velocity.
template <class T>
class DiT final : public VelocityField<T> {
   public:
    DiT(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    /// Every tensor in a stable order; frozen ones have trainable = false.
    const ParameterList<T>& parameters() const { return params_; }
    std::int64_t trainable_count() const;

    Tensor<T> forward(const Tensor<T>& latents, std::span<const double> t,
                      std::span<const TextEmbedding<T>> texts) const;
    Tensor<T> velocity(const Tensor<T>& x, std::span<const double> t,
                       std::span<const TextEmbedding<T>> texts) const override {
        return forward(x, t, texts);
    }
    TextEmbedding<T> encode_prompt(std::string_view prompt) const override { return text_embedder_(prompt); }

    /// Sinusoidal features of t followed by a 3-layer SiLU MLP: [B, model_dim].
    /// Throws DomainError for t outside [0, 1].
    Tensor<T> embed_timestep(std::span<const double> t) const;

   private:
    ModelConfig config_;
    ToyTextEmbedder<T> text_embedder_;
    Linear<T> image_in_, text_in_, pooled_text_;
    Linear<T> time_fc1_, time_fc2_, time_fc3_;
    std::vector<DiTBlock<T>> blocks_;
    Linear<T> final_modulation_, head_;
    ParameterList<T> params_;
};

/// Sinusoidal features [B, dim] (cos half then sin half) of 1000 * t.
template <class T>
Tensor<T> timestep_features(std::span<const double> t, std::int64_t dim);

}  // namespace mmh
