#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmhdit/model.hpp"
#include "mmhdit/rng.hpp"

namespace mmh {

/// One I-CFM training batch. t = 0 is pure noise, t = 1 is data:
///   xt = t * x1 + (1 - t) * x0 + sigma * eps,   target_u = x1 - x0.
template <class T>
struct FlowBatch {
    Tensor<T> x0, x1, eps, xt, target_u;  // [B, ...]
    std::vector<double> t;                // one per sample, in [0, 1]
    double sigma = 0.0;
};

/// Assembles a batch from explicit draws (eps may be undefined when sigma == 0).
template <class T>
FlowBatch<T> assemble_flow_batch(const Tensor<T>& x1, const Tensor<T>& x0, std::vector<double> t, double sigma,
                                 const Tensor<T>& eps = {});

/// Draws t ~ U[0, 1] per sample, x0 ~ N(0, I) and (when sigma > 0) eps ~ N(0, I).
template <class T>
FlowBatch<T> make_flow_batch(const Tensor<T>& x1, Rng& rng, double sigma);

/// mean((v(xt, t, text) - target_u)^2) over batch and elements.
template <class T>
Tensor<T> icfm_loss(const VelocityField<T>& model, const FlowBatch<T>& batch, std::span<const TextEmbedding<T>> texts);

/// v_uncond + s * (v_cond - v_uncond).
template <class T>
Tensor<T> cfg_velocity(const Tensor<T>& v_uncond, const Tensor<T>& v_cond, double scale);

struct SamplerConfig {
    std::int64_t steps = 20;
    double cfg_scale = 5.0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Euler integration from t = 0 to t = 1 with classifier-free guidance.
/// `latent_shape` is [C, H, W]; the result is [B, C, H, W] with B = texts.size().
/// `uncond` supplies the guidance baseline per sample (a negative prompt);
/// when empty, the BOS-only empty prompt is used.
template <class T>
Tensor<T> sample(const VelocityField<T>& model, std::span<const TextEmbedding<T>> texts,
                 std::span<const TextEmbedding<T>> uncond, const Shape& latent_shape, const SamplerConfig& config);

/// Standard normal noise [B, C, H, W] drawn from a fresh stream seeded with `seed`.
template <class T>
Tensor<T> gaussian_noise(const Shape& shape, std::uint64_t seed);

}  // namespace mmh
