#include "mmhdit/flow.hpp"

#include <cmath>

#include "mmhdit/errors.hpp"

namespace mmh {

template <class T>
FlowBatch<T> assemble_flow_batch(const Tensor<T>& x1, const Tensor<T>& x0, std::vector<double> t, double sigma,
                                 const Tensor<T>& eps) {
    if (x1.shape() != x0.shape()) {
        throw ContractError("x0 " + shape_str(x0.shape()) + " and x1 " + shape_str(x1.shape()) + " differ in shape");
    }
    if (x1.ndim() < 1 || static_cast<std::int64_t>(t.size()) != x1.size(0)) {
        throw ContractError("need one timestep per sample of " + shape_str(x1.shape()));
    }
    if (sigma < 0) throw DomainError("sigma must be non-negative");
    if (sigma > 0 && (!eps.defined() || eps.shape() != x1.shape())) {
        throw ContractError("sigma > 0 requires eps shaped like x1");
    }
    for (double v : t) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("timestep " + std::to_string(v) + " outside [0, 1]");
    }
    const auto per_sample = x1.numel() / x1.size(0);
    std::vector<T> xt(static_cast<std::size_t>(x1.numel())), u(xt.size());
    auto a = x0.data();
    auto b = x1.data();
    for (std::size_t i = 0; i < xt.size(); ++i) {
        const T ti = static_cast<T>(t[i / static_cast<std::size_t>(per_sample)]);
        xt[i] = ti * b[i] + (T(1) - ti) * a[i];
        if (sigma > 0) xt[i] += static_cast<T>(sigma) * eps.data()[i];
        u[i] = b[i] - a[i];
    }
    FlowBatch<T> out;
    out.x0 = x0.detach();
    out.x1 = x1.detach();
    out.eps = sigma > 0 ? eps.detach() : Tensor<T>::zeros(x1.shape());
    out.xt = Tensor<T>::from_data(x1.shape(), std::move(xt));
    out.target_u = Tensor<T>::from_data(x1.shape(), std::move(u));
    out.t = std::move(t);
    out.sigma = sigma;
    return out;
}

template <class T>
FlowBatch<T> make_flow_batch(const Tensor<T>& x1, Rng& rng, double sigma) {
    const auto batch = x1.size(0);
    std::vector<double> t(static_cast<std::size_t>(batch));
    for (auto& v : t) v = rng.uniform();
    std::vector<T> noise(static_cast<std::size_t>(x1.numel()));
    for (auto& v : noise) v = static_cast<T>(rng.normal());
    auto x0 = Tensor<T>::from_data(x1.shape(), std::move(noise));
    Tensor<T> eps;
    if (sigma > 0) {
        std::vector<T> e(static_cast<std::size_t>(x1.numel()));
        for (auto& v : e) v = static_cast<T>(rng.normal());
        eps = Tensor<T>::from_data(x1.shape(), std::move(e));
    }
    return assemble_flow_batch(x1, x0, std::move(t), sigma, eps);
}

template <class T>
Tensor<T> icfm_loss(const VelocityField<T>& model, const FlowBatch<T>& batch,
                    std::span<const TextEmbedding<T>> texts) {
    auto prediction = model.velocity(batch.xt, batch.t, texts);
    if (prediction.shape() != batch.target_u.shape()) {
        throw ContractError("model output " + shape_str(prediction.shape()) + " does not match target " +
                            shape_str(batch.target_u.shape()));
    }
    return mse(prediction, batch.target_u);
}

template <class T>
Tensor<T> cfg_velocity(const Tensor<T>& v_uncond, const Tensor<T>& v_cond, double scale) {
    if (v_uncond.shape() != v_cond.shape()) {
        throw DimensionError("guidance branches differ in shape: " + shape_str(v_uncond.shape()) + " vs " +
                             shape_str(v_cond.shape()));
    }
    return add(v_uncond, mmh::scale(sub(v_cond, v_uncond), static_cast<T>(scale)));
}

void SamplerConfig::validate() const {
    if (steps < 1) throw ConfigError("sampler steps must be >= 1 (got " + std::to_string(steps) + ")");
    if (!(cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be >= 0");
}

template <class T>
Tensor<T> gaussian_noise(const Shape& shape, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.normal());
    return Tensor<T>::from_data(shape, std::move(data));
}

template <class T>
Tensor<T> sample(const VelocityField<T>& model, std::span<const TextEmbedding<T>> texts,
                 std::span<const TextEmbedding<T>> uncond, const Shape& latent_shape, const SamplerConfig& config) {
    config.validate();
    if (latent_shape.size() != 3) throw DimensionError("latent shape must be [C, H, W], got " + shape_str(latent_shape));
    if (!uncond.empty() && uncond.size() != texts.size()) {
        throw ContractError("need one unconditional prompt per sample");
    }
    NoGradGuard no_grad;
    const auto batch = static_cast<std::int64_t>(texts.size());
    Shape shape{batch};
    shape.insert(shape.end(), latent_shape.begin(), latent_shape.end());
    auto x = gaussian_noise<T>(shape, config.seed);

    // Both guidance branches run as one packed batch: [cond..., uncond...].
    std::vector<TextEmbedding<T>> both(texts.begin(), texts.end());
    if (uncond.empty()) {
        auto empty = model.encode_prompt("");
        both.insert(both.end(), static_cast<std::size_t>(batch), empty);
    } else {
        both.insert(both.end(), uncond.begin(), uncond.end());
    }
    const auto per_sample = shape_numel(latent_shape);
    const double dt = 1.0 / static_cast<double>(config.steps);
    for (std::int64_t step = 0; step < config.steps; ++step) {
        const double t = static_cast<double>(step) * dt;
        std::vector<double> ts(static_cast<std::size_t>(2 * batch), t);
        std::vector<Tensor<T>> pair{x, x};
        auto doubled = reshape(concat_rows(std::span<const Tensor<T>>(pair)), [&] {
            Shape s{2 * batch};
            s.insert(s.end(), latent_shape.begin(), latent_shape.end());
            return s;
        }());
        auto v = model.velocity(doubled, ts, both);
        auto flat = reshape(v, {2 * batch, per_sample});
        std::vector<std::int64_t> cond_rows, uncond_rows;
        for (std::int64_t b = 0; b < batch; ++b) {
            cond_rows.push_back(b);
            uncond_rows.push_back(batch + b);
        }
        auto guided = cfg_velocity(gather_rows(flat, std::span<const std::int64_t>(uncond_rows)),
                                   gather_rows(flat, std::span<const std::int64_t>(cond_rows)), config.cfg_scale);
        auto next = x.detach();
        auto dst = next.data_mut();
        auto g = guided.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<T>(dt) * g[i];
        x = next;
    }
    return x;
}

#define MMH_INSTANTIATE_FLOW(T)                                                                                 \
    template FlowBatch<T> assemble_flow_batch(const Tensor<T>&, const Tensor<T>&, std::vector<double>, double, \
                                              const Tensor<T>&);                                                \
    template FlowBatch<T> make_flow_batch(const Tensor<T>&, Rng&, double);                                     \
    template Tensor<T> icfm_loss(const VelocityField<T>&, const FlowBatch<T>&, std::span<const TextEmbedding<T>>); \
    template Tensor<T> cfg_velocity(const Tensor<T>&, const Tensor<T>&, double);                               \
    template Tensor<T> gaussian_noise(const Shape&, std::uint64_t);                                            \
    template Tensor<T> sample(const VelocityField<T>&, std::span<const TextEmbedding<T>>,                      \
                              std::span<const TextEmbedding<T>>, const Shape&, const SamplerConfig&);

MMH_INSTANTIATE_FLOW(float)
MMH_INSTANTIATE_FLOW(double)

}  // namespace mmh
