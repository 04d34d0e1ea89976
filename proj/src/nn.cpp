#include "mmhdit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmhdit/errors.hpp"

namespace mmh {

void BlockSpec::validate() const {
    if (model_dim <= 0 || head_count <= 0) {
        throw ConfigError("block needs positive model_dim and head_count (got " + std::to_string(model_dim) + ", " +
                          std::to_string(head_count) + ")");
    }
    if (model_dim % head_count != 0) {
        throw ConfigError("head_count " + std::to_string(head_count) + " does not divide model_dim " +
                          std::to_string(model_dim));
    }
    if (head_dim() % 4 != 0) {
        throw ConfigError("head_dim " + std::to_string(head_dim()) + " (model_dim " + std::to_string(model_dim) +
                          " / " + std::to_string(head_count) + " heads) must be divisible by 4 for 2-D RoPE");
    }
    if (mlp_hidden_dim <= 0) throw ConfigError("mlp_hidden_dim must be positive");
}

std::vector<PositionId> text_positions(std::int64_t count) {
    std::vector<PositionId> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) out.push_back({0, i});
    return out;
}

std::vector<PositionId> image_positions(std::int64_t grid_h, std::int64_t grid_w) {
    std::vector<PositionId> out;
    out.reserve(static_cast<std::size_t>(grid_h * grid_w));
    for (std::int64_t r = 0; r < grid_h; ++r) {
        for (std::int64_t c = 0; c < grid_w; ++c) out.push_back({r + 1, c});
    }
    return out;
}

SequenceLayout SequenceLayout::from_lengths(std::span<const std::int64_t> lengths) {
    SequenceLayout layout;
    for (auto n : lengths) layout.offsets.push_back(layout.offsets.back() + n);
    return layout;
}

std::vector<std::int64_t> SequenceLayout::row_owner() const {
    std::vector<std::int64_t> owner(static_cast<std::size_t>(tokens()));
    for (std::size_t s = 0; s < count(); ++s) {
        for (auto r = offsets[s]; r < offsets[s + 1]; ++r) owner[static_cast<std::size_t>(r)] = static_cast<std::int64_t>(s);
    }
    return owner;
}

template <class T>
Linear<T> Linear<T>::init(Rng& rng, std::int64_t in, std::int64_t out, bool with_bias, bool zero) {
    Linear l;
    std::vector<T> w(static_cast<std::size_t>(in * out), T(0));
    if (!zero) {
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
    }
    l.weight = Tensor<T>::from_data({in, out}, std::move(w), true);
    if (with_bias) l.bias = Tensor<T>::zeros({out}, true);
    return l;
}

template <class T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

template <class T>
void Linear<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

namespace {

// cos/sin per (token, rotation pair). Pairs [0, hd/4) follow axis0, the rest axis1.
template <class T>
void rope_tables(std::span<const PositionId> positions, std::int64_t head_dim, double base, std::vector<T>& cos_t,
                 std::vector<T>& sin_t) {
    const std::int64_t pairs_per_axis = head_dim / 4;
    const std::int64_t pairs = head_dim / 2;
    cos_t.resize(positions.size() * static_cast<std::size_t>(pairs));
    sin_t.resize(cos_t.size());
    for (std::size_t n = 0; n < positions.size(); ++n) {
        for (std::int64_t j = 0; j < pairs; ++j) {
            const std::int64_t axis_pair = j % pairs_per_axis;
            const double coord = static_cast<double>(j < pairs_per_axis ? positions[n].axis0 : positions[n].axis1);
            const double freq = std::pow(base, -static_cast<double>(axis_pair) / static_cast<double>(pairs_per_axis));
            const double angle = coord * freq;
            cos_t[n * static_cast<std::size_t>(pairs) + static_cast<std::size_t>(j)] = static_cast<T>(std::cos(angle));
            sin_t[n * static_cast<std::size_t>(pairs) + static_cast<std::size_t>(j)] = static_cast<T>(std::sin(angle));
        }
    }
}

// Applies the rotation (sign = +1) or its inverse (sign = -1) in place.
template <class T>
void rotate_pairs(std::span<T> x, std::int64_t tokens, std::int64_t heads, std::int64_t head_dim,
                  const std::vector<T>& cos_t, const std::vector<T>& sin_t, T sign) {
    const std::int64_t pairs = head_dim / 2;
    for (std::int64_t n = 0; n < tokens; ++n) {
        const T* c = cos_t.data() + n * pairs;
        const T* s = sin_t.data() + n * pairs;
        for (std::int64_t h = 0; h < heads; ++h) {
            T* v = x.data() + (n * heads + h) * head_dim;
            for (std::int64_t j = 0; j < pairs; ++j) {
                const T a = v[2 * j], b = v[2 * j + 1];
                const T sj = sign * s[j];
                v[2 * j] = a * c[j] - b * sj;
                v[2 * j + 1] = a * sj + b * c[j];
            }
        }
    }
}

}  // namespace

template <class T>
Tensor<T> rope2d_rotate(const Tensor<T>& x, std::span<const PositionId> positions, double base) {
    if (x.ndim() != 3) throw DimensionError("rope2d_rotate expects [tokens, heads, head_dim], got " + shape_str(x.shape()));
    const auto tokens = x.size(0), heads = x.size(1), head_dim = x.size(2);
    if (head_dim % 4 != 0) {
        throw ConfigError("2-D RoPE needs head_dim divisible by 4, got " + std::to_string(head_dim));
    }
    if (static_cast<std::int64_t>(positions.size()) != tokens) {
        throw DimensionError("rope2d_rotate: " + std::to_string(positions.size()) + " positions for " +
                             std::to_string(tokens) + " tokens");
    }
    std::vector<T> cos_t, sin_t;
    rope_tables<T>(positions, head_dim, base, cos_t, sin_t);
    std::vector<T> out(x.data().begin(), x.data().end());
    rotate_pairs<T>(out, tokens, heads, head_dim, cos_t, sin_t, T(1));
    return detail::make_result<T>(x.shape(), std::move(out), {x}, "rope2d",
                                  [tokens, heads, head_dim, cos_t = std::move(cos_t),
                                   sin_t = std::move(sin_t)](Node<T>& self) {
                                      std::vector<T> g = self.grad;
                                      rotate_pairs<T>(g, tokens, heads, head_dim, cos_t, sin_t, T(-1));
                                      auto gx = Node<T>::grad_of(*self.inputs[0]);
                                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                  });
}

template <class T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                       const SequenceLayout& layout, std::vector<T>* probabilities) {
    if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw DimensionError("attention expects equal [tokens, heads, head_dim] q/k/v, got " + shape_str(q.shape()) +
                             ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const auto tokens = q.size(0), heads = q.size(1), hd = q.size(2);
    if (tokens == 0) throw ContractError("attention over an empty sequence");
    if (layout.tokens() != tokens) {
        throw DimensionError("sequence layout covers " + std::to_string(layout.tokens()) + " tokens, tensor has " +
                             std::to_string(tokens));
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<std::int64_t> prob_offset(layout.count() + 1, 0);
    for (std::size_t s = 0; s < layout.count(); ++s) {
        const auto len = layout.length(s);
        prob_offset[s + 1] = prob_offset[s] + heads * len * len;
    }
    std::vector<T> probs(static_cast<std::size_t>(prob_offset.back()));
    std::vector<T> out(static_cast<std::size_t>(q.numel()), T(0));
    const T* qd = q.data().data();
    const T* kd = k.data().data();
    const T* vd = v.data().data();

    auto row = [heads, hd](std::int64_t token, std::int64_t h) { return (token * heads + h) * hd; };

    for (std::size_t s = 0; s < layout.count(); ++s) {
        const auto base = layout.offsets[s];
        const auto len = layout.length(s);
        for (std::int64_t h = 0; h < heads; ++h) {
            T* p = probs.data() + prob_offset[s] + h * len * len;
            for (std::int64_t i = 0; i < len; ++i) {
                const T* qi = qd + row(base + i, h);
                T* pi = p + i * len;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::int64_t j = 0; j < len; ++j) {
                    const T* kj = kd + row(base + j, h);
                    T dot = 0;
                    for (std::int64_t d = 0; d < hd; ++d) dot += qi[d] * kj[d];
                    pi[j] = dot * scale;
                    mx = std::max(mx, pi[j]);
                }
                T total = 0;
                for (std::int64_t j = 0; j < len; ++j) total += (pi[j] = std::exp(pi[j] - mx));
                for (std::int64_t j = 0; j < len; ++j) pi[j] /= total;
                T* oi = out.data() + row(base + i, h);
                for (std::int64_t j = 0; j < len; ++j) {
                    const T* vj = vd + row(base + j, h);
                    for (std::int64_t d = 0; d < hd; ++d) oi[d] += pi[j] * vj[d];
                }
            }
        }
    }
    if (probabilities) *probabilities = probs;

    return detail::make_result<T>(
        q.shape(), std::move(out), {q, k, v}, "sdpa",
        [layout, heads, hd, scale, row, probs = std::move(probs), prob_offset = std::move(prob_offset)](Node<T>& self) {
            auto& nq = *self.inputs[0];
            auto& nk = *self.inputs[1];
            auto& nv = *self.inputs[2];
            std::vector<T> gq(nq.data.size(), T(0)), gk(nk.data.size(), T(0)), gv(nv.data.size(), T(0));
            std::vector<T> dp;
            for (std::size_t s = 0; s < layout.count(); ++s) {
                const auto base = layout.offsets[s];
                const auto len = layout.length(s);
                dp.resize(static_cast<std::size_t>(len));
                for (std::int64_t h = 0; h < heads; ++h) {
                    const T* p = probs.data() + prob_offset[s] + h * len * len;
                    for (std::int64_t i = 0; i < len; ++i) {
                        const T* go = self.grad.data() + row(base + i, h);
                        const T* pi = p + i * len;
                        T dot = 0;
                        for (std::int64_t j = 0; j < len; ++j) {
                            const T* vj = nv.data.data() + row(base + j, h);
                            T* gvj = gv.data() + row(base + j, h);
                            T acc = 0;
                            for (std::int64_t d = 0; d < hd; ++d) {
                                acc += go[d] * vj[d];
                                gvj[d] += pi[j] * go[d];
                            }
                            dp[static_cast<std::size_t>(j)] = acc;
                            dot += acc * pi[j];
                        }
                        const T* qi = nq.data.data() + row(base + i, h);
                        T* gqi = gq.data() + row(base + i, h);
                        for (std::int64_t j = 0; j < len; ++j) {
                            const T ds = pi[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
                            const T* kj = nk.data.data() + row(base + j, h);
                            T* gkj = gk.data() + row(base + j, h);
                            for (std::int64_t d = 0; d < hd; ++d) {
                                gqi[d] += ds * kj[d];
                                gkj[d] += ds * qi[d];
                            }
                        }
                    }
                }
            }
            auto accumulate = [](Node<T>& n, const std::vector<T>& g) {
                if (!n.requires_grad) return;
                auto dst = Node<T>::grad_of(n);
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            };
            accumulate(nq, gq);
            accumulate(nk, gk);
            accumulate(nv, gv);
        });
}

template <class T>
AttentionWeights<T> AttentionWeights<T>::init(Rng& rng, std::int64_t dim) {
    return {Linear<T>::init(rng, dim, dim, false), Linear<T>::init(rng, dim, dim, false),
            Linear<T>::init(rng, dim, dim, false), Linear<T>::init(rng, dim, dim, false)};
}

template <class T>
void AttentionWeights<T>::collect(const std::string& prefix, ParameterList<T>& out_list) const {
    query.collect(prefix + ".query", out_list);
    key.collect(prefix + ".key", out_list);
    value.collect(prefix + ".value", out_list);
    out.collect(prefix + ".out", out_list);
}

template <class T>
Tensor<T> joint_self_attention(const Tensor<T>& seq, std::span<const PositionId> positions,
                               const SequenceLayout& layout, const BlockSpec& spec, const AttentionWeights<T>& w,
                               const AttentionOptions& options, std::vector<T>* probabilities) {
    spec.validate();
    if (seq.ndim() != 2 || seq.size(1) != spec.model_dim) {
        throw DimensionError("joint_self_attention expects [tokens, " + std::to_string(spec.model_dim) + "], got " +
                             shape_str(seq.shape()));
    }
    const auto tokens = seq.size(0);
    if (tokens == 0) throw ContractError("joint_self_attention over zero tokens");
    const Shape heads_shape{tokens, spec.head_count, spec.head_dim()};
    const T eps = static_cast<T>(spec.norm_eps);
    auto q = rms_normalize(reshape(w.query(seq), heads_shape), eps);
    auto k = rms_normalize(reshape(w.key(seq), heads_shape), eps);
    auto v = reshape(w.value(seq), heads_shape);
    if (options.rope) {
        q = rope2d_rotate(q, positions, options.rope_base);
        k = rope2d_rotate(k, positions, options.rope_base);
    }
    auto attended = scaled_dot_product_attention(q, k, v, layout, probabilities);
    return w.out(reshape(attended, {tokens, spec.model_dim}));
}

template <class T>
SwiGluWeights<T> SwiGluWeights<T>::init(Rng& rng, std::int64_t dim, std::int64_t hidden) {
    return {Linear<T>::init(rng, dim, hidden, false), Linear<T>::init(rng, dim, hidden, false),
            Linear<T>::init(rng, hidden, dim, false)};
}

template <class T>
void SwiGluWeights<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
    gate.collect(prefix + ".gate", out);
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
}

template <class T>
Tensor<T> swiglu_mlp(const Tensor<T>& x, const SwiGluWeights<T>& w) {
    return w.down(mul(silu(w.gate(x)), w.up(x)));
}

template <class T>
Tensor<T> sandwich_block(const Tensor<T>& x, const Modulation<T>& mod,
                         const std::function<Tensor<T>(const Tensor<T>&)>& sublayer, T eps) {
    auto pre = add(mul(rms_normalize(x, eps), add_scalar(mod.scale, T(1))), mod.shift);
    auto post = rms_normalize(sublayer(pre), eps);
    return add(x, mul(mod.gate, post));
}

template <class T>
ConditioningProjection<T> ConditioningProjection<T>::init(Rng& rng, std::int64_t dim, std::int64_t chunks) {
    return {Linear<T>::init(rng, dim, dim, true), Linear<T>::init(rng, dim, dim * chunks, true, true), chunks};
}

template <class T>
std::vector<Tensor<T>> ConditioningProjection<T>::operator()(const Tensor<T>& cond,
                                                             const SequenceLayout& layout) const {
    if (cond.ndim() != 2 || static_cast<std::size_t>(cond.size(0)) != layout.count()) {
        throw DimensionError("conditioning " + shape_str(cond.shape()) + " does not match " +
                             std::to_string(layout.count()) + " sequences");
    }
    const auto dim = cond.size(1);
    auto projected = out(silu(hidden(silu(cond))));
    auto owner = layout.row_owner();
    auto per_row = gather_rows(projected, std::span<const std::int64_t>(owner));
    std::vector<Tensor<T>> parts;
    parts.reserve(static_cast<std::size_t>(chunks));
    for (std::int64_t c = 0; c < chunks; ++c) parts.push_back(slice_last(per_row, c * dim, dim));
    return parts;
}

template <class T>
void ConditioningProjection<T>::collect(const std::string& prefix, ParameterList<T>& out_list) const {
    hidden.collect(prefix + ".hidden", out_list);
    out.collect(prefix + ".out", out_list);
}

template <class T>
DiTBlock<T> DiTBlock<T>::init(Rng& rng, const BlockSpec& spec) {
    spec.validate();
    DiTBlock b;
    b.spec = spec;
    b.attention = AttentionWeights<T>::init(rng, spec.model_dim);
    b.mlp = SwiGluWeights<T>::init(rng, spec.model_dim, spec.mlp_hidden_dim);
    b.modulation = ConditioningProjection<T>::init(rng, spec.model_dim, 6);
    return b;
}

template <class T>
Tensor<T> DiTBlock<T>::operator()(const Tensor<T>& x, const Tensor<T>& cond, std::span<const PositionId> positions,
                                  const SequenceLayout& layout, const AttentionOptions& options) const {
    auto mods = modulation(cond, layout);
    const T eps = static_cast<T>(spec.norm_eps);
    Modulation<T> attn_mod{mods[0], mods[1], mods[2]};
    Modulation<T> mlp_mod{mods[3], mods[4], mods[5]};
    auto h = sandwich_block<T>(
        x, attn_mod,
        [&](const Tensor<T>& in) { return joint_self_attention(in, positions, layout, spec, attention, options); },
        eps);
    return sandwich_block<T>(h, mlp_mod, [&](const Tensor<T>& in) { return swiglu_mlp(in, mlp); }, eps);
}

template <class T>
void DiTBlock<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
    attention.collect(prefix + ".attention", out);
    mlp.collect(prefix + ".mlp", out);
    modulation.collect(prefix + ".modulation", out);
}

#define MMH_INSTANTIATE_NN(T)                                                                                    \
    template struct Linear<T>;                                                                                   \
    template struct AttentionWeights<T>;                                                                         \
    template struct SwiGluWeights<T>;                                                                            \
    template struct ConditioningProjection<T>;                                                                   \
    template struct DiTBlock<T>;                                                                                 \
    template Tensor<T> rope2d_rotate(const Tensor<T>&, std::span<const PositionId>, double);                     \
    template Tensor<T> scaled_dot_product_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                                    const SequenceLayout&, std::vector<T>*);                     \
    template Tensor<T> joint_self_attention(const Tensor<T>&, std::span<const PositionId>, const SequenceLayout&, \
                                            const BlockSpec&, const AttentionWeights<T>&, const AttentionOptions&, \
                                            std::vector<T>*);                                                    \
    template Tensor<T> swiglu_mlp(const Tensor<T>&, const SwiGluWeights<T>&);                                    \
    template Tensor<T> sandwich_block(const Tensor<T>&, const Modulation<T>&,                                    \
                                      const std::function<Tensor<T>(const Tensor<T>&)>&, T);

MMH_INSTANTIATE_NN(float)
MMH_INSTANTIATE_NN(double)

}  // namespace mmh
