#include "mmhdit/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "mmhdit/errors.hpp"

namespace mmh {

namespace {

void require(bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError("field '" + field + "': " + message);
}

}  // namespace

void ModelConfig::validate() const {
    require(layers >= 1, "layers", "must be >= 1");
    require(model_dim >= 1, "model_dim", "must be >= 1");
    require(static_cast<std::int64_t>(head_schedule.size()) == layers, "head_schedule",
            "has " + std::to_string(head_schedule.size()) + " entries but layers = " + std::to_string(layers));
    for (std::size_t i = 0; i < head_schedule.size(); ++i) {
        const auto h = head_schedule[i];
        const std::string field = "head_schedule[" + std::to_string(i) + "]";
        require(h >= 1, field, "head count must be positive");
        require(model_dim % h == 0, field,
                std::to_string(h) + " heads do not divide model_dim " + std::to_string(model_dim));
        require((model_dim / h) % 4 == 0, field,
                "head_dim " + std::to_string(model_dim / h) + " is not divisible by 4");
    }
    require(patch_size >= 1, "patch_size", "must be >= 1");
    require(latent_channels >= 1, "latent_channels", "must be >= 1");
    require(text_embed_dim >= 1, "text_embed_dim", "must be >= 1");
    require(max_text_tokens >= 1, "max_text_tokens", "must be >= 1 (BOS is always present)");
    require(vocab_hash_size >= 1, "vocab_hash_size", "must be >= 1");
    require(mlp_hidden_dim >= 1, "mlp_hidden_dim", "must be >= 1");
    require(time_freq_dim >= 2 && time_freq_dim % 2 == 0, "time_freq_dim", "must be a positive even number");
    require(norm_eps >= 0, "norm_eps", "must be >= 0");
    require(rope_base > 1, "rope_base", "must be > 1");
}

BlockSpec ModelConfig::block_spec(std::int64_t layer) const {
    return {model_dim, head_schedule.at(static_cast<std::size_t>(layer)), mlp_hidden_dim, norm_eps};
}

nlohmann::json ModelConfig::to_json() const {
    return {{"layers", layers},
            {"model_dim", model_dim},
            {"head_schedule", head_schedule},
            {"patch_size", patch_size},
            {"latent_channels", latent_channels},
            {"text_embed_dim", text_embed_dim},
            {"max_text_tokens", max_text_tokens},
            {"vocab_hash_size", vocab_hash_size},
            {"mlp_hidden_dim", mlp_hidden_dim},
            {"time_freq_dim", time_freq_dim},
            {"norm_eps", norm_eps},
            {"rope_base", rope_base},
            {"pooled_text_conditioning", pooled_text_conditioning}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError("field '" + where + "': expected an object");
    ModelConfig c;
    auto get_int = [&](const char* key, std::int64_t& dst) {
        if (!j.contains(key)) return;
        if (!j[key].is_number_integer()) throw ConfigError("field '" + where + "." + key + "': expected an integer");
        dst = j[key].get<std::int64_t>();
    };
    auto get_num = [&](const char* key, double& dst) {
        if (!j.contains(key)) return;
        if (!j[key].is_number()) throw ConfigError("field '" + where + "." + key + "': expected a number");
        dst = j[key].get<double>();
    };
    for (auto it = j.begin(); it != j.end(); ++it) {
        static const char* known[] = {"layers",        "model_dim",       "head_schedule",   "patch_size",
                                      "latent_channels", "text_embed_dim", "max_text_tokens", "vocab_hash_size",
                                      "mlp_hidden_dim", "time_freq_dim",   "norm_eps",        "rope_base",
                                      "pooled_text_conditioning"};
        if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; })) {
            throw ConfigError("field '" + where + "." + it.key() + "': unknown field");
        }
    }
    get_int("layers", c.layers);
    get_int("model_dim", c.model_dim);
    get_int("patch_size", c.patch_size);
    get_int("latent_channels", c.latent_channels);
    get_int("text_embed_dim", c.text_embed_dim);
    get_int("max_text_tokens", c.max_text_tokens);
    get_int("vocab_hash_size", c.vocab_hash_size);
    get_int("mlp_hidden_dim", c.mlp_hidden_dim);
    get_int("time_freq_dim", c.time_freq_dim);
    get_num("norm_eps", c.norm_eps);
    get_num("rope_base", c.rope_base);
    if (j.contains("pooled_text_conditioning")) {
        if (!j["pooled_text_conditioning"].is_boolean()) {
            throw ConfigError("field '" + where + ".pooled_text_conditioning': expected a boolean");
        }
        c.pooled_text_conditioning = j["pooled_text_conditioning"].get<bool>();
    }
    if (j.contains("head_schedule")) {
        const auto& hs = j["head_schedule"];
        if (!hs.is_array()) throw ConfigError("field '" + where + ".head_schedule': expected an array");
        for (std::size_t i = 0; i < hs.size(); ++i) {
            if (!hs[i].is_number_integer()) {
                throw ConfigError("field '" + where + ".head_schedule[" + std::to_string(i) +
                                  "]': expected an integer");
            }
            c.head_schedule.push_back(hs[i].get<std::int64_t>());
        }
    } else {
        try {
            c.head_schedule = head_schedule_default(c.layers);
        } catch (const ConfigError& e) {
            throw ConfigError("field '" + where + ".head_schedule': missing and " + e.what());
        }
    }
    try {
        c.validate();
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        const std::string tag = "field '";
        if (msg.rfind(tag, 0) == 0) msg.insert(tag.size(), where + ".");
        throw ConfigError(msg);
    }
    return c;
}

ModelConfig ModelConfig::desk() {
    ModelConfig c;
    c.head_schedule = head_schedule_default(c.layers);
    return c;
}

ModelConfig ModelConfig::paper_scale() {
    ModelConfig c;
    c.layers = 32;
    c.model_dim = 1536;
    c.head_schedule = head_schedule_default(32);
    c.patch_size = 2;
    c.latent_channels = 16;
    c.text_embed_dim = 4096;
    c.max_text_tokens = 256;
    c.vocab_hash_size = 32128;
    c.mlp_hidden_dim = 4096;
    c.time_freq_dim = 256;
    return c;
}

std::vector<std::int64_t> head_schedule_default(std::int64_t layers) {
    if (layers <= 0 || layers % 4 != 0) {
        throw ConfigError("default head schedule needs layers divisible by 4 (got " + std::to_string(layers) +
                          "); give head_schedule explicitly");
    }
    static constexpr std::int64_t groups[] = {8, 16, 24, 48};
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(layers));
    for (auto heads : groups) out.insert(out.end(), static_cast<std::size_t>(layers / 4), heads);
    return out;
}

namespace {

// Element permutation op: out[i] = x[source[i]].
template <class T>
Tensor<T> permute_elements(const Tensor<T>& x, std::vector<std::int64_t> source, Shape out_shape,
                           std::string_view op) {
    std::vector<T> out(source.size());
    auto in = x.data();
    for (std::size_t i = 0; i < source.size(); ++i) out[i] = in[static_cast<std::size_t>(source[i])];
    return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, op,
                                  [source = std::move(source)](Node<T>& self) {
                                      auto g = Node<T>::grad_of(*self.inputs[0]);
                                      for (std::size_t i = 0; i < source.size(); ++i) {
                                          g[static_cast<std::size_t>(source[i])] += self.grad[i];
                                      }
                                  });
}

// Index of every patchified element inside the latent buffer.
std::vector<std::int64_t> patch_sources(std::int64_t batch, std::int64_t c, std::int64_t h, std::int64_t w,
                                        std::int64_t p) {
    const auto gh = h / p, gw = w / p, feat = p * p * c;
    std::vector<std::int64_t> src(static_cast<std::size_t>(batch * c * h * w));
    std::size_t i = 0;
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t gy = 0; gy < gh; ++gy) {
            for (std::int64_t gx = 0; gx < gw; ++gx) {
                for (std::int64_t f = 0; f < feat; ++f, ++i) {
                    const auto ch = f / (p * p), dy = (f / p) % p, dx = f % p;
                    src[i] = ((b * c + ch) * h + gy * p + dy) * w + gx * p + dx;
                }
            }
        }
    }
    return src;
}

}  // namespace

template <class T>
Tensor<T> patchify(const Tensor<T>& latent, std::int64_t patch) {
    if (patch < 1) throw ConfigError("patch size must be >= 1");
    const bool batched = latent.ndim() == 4;
    if (!batched && latent.ndim() != 3) {
        throw DimensionError("patchify expects [C, H, W] or [B, C, H, W], got " + shape_str(latent.shape()));
    }
    const auto b = batched ? latent.size(0) : 1;
    const auto c = latent.size(-3), h = latent.size(-2), w = latent.size(-1);
    if (h % patch != 0 || w % patch != 0) {
        throw DimensionError("latent " + shape_str(latent.shape()) + " is not divisible by patch size " +
                             std::to_string(patch));
    }
    const auto tokens = (h / patch) * (w / patch);
    Shape out = batched ? Shape{b, tokens, patch * patch * c} : Shape{tokens, patch * patch * c};
    return permute_elements(latent, patch_sources(b, c, h, w, patch), std::move(out), "patchify");
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::int64_t channels, std::int64_t height, std::int64_t width,
                     std::int64_t patch) {
    if (patch < 1) throw ConfigError("patch size must be >= 1");
    if (height % patch != 0 || width % patch != 0) {
        throw DimensionError("target " + std::to_string(height) + "x" + std::to_string(width) +
                             " is not divisible by patch size " + std::to_string(patch));
    }
    const bool batched = tokens.ndim() == 3;
    const auto b = batched ? tokens.size(0) : 1;
    const auto count = (height / patch) * (width / patch);
    if ((!batched && tokens.ndim() != 2) || tokens.size(-2) != count || tokens.size(-1) != patch * patch * channels) {
        throw DimensionError("tokens " + shape_str(tokens.shape()) + " do not match a " + std::to_string(channels) +
                             "x" + std::to_string(height) + "x" + std::to_string(width) + " latent at patch " +
                             std::to_string(patch));
    }
    auto fwd = patch_sources(b, channels, height, width, patch);
    std::vector<std::int64_t> inverse(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inverse[static_cast<std::size_t>(fwd[i])] = static_cast<std::int64_t>(i);
    Shape out = batched ? Shape{b, channels, height, width} : Shape{channels, height, width};
    return permute_elements(tokens, std::move(inverse), std::move(out), "unpatchify");
}

std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <class T>
ToyTextEmbedder<T>::ToyTextEmbedder(Rng& rng, std::int64_t vocab_size, std::int64_t embed_dim,
                                    std::int64_t max_tokens)
    : max_tokens_(max_tokens) {
    std::vector<T> table(static_cast<std::size_t>(vocab_size * embed_dim));
    for (auto& v : table) v = static_cast<T>(rng.normal());
    std::vector<T> bos(static_cast<std::size_t>(embed_dim));
    for (auto& v : bos) v = static_cast<T>(rng.normal());
    table_ = Tensor<T>::from_data({vocab_size, embed_dim}, std::move(table));
    bos_ = Tensor<T>::from_data({1, embed_dim}, std::move(bos));
}

template <class T>
std::vector<std::int64_t> ToyTextEmbedder<T>::tokenize(std::string_view prompt) const {
    std::vector<std::int64_t> ids;
    const auto vocab = static_cast<std::uint64_t>(table_.size(0));
    std::size_t pos = 0;
    while (pos < prompt.size() && static_cast<std::int64_t>(ids.size()) < max_tokens_ - 1) {
        while (pos < prompt.size() && std::isspace(static_cast<unsigned char>(prompt[pos]))) ++pos;
        auto end = pos;
        while (end < prompt.size() && !std::isspace(static_cast<unsigned char>(prompt[end]))) ++end;
        if (end > pos) ids.push_back(static_cast<std::int64_t>(fnv1a64(prompt.substr(pos, end - pos)) % vocab));
        pos = end;
    }
    return ids;
}

template <class T>
TextEmbedding<T> ToyTextEmbedder<T>::operator()(std::string_view prompt) const {
    auto ids = tokenize(prompt);
    const auto dim = table_.size(1);
    std::vector<T> rows(bos_.data().begin(), bos_.data().end());
    rows.reserve(static_cast<std::size_t>((ids.size() + 1) * static_cast<std::size_t>(dim)));
    for (auto id : ids) {
        auto src = table_.data().subspan(static_cast<std::size_t>(id * dim), static_cast<std::size_t>(dim));
        rows.insert(rows.end(), src.begin(), src.end());
    }
    return {Tensor<T>::from_data({static_cast<std::int64_t>(ids.size()) + 1, dim}, std::move(rows))};
}

template <class T>
void ToyTextEmbedder<T>::collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".table", table_, false});
    out.push_back({prefix + ".bos", bos_, false});
}

template <class T>
Tensor<T> timestep_features(std::span<const double> t, std::int64_t dim) {
    const auto half = dim / 2;
    std::vector<T> out(t.size() * static_cast<std::size_t>(dim));
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (std::int64_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double arg = 1000.0 * t[b] * freq;
            out[b * static_cast<std::size_t>(dim) + static_cast<std::size_t>(i)] = static_cast<T>(std::cos(arg));
            out[b * static_cast<std::size_t>(dim) + static_cast<std::size_t>(half + i)] = static_cast<T>(std::sin(arg));
        }
    }
    return Tensor<T>::from_data({static_cast<std::int64_t>(t.size()), dim}, std::move(out));
}

template <class T>
DiT<T>::DiT(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const auto d = config_.model_dim;
    const auto patch_dim = config_.patch_size * config_.patch_size * config_.latent_channels;
    text_embedder_ = ToyTextEmbedder<T>(rng, config_.vocab_hash_size, config_.text_embed_dim, config_.max_text_tokens);
    image_in_ = Linear<T>::init(rng, patch_dim, d, true);
    text_in_ = Linear<T>::init(rng, config_.text_embed_dim, d, true);
    time_fc1_ = Linear<T>::init(rng, config_.time_freq_dim, d, true);
    time_fc2_ = Linear<T>::init(rng, d, d, true);
    time_fc3_ = Linear<T>::init(rng, d, d, true);
    if (config_.pooled_text_conditioning) pooled_text_ = Linear<T>::init(rng, config_.text_embed_dim, d, true);
    for (std::int64_t l = 0; l < config_.layers; ++l) blocks_.push_back(DiTBlock<T>::init(rng, config_.block_spec(l)));
    final_modulation_ = Linear<T>::init(rng, d, 2 * d, true, true);
    head_ = Linear<T>::init(rng, d, patch_dim, true, true);

    text_embedder_.collect("text_embedder", params_);
    image_in_.collect("image_in", params_);
    text_in_.collect("text_in", params_);
    time_fc1_.collect("time_mlp.fc1", params_);
    time_fc2_.collect("time_mlp.fc2", params_);
    time_fc3_.collect("time_mlp.fc3", params_);
    if (config_.pooled_text_conditioning) pooled_text_.collect("pooled_text", params_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("blocks." + std::to_string(l), params_);
    final_modulation_.collect("final.modulation", params_);
    head_.collect("final.head", params_);
}

template <class T>
std::int64_t DiT<T>::trainable_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) {
        if (p.trainable) n += p.tensor.numel();
    }
    return n;
}

template <class T>
Tensor<T> DiT<T>::embed_timestep(std::span<const double> t) const {
    for (double v : t) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("timestep " + std::to_string(v) + " outside [0, 1]");
    }
    auto h = silu(time_fc1_(timestep_features<T>(t, config_.time_freq_dim)));
    h = silu(time_fc2_(h));
    return time_fc3_(h);
}

template <class T>
Tensor<T> DiT<T>::forward(const Tensor<T>& latents, std::span<const double> t,
                          std::span<const TextEmbedding<T>> texts) const {
    const auto& cfg = config_;
    if (latents.ndim() != 4 || latents.size(1) != cfg.latent_channels) {
        throw DimensionError("forward expects latents [B, " + std::to_string(cfg.latent_channels) + ", H, W], got " +
                             shape_str(latents.shape()));
    }
    const auto batch = latents.size(0), height = latents.size(2), width = latents.size(3);
    if (static_cast<std::int64_t>(t.size()) != batch || static_cast<std::int64_t>(texts.size()) != batch) {
        throw DimensionError("forward: batch of " + std::to_string(batch) + " latents with " +
                             std::to_string(t.size()) + " timesteps and " + std::to_string(texts.size()) + " prompts");
    }
    const auto p = cfg.patch_size;
    const auto grid_h = height / p, grid_w = width / p, grid = grid_h * grid_w;
    const auto patch_dim = p * p * cfg.latent_channels;

    auto image_tokens = image_in_(reshape(patchify(latents, p), {batch * grid, patch_dim}));

    std::vector<Tensor<T>> text_parts;
    std::vector<std::int64_t> lengths;
    for (const auto& te : texts) {
        if (te.tokens.ndim() != 2 || te.size() < 1 || te.tokens.size(1) != cfg.text_embed_dim) {
            throw DimensionError("text embedding " + shape_str(te.tokens.shape()) + " must be [n >= 1, " +
                                 std::to_string(cfg.text_embed_dim) + "]");
        }
        if (te.size() > cfg.max_text_tokens) {
            throw DimensionError("text of " + std::to_string(te.size()) + " tokens exceeds max_text_tokens " +
                                 std::to_string(cfg.max_text_tokens));
        }
        text_parts.push_back(te.tokens);
        lengths.push_back(te.size() + grid);
    }
    auto all_text = concat_rows(std::span<const Tensor<T>>(text_parts));
    const auto text_rows = all_text.size(0);
    auto text_tokens = text_in_(all_text);

    // Packed order per sample: its text tokens (BOS first), then its image tokens.
    auto layout = SequenceLayout::from_lengths(lengths);
    std::vector<std::int64_t> order, image_rows;
    std::vector<PositionId> positions;
    order.reserve(static_cast<std::size_t>(layout.tokens()));
    const auto img_pos = image_positions(grid_h, grid_w);
    std::int64_t text_cursor = 0;
    for (std::int64_t b = 0; b < batch; ++b) {
        const auto n_text = texts[static_cast<std::size_t>(b)].size();
        for (std::int64_t i = 0; i < n_text; ++i) {
            order.push_back(text_cursor + i);
            positions.push_back({0, i});
        }
        text_cursor += n_text;
        for (std::int64_t g = 0; g < grid; ++g) {
            image_rows.push_back(static_cast<std::int64_t>(order.size()));
            order.push_back(text_rows + b * grid + g);
            positions.push_back(img_pos[static_cast<std::size_t>(g)]);
        }
    }
    std::vector<Tensor<T>> both{text_tokens, image_tokens};
    auto x = gather_rows(concat_rows(std::span<const Tensor<T>>(both)), std::span<const std::int64_t>(order));

    auto cond = embed_timestep(t);
    if (cfg.pooled_text_conditioning) {
        std::vector<T> pooled(static_cast<std::size_t>(batch * cfg.text_embed_dim), T(0));
        for (std::int64_t b = 0; b < batch; ++b) {
            const auto& te = texts[static_cast<std::size_t>(b)].tokens;
            const auto n = te.size(0);
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t c = 0; c < cfg.text_embed_dim; ++c) {
                    pooled[static_cast<std::size_t>(b * cfg.text_embed_dim + c)] +=
                        te.data()[static_cast<std::size_t>(i * cfg.text_embed_dim + c)] / static_cast<T>(n);
                }
            }
        }
        cond = add(cond, pooled_text_(Tensor<T>::from_data({batch, cfg.text_embed_dim}, std::move(pooled))));
    }

    AttentionOptions options{true, cfg.rope_base};
    for (const auto& block : blocks_) x = block(x, cond, positions, layout, options);

    auto final_mod = final_modulation_(silu(cond));
    auto owner = layout.row_owner();
    auto per_row = gather_rows(final_mod, std::span<const std::int64_t>(owner));
    const auto d = cfg.model_dim;
    auto h = add(mul(rms_normalize(x, static_cast<T>(cfg.norm_eps)), add_scalar(slice_last(per_row, d, d), T(1))),
                 slice_last(per_row, 0, d));
    auto out = head_(gather_rows(h, std::span<const std::int64_t>(image_rows)));
    return unpatchify(reshape(out, {batch, grid, patch_dim}), cfg.latent_channels, height, width, p);
}

template class ToyTextEmbedder<float>;
template class ToyTextEmbedder<double>;
template class DiT<float>;
template class DiT<double>;
template Tensor<float> patchify(const Tensor<float>&, std::int64_t);
template Tensor<double> patchify(const Tensor<double>&, std::int64_t);
template Tensor<float> unpatchify(const Tensor<float>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template Tensor<double> unpatchify(const Tensor<double>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template Tensor<float> timestep_features(std::span<const double>, std::int64_t);
template Tensor<double> timestep_features(std::span<const double>, std::int64_t);

}  // namespace mmh
