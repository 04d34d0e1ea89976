#include <cmath>

#include "doctest.h"
#include "mmhdit/errors.hpp"
#include "mmhdit/flow.hpp"
#include "test_util.hpp"

using namespace mmh;
using mmh::test::check_gradients;
using mmh::test::random_tensor;

namespace {

std::vector<double> values(const Tensor64& t) { return {t.data().begin(), t.data().end()}; }

// Velocity that ignores x and t entirely.
class ConstantField final : public VelocityField<double> {
   public:
    explicit ConstantField(Tensor64 u) : u_(std::move(u)) {}
    Tensor64 velocity(const Tensor64& x, std::span<const double>, std::span<const TextEmbedding<double>>) const override {
        const auto per = u_.numel();
        std::vector<double> out(static_cast<std::size_t>(x.numel()));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = u_.data()[i % static_cast<std::size_t>(per)];
        return Tensor64::from_data(x.shape(), std::move(out));
    }
    TextEmbedding<double> encode_prompt(std::string_view) const override { return {Tensor64::zeros({1, 2})}; }

   private:
    Tensor64 u_;
};

// v = -0.5 x + (number of text tokens) + t, so the two guidance branches differ.
class AffineField final : public VelocityField<double> {
   public:
    Tensor64 velocity(const Tensor64& x, std::span<const double> t,
                      std::span<const TextEmbedding<double>> texts) const override {
        const auto per = x.numel() / x.size(0);
        std::vector<double> out(static_cast<std::size_t>(x.numel()));
        for (std::size_t i = 0; i < out.size(); ++i) {
            const auto b = i / static_cast<std::size_t>(per);
            out[i] = -0.5 * x.data()[i] + static_cast<double>(texts[b].size()) + t[b];
        }
        return Tensor64::from_data(x.shape(), std::move(out));
    }
    TextEmbedding<double> encode_prompt(std::string_view prompt) const override {
        return {Tensor64::zeros({prompt.empty() ? 1 : 3, 2})};
    }
};

ModelConfig tiny_config() {
    ModelConfig c;
    c.layers = 2;
    c.model_dim = 32;
    c.head_schedule = {2, 8};
    c.latent_channels = 4;
    c.text_embed_dim = 8;
    c.max_text_tokens = 6;
    c.vocab_hash_size = 32;
    c.mlp_hidden_dim = 24;
    c.time_freq_dim = 8;
    return c;
}

}  // namespace

TEST_CASE("interpolant endpoints and scalar example") {
    Rng rng(1);
    auto x1 = random_tensor({2, 3}, rng, 1.0, false);
    auto x0 = random_tensor({2, 3}, rng, 1.0, false);
    CHECK(values(assemble_flow_batch(x1, x0, {0.0, 0.0}, 0.0).xt) == values(x0));
    CHECK(values(assemble_flow_batch(x1, x0, {1.0, 1.0}, 0.0).xt) == values(x1));

    auto b = assemble_flow_batch(Tensor64::from_data({1, 1}, {2.0}), Tensor64::from_data({1, 1}, {0.0}), {0.25}, 0.0);
    CHECK(b.xt.item() == 0.5);
    CHECK(b.target_u.item() == 2.0);

    CHECK_THROWS_AS(assemble_flow_batch(x1, x0, {0.5}, 0.0), ContractError);
    CHECK_THROWS_AS(assemble_flow_batch(x1, x0, {0.5, 1.5}, 0.0), DomainError);
    CHECK_THROWS_AS(assemble_flow_batch(x1, x0, {0.5, 0.5}, 0.1), ContractError);
}

TEST_CASE("make_flow_batch satisfies the batch invariants") {
    Rng data_rng(2);
    auto x1 = random_tensor({4, 2, 2, 2}, data_rng, 1.0, false);
    for (double sigma : {0.0, 0.05}) {
        Rng rng(3);
        auto b = make_flow_batch(x1, rng, sigma);
        REQUIRE(b.t.size() == 4);
        for (double t : b.t) CHECK((t >= 0.0 && t <= 1.0));
        for (std::size_t i = 0; i < 32; ++i) {
            const double t = b.t[i / 8];
            const double expect = t * b.x1.data()[i] + (1 - t) * b.x0.data()[i] + sigma * b.eps.data()[i];
            CHECK(std::abs(b.xt.data()[i] - expect) < 1e-12);
            CHECK(b.target_u.data()[i] == b.x1.data()[i] - b.x0.data()[i]);
        }
    }
}

TEST_CASE("icfm_loss: zero when prediction equals target, closed form at zero init") {
    Rng rng(4);
    {
        // A constant field can only match per-row targets if both rows agree.
        auto same = assemble_flow_batch(Tensor64::from_data({2, 2}, {1, 2, 1, 2}), Tensor64::zeros({2, 2}), {0.3, 0.6}, 0.0);
        ConstantField hit(Tensor64::from_data({2}, {1, 2}));
        std::vector<TextEmbedding<double>> texts(2, hit.encode_prompt(""));
        CHECK(icfm_loss<double>(hit, same, texts).item() == 0.0);
    }

    DiT<double> model(tiny_config(), 5);
    auto lat1 = random_tensor({2, 4, 4, 4}, rng, 1.0, false);
    auto b2 = make_flow_batch(lat1, rng, 0.0);
    std::vector<TextEmbedding<double>> texts{model.encode_prompt("a"), model.encode_prompt("b c")};
    double expect = 0;
    for (auto v : b2.target_u.data()) expect += v * v;
    expect /= static_cast<double>(b2.target_u.numel());
    CHECK(icfm_loss<double>(model, b2, texts).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("icfm_loss: gradient against finite differences") {
    DiT<double> model(tiny_config(), 6);
    Rng rng(7);
    for (const auto& p : model.parameters()) {
        auto t = p.tensor;
        for (auto& v : t.data_mut()) v = rng.normal() * 0.25;
    }
    auto x1 = random_tensor({2, 4, 2, 2}, rng, 1.0, false);
    auto batch = make_flow_batch(x1, rng, 0.05);
    std::vector<TextEmbedding<double>> texts{model.encode_prompt("left"), model.encode_prompt("")};
    std::vector<Tensor64> params;
    for (const auto& p : model.parameters()) {
        if (p.trainable && (p.name.rfind("blocks.1.", 0) == 0 || p.name.rfind("final.", 0) == 0 ||
                            p.name.rfind("image_in", 0) == 0)) {
            params.push_back(p.tensor);
        }
    }
    auto r = check_gradients(params, [&] { return icfm_loss<double>(model, batch, texts); });
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("cfg_velocity") {
    auto vu = Tensor64::from_data({2}, {0.5, -1.0});
    auto vc = Tensor64::from_data({2}, {2.0, 3.0});
    CHECK(values(cfg_velocity(vu, vc, 1.0)) == values(vc));
    CHECK(values(cfg_velocity(vu, vc, 0.0)) == values(vu));
    CHECK(cfg_velocity(Tensor64::scalar(0.0), Tensor64::scalar(1.0), 5.0).item() == 5.0);
    CHECK_THROWS_AS(cfg_velocity(vu, Tensor64::zeros({3}), 1.0), DimensionError);
}

TEST_CASE("sampler config validation") {
    CHECK_THROWS_AS((SamplerConfig{0, 5.0, 1}.validate()), ConfigError);
    CHECK_THROWS_AS((SamplerConfig{4, -1.0, 1}.validate()), ConfigError);
    CHECK_NOTHROW((SamplerConfig{1, 0.0, 1}.validate()));
}

TEST_CASE("sample: one Euler step matches hand computation") {
    AffineField field;
    std::vector<TextEmbedding<double>> texts{field.encode_prompt("prompt"), field.encode_prompt("prompt")};
    const Shape latent{1, 2, 2};
    const SamplerConfig cfg{1, 5.0, 42};
    auto out = sample<double>(field, texts, {}, latent, cfg);
    auto x0 = gaussian_noise<double>({2, 1, 2, 2}, 42);
    for (std::size_t i = 0; i < 8; ++i) {
        const double x = x0.data()[i];
        const double vc = -0.5 * x + 3.0, vu = -0.5 * x + 1.0;
        CHECK(out.data()[i] == doctest::Approx(x + (vu + 5.0 * (vc - vu))).epsilon(1e-14));
    }

    // A negative prompt replaces the empty-prompt baseline.
    std::vector<TextEmbedding<double>> negative(2, field.encode_prompt("bad"));
    auto neg = sample<double>(field, texts, negative, latent, cfg);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(neg.data()[i] == doctest::Approx(x0.data()[i] + (-0.5 * x0.data()[i] + 3.0)).epsilon(1e-14));
    }
}

TEST_CASE("sample: two Euler steps follow the recurrence") {
    AffineField field;
    std::vector<TextEmbedding<double>> texts{field.encode_prompt("p")};
    auto out = sample<double>(field, texts, {}, {2, 1, 1}, SamplerConfig{2, 2.0, 9});
    auto x = gaussian_noise<double>({1, 2, 1, 1}, 9);
    for (std::size_t i = 0; i < 2; ++i) {
        double v = x.data()[i];
        for (int step = 0; step < 2; ++step) {
            const double t = step * 0.5;
            const double vc = -0.5 * v + 3.0 + t, vu = -0.5 * v + 1.0 + t;
            v += 0.5 * (vu + 2.0 * (vc - vu));
        }
        CHECK(out.data()[i] == doctest::Approx(v).epsilon(1e-14));
    }
}

TEST_CASE("sample: Euler is exact on constant fields for any step count") {
    Rng rng(10);
    auto target = random_tensor({3, 2, 2}, rng, 1.0, false);
    const std::uint64_t seed = 11;
    auto x0 = gaussian_noise<double>({1, 3, 2, 2}, seed);
    std::vector<double> u(12);
    for (std::size_t i = 0; i < 12; ++i) u[i] = target.data()[i] - x0.data()[i];
    ConstantField field(Tensor64::from_data({12}, u));
    std::vector<TextEmbedding<double>> texts{field.encode_prompt("")};
    for (std::int64_t steps : {1, 2, 7, 50}) {
        auto out = sample<double>(field, texts, {}, {3, 2, 2}, SamplerConfig{steps, 5.0, seed});
        for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(out.data()[i] - target.data()[i]) < 1e-12);
    }
}

TEST_CASE("sample: deterministic for a fixed seed") {
    DiT<double> model(tiny_config(), 12);
    Rng rng(13);
    for (const auto& p : model.parameters()) {
        auto t = p.tensor;
        for (auto& v : t.data_mut()) v = rng.normal() * 0.2;
    }
    std::vector<TextEmbedding<double>> texts{model.encode_prompt("red"), model.encode_prompt("blue")};
    const SamplerConfig cfg{3, 5.0, 77};
    auto a = sample<double>(model, texts, {}, {4, 4, 4}, cfg);
    auto b = sample<double>(model, texts, {}, {4, 4, 4}, cfg);
    CHECK(a.shape() == Shape{2, 4, 4, 4});
    CHECK(values(a) == values(b));
    auto c = sample<double>(model, texts, {}, {4, 4, 4}, SamplerConfig{3, 5.0, 78});
    CHECK(values(a) != values(c));
}
