#include <filesystem>

#include "doctest.h"
#include "mmhdit/container.hpp"
#include "mmhdit/errors.hpp"
#include "mmhdit/model.hpp"
#include "test_util.hpp"

using namespace mmh;
namespace fs = std::filesystem;

namespace {

std::uint64_t read_u64(const std::vector<std::uint8_t>& b) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
    return v;
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / "mmhdit_container_test";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("crc32 check value") {
    const std::string s = "123456789";
    CHECK(crc32_of({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) == 0xCBF43926u);
}

TEST_CASE("header layout") {
    TensorContainer c;
    c.put("w", Tensor32::from_data({2}, {1.0f, -2.0f}));
    c.config = {{"layers", 2}};
    auto bytes = c.serialize();
    const auto n = read_u64(bytes);
    CHECK(n % 8 == 0);
    auto header = nlohmann::json::parse(std::string(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n)));
    CHECK(header["w"]["dtype"] == "F32");
    CHECK(header["w"]["shape"] == nlohmann::json::array({2}));
    CHECK(header["w"]["data_offsets"] == nlohmann::json::array({0, 8}));
    CHECK(header["__config__"]["layers"] == 2);
    CHECK(bytes.size() == 8 + n + 8);
    // Little-endian IEEE 754: 1.0f = 00 00 80 3f.
    const auto p = 8 + n;
    CHECK(bytes[p + 2] == 0x80);
    CHECK(bytes[p + 3] == 0x3f);
}

TEST_CASE("bit-exact round trip and deterministic bytes") {
    Rng rng(1);
    TensorContainer c;
    auto a = test::random_tensor({3, 4}, rng, 1.0, false);
    std::vector<float> fdata{1.5f, -0.0f, 3.25e-8f};
    c.put("b.float", Tensor32::from_data({3}, fdata));
    c.put("a.double", a);
    c.metadata["note"] = "x";
    auto bytes = c.serialize();
    auto back = TensorContainer::deserialize(bytes);
    auto a2 = back.get<double>("a.double");
    CHECK(a2.shape() == a.shape());
    CHECK(std::vector<double>(a2.data().begin(), a2.data().end()) == std::vector<double>(a.data().begin(), a.data().end()));
    auto f2 = back.get<float>("b.float");
    CHECK(std::vector<float>(f2.data().begin(), f2.data().end()) == fdata);
    CHECK(back.metadata["note"] == "x");
    CHECK(back.serialize() == bytes);
    CHECK(back.names() == std::vector<std::string>{"a.double", "b.float"});
    CHECK_THROWS_AS(back.get<float>("a.double"), IntegrityError);
    CHECK_THROWS_AS(back.get<double>("missing"), IntegrityError);
}

TEST_CASE("model weights survive save/load exactly") {
    auto cfg = ModelConfig::desk();
    DiT<float> model(cfg, 3);
    TensorContainer c;
    for (const auto& p : model.parameters()) c.put(p.name, p.tensor);
    c.config = cfg.to_json();
    auto path = scratch("model.mmh");
    c.save(path);
    CHECK_FALSE(fs::exists(path.string() + ".tmp"));
    auto back = TensorContainer::load(path);
    CHECK(ModelConfig::from_json(back.config) == cfg);
    for (const auto& p : model.parameters()) {
        auto t = back.get<float>(p.name);
        CHECK(std::vector<float>(t.data().begin(), t.data().end()) ==
              std::vector<float>(p.tensor.data().begin(), p.tensor.data().end()));
    }
}

TEST_CASE("corruption is detected and names the tensor") {
    TensorContainer c;
    c.put("alpha", Tensor64::from_data({4}, {1, 2, 3, 4}));
    c.put("beta", Tensor64::from_data({2}, {5, 6}));
    auto bytes = c.serialize();
    auto ranges = c.payload_ranges();

    auto flipped = bytes;
    flipped[static_cast<std::size_t>(ranges["beta"].first) + 3] ^= 0x10;
    try {
        TensorContainer::deserialize(flipped);
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find("beta") != std::string::npos);
    }

    auto truncated = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 4);
    try {
        TensorContainer::deserialize(truncated);
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find("beta") != std::string::npos);
    }

    CHECK_THROWS_AS(TensorContainer::deserialize(std::vector<std::uint8_t>{1, 2, 3}), IntegrityError);
    auto bad_header = bytes;
    bad_header[9] = '!';
    CHECK_THROWS_AS(TensorContainer::deserialize(bad_header), IntegrityError);
    CHECK_THROWS_AS(TensorContainer::load(scratch("does-not-exist.mmh")), FileError);
}
