#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "mmhdit/cli.hpp"
#include "mmhdit/container.hpp"
#include "mmhdit/errors.hpp"
#include "mmhdit/trainer.hpp"

using namespace mmh;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out, err;
    json doc() const { return json::parse(out); }
};

Result cli_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "mmhdit_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

json tiny_config(std::int64_t steps) {
    auto c = TrainConfig::desk();
    c.model.layers = 2;
    c.model.model_dim = 32;
    c.model.head_schedule = {2, 4};
    c.model.mlp_hidden_dim = 48;
    c.model.text_embed_dim = 16;
    c.model.latent_channels = 4;
    c.model.time_freq_dim = 16;
    c.model.vocab_hash_size = 64;
    c.model.max_text_tokens = 6;
    c.stages[0].max_steps = steps;
    c.stages[0].warmup_steps = 2;
    c.stages[0].batch_size = 4;
    c.data.latent_size = 4;
    return c.to_json();
}

fs::path write_config(const fs::path& dir, const json& j) {
    auto p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

/// Trains the tiny config once and returns its weights file.
fs::path tiny_checkpoint() {
    static fs::path cached;
    if (!cached.empty()) return cached;
    auto dir = fresh_dir("tiny_model");
    auto r = cli_run({"train", "--config", write_config(dir, tiny_config(5)).string(), "--run_dir", (dir / "run").string()});
    REQUIRE(r.code == 0);
    cached = dir / "run" / "model.mmh";
    return cached;
}

Image stripes(std::int64_t w, std::int64_t h) {
    Image img{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h * 3))};
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>((i / 3 % 97) * 2);
    return img;
}

}  // namespace

TEST_CASE("image_size parsing") {
    CHECK(cli::parse_image_size("[416,736]") == std::array<std::int64_t, 2>{416, 736});
    CHECK(cli::parse_image_size("'[416,736]'") == std::array<std::int64_t, 2>{416, 736});
    CHECK(cli::parse_image_size("[ 64, 128 ]") == std::array<std::int64_t, 2>{64, 128});
    CHECK_THROWS_AS(cli::parse_image_size("[416]"), ConfigError);
    CHECK_THROWS_AS(cli::parse_image_size("416,736,3"), ConfigError);
    CHECK_NOTHROW(cli::check_image_size({416, 736}, 16));
    try {
        cli::check_image_size({417, 736}, 16);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("divisible by 16") != std::string::npos);
        CHECK(msg.find("416 or 432") != std::string::npos);
    }
    CHECK_THROWS_AS(cli::check_image_size({0, 16}, 16), ConfigError);
}

TEST_CASE("usage errors exit 1") {
    CHECK(cli_run({}).code == cli::usage);
    CHECK(cli_run({"bogus"}).code == cli::usage);
    CHECK(cli_run({"sample", "--prompts", "x"}).code == cli::usage);
    CHECK(cli_run({"--help"}).code == cli::ok);
}

TEST_CASE("shipped configs match the presets and load") {
    const fs::path root = MMHDIT_SOURCE_DIR;
    CHECK(TrainConfig::load(root / "configs" / "desk.json").to_json() == TrainConfig::desk().to_json());
    auto full = TrainConfig::load(root / "configs" / "paper-scale.json");
    CHECK(full.to_json() == TrainConfig::paper_scale().to_json());
    CHECK(full.model.layers == 32);
    CHECK(full.stages[0].lr_start == 2e-4);
    CHECK(full.stages[1].lr_start == 1e-4);
    CHECK(full.stages[1].lr_end == 7e-5);
    CHECK(full.stages[2].lr_start == 2e-5);
    CHECK(full.stages[2].lr_end == 1e-6);
    CHECK(full.stages[0].batch_size == 1024);
    CHECK(full.stages[1].batch_size == 384);
    CHECK(full.optimizer.beta1 == 0.9);
    CHECK(full.optimizer.beta2 == 0.999);
    CHECK(full.optimizer.eps == 1e-8);
}

TEST_CASE("train: artifacts, metrics count, resume") {
    auto dir = fresh_dir("train");
    auto config = write_config(dir, tiny_config(12));
    auto r = cli_run({"train", "--config", config.string(), "--run_dir", (dir / "a").string()});
    REQUIRE(r.code == 0);
    CHECK(r.doc()["finished"] == true);
    CHECK(fs::exists(dir / "a" / "checkpoint.mmh"));
    CHECK(fs::exists(dir / "a" / "model.mmh"));
    CHECK(MetricsLog::read(dir / "a" / "metrics.jsonl").size() == 12);

    auto b = (dir / "b").string();
    r = cli_run({"train", "--config", config.string(), "--run_dir", b, "--max_steps", "5"});
    REQUIRE(r.code == 0);
    CHECK(r.doc()["finished"] == false);
    CHECK(r.doc()["global_step"] == 5);
    r = cli_run({"train", "--config", config.string(), "--run_dir", b, "--resume_latest"});
    REQUIRE(r.code == 0);
    CHECK(read_file_bytes(dir / "b" / "model.mmh") == read_file_bytes(dir / "a" / "model.mmh"));
    CHECK(MetricsLog::read(dir / "b" / "metrics.jsonl").size() == 12);

    r = cli_run({"train", "--config", config.string(), "--run_dir", b, "--resume", (dir / "nope.mmh").string()});
    CHECK(r.code == cli::usage);
}

TEST_CASE("train: config errors are rejected before training") {
    auto dir = fresh_dir("train_bad");
    auto j = tiny_config(3);
    j["model"]["head_schedule"] = {2, 4, 8};
    auto r = cli_run({"train", "--config", write_config(dir, j).string(), "--run_dir", (dir / "run").string()});
    CHECK(r.code == cli::usage);
    CHECK(r.err.find("head_schedule") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "run" / "checkpoint.mmh"));

    j = tiny_config(3);
    j["stages"][0]["lr_end"] = 1.0;
    r = cli_run({"train", "--config", write_config(dir, j).string(), "--run_dir", (dir / "run").string()});
    CHECK(r.code == cli::usage);
    CHECK(r.err.find("stages[0].lr_end") != std::string::npos);

    std::ofstream(dir / "broken.json") << "{\"model\": ";
    r = cli_run({"train", "--config", (dir / "broken.json").string(), "--run_dir", (dir / "run").string()});
    CHECK(r.code == cli::usage);
}

TEST_CASE("sample: published invocation shape, determinism, size errors") {
    auto model = tiny_checkpoint();
    auto dir = fresh_dir("sample");
    auto run = [&](const std::string& out, const std::string& size) {
        return cli_run({"sample", "--prompts", "a red thing", "a blue thing", "--image_size", "'" + size + "'",
                        "--cfg_scale", "'5.0'", "--model_path", model.string(), "--output_dir", (dir / out).string(),
                        "--steps", "4"});
    };
    auto r = run("one", "[64,96]");
    REQUIRE(r.code == 0);
    auto doc = r.doc();
    CHECK(doc["image_size"] == json::array({64, 96}));
    CHECK(doc["cfg_scale"] == 5.0);
    CHECK(doc["samples"].size() == 2);
    auto png = read_image(dir / "one" / "sample_000.png");
    CHECK(png.height == 64);
    CHECK(png.width == 96);
    CHECK(fs::exists(dir / "one" / "manifest.json"));

    REQUIRE(run("two", "[64,96]").code == 0);
    CHECK(read_file_bytes(dir / "one" / "sample_000.png") == read_file_bytes(dir / "two" / "sample_000.png"));
    CHECK(read_file_bytes(dir / "one" / "sample_001.png") == read_file_bytes(dir / "two" / "sample_001.png"));
    CHECK(read_file_bytes(dir / "one" / "sample_000.png") != read_file_bytes(dir / "one" / "sample_001.png"));

    r = run("bad", "[417,736]");
    CHECK(r.code == cli::usage);
    CHECK(r.err.find("not divisible by 16") != std::string::npos);

    r = cli_run({"sample", "--prompts", "x", "--model_path", (dir / "missing.mmh").string()});
    CHECK(r.code == cli::usage);
    CHECK(r.err.find("file") != std::string::npos);

    r = cli_run({"sample", "--prompts", "x", "--model_path", model.string(), "--cfg_scale", "strong"});
    CHECK(r.code == cli::usage);
}

TEST_CASE("sample: a full 416x736 request runs") {
    auto model = tiny_checkpoint();
    auto dir = fresh_dir("sample_big");
    auto r = cli_run({"sample", "--prompts", "A serene lake", "--image_size", "'[416,736]'", "--cfg_scale", "'5.0'",
                      "--model_path", model.string(), "--output_dir", (dir / "output").string(), "--steps", "2"});
    REQUIRE(r.code == 0);
    auto png = read_image(dir / "output" / "sample_000.png");
    CHECK(png.height == 416);
    CHECK(png.width == 736);
}

TEST_CASE("score: buckets and partial failures") {
    auto dir = fresh_dir("score");
    std::vector<CorpusRecord> records{{"a", "a.png", "", 7.0, {}},
                                      {"b", "b.png", "", 5.5, {}},
                                      {"c", "c.png", "", 4.5, {}},
                                      {"d", "d.png", "", 3.9, {}}};
    write_manifest(dir / "in.jsonl", records);
    auto r = cli_run({"score", "--manifest", (dir / "in.jsonl").string(), "--output", (dir / "out.jsonl").string()});
    REQUIRE(r.code == 0);
    auto tagged = read_manifest(dir / "out.jsonl");
    CHECK(tag_name(*tagged[0].quality_tag) == "excellent");
    CHECK(tag_name(*tagged[1].quality_tag) == "good");
    CHECK(tag_name(*tagged[2].quality_tag) == "average");
    CHECK(tag_name(*tagged[3].quality_tag) == "excluded");

    records.push_back({"e", "e.png", "", {}, {}});
    records.push_back({"f", "f.png", "", 12.0, {}});
    write_manifest(dir / "in2.jsonl", records);
    r = cli_run({"score", "--manifest", (dir / "in2.jsonl").string(), "--output", (dir / "out2.jsonl").string()});
    CHECK(r.code == cli::integrity);
    CHECK(r.doc()["errors"].size() == 2);
    CHECK(tag_name(*read_manifest(dir / "out2.jsonl")[0].quality_tag) == "excellent");

    std::ofstream(dir / "bad.jsonl") << R"({"id": "a", "image": "a.png"})" << "\n" << "not json\n";
    r = cli_run({"score", "--manifest", (dir / "bad.jsonl").string(), "--output", (dir / "o.jsonl").string()});
    CHECK(r.code == cli::integrity);
    CHECK(r.err.find(":2:") != std::string::npos);
}

TEST_CASE("dedup: planted corpus report") {
    auto dir = fresh_dir("dedup");
    auto corpus = test::planted_corpus(11, 20, 5, 0);
    corpus.set.save(dir / "emb.mmh");
    std::vector<CorpusRecord> records;
    for (const auto& id : corpus.set.ids) records.push_back({id, id + ".png", "", {}, {}});
    write_manifest(dir / "corpus.jsonl", records);
    auto r = cli_run({"dedup", "--embeddings", (dir / "emb.mmh").string(), "--output_dir", (dir / "out").string(),
                      "--manifest", (dir / "corpus.jsonl").string(), "--partition_size", "32"});
    REQUIRE(r.code == 0);
    auto report = json::parse(std::ifstream(dir / "out" / "report.json"));
    CHECK(report["representative_count"] == 20);
    CHECK(report["converged"] == true);
    CHECK(read_manifest(dir / "out" / "manifest.jsonl").size() == 20);
    auto first = read_file_bytes(dir / "out" / "report.json");
    REQUIRE(cli_run({"dedup", "--embeddings", (dir / "emb.mmh").string(), "--output_dir", (dir / "out").string(),
                     "--manifest", (dir / "corpus.jsonl").string(), "--partition_size", "32"})
                .code == 0);
    CHECK(read_file_bytes(dir / "out" / "report.json") == first);
}

TEST_CASE("prep: resized dims, aspect skip, missing image, idempotence") {
    auto dir = fresh_dir("prep");
    write_png(dir / "wide.png", stripes(640, 480));
    write_png(dir / "tall.png", stripes(100, 400));
    write_png(dir / "low.png", stripes(64, 64));
    std::vector<CorpusRecord> records{{"wide", "wide.png", "a", {}, {}},
                                      {"tall", "tall.png", "b", {}, {}},
                                      {"low", "low.png", "c", 2.0, QualityTag::excluded}};
    write_manifest(dir / "corpus.jsonl", records);
    auto args = std::vector<std::string>{"prep", "--manifest", (dir / "corpus.jsonl").string(), "--output_dir",
                                         (dir / "cache").string(), "--stage", "2"};
    auto r = cli_run(args);
    REQUIRE(r.code == 0);
    auto doc = r.doc();
    REQUIRE(doc["entries"].size() == 1);
    CHECK(doc["entries"][0]["width"] == 576);
    CHECK(doc["entries"][0]["height"] == 384);
    REQUIRE(doc["skipped"].size() == 1);
    CHECK(doc["skipped"][0]["id"] == "tall");
    CHECK(doc["excluded"] == json::array({"low"}));
    CHECK(doc["rewritten"] == true);

    r = cli_run(args);
    REQUIRE(r.code == 0);
    CHECK(r.doc()["rewritten"] == false);
    CHECK(r.doc()["encoded"] == 0);

    records.push_back({"gone", "gone.png", "", {}, {}});
    write_manifest(dir / "corpus.jsonl", records);
    r = cli_run(args);
    CHECK(r.code == cli::integrity);
    CHECK(r.doc()["errors"][0]["id"] == "gone");
}
