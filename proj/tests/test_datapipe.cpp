#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "mmhdit/container.hpp"
#include "mmhdit/datapipe.hpp"
#include "mmhdit/errors.hpp"

using namespace mmh;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "mmhdit_datapipe_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::set<int> surviving_labels(const test::PlantedCorpus& c, const std::vector<std::size_t>& reps) {
    std::set<int> out;
    for (auto i : reps) out.insert(c.label[i]);
    return out;
}

std::size_t index_of(const EmbeddingSet& s, const std::string& id) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.ids[i] == id) return i;
    }
    return s.size();
}

Image gradient_image(std::int64_t w, std::int64_t h, int seed) {
    Image img{w, h, {}};
    img.rgb.resize(static_cast<std::size_t>(w * h * 3));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.rgb[static_cast<std::size_t>((y * w + x) * 3 + c)] =
                    static_cast<std::uint8_t>((x * (c + 1) + y * 3 + seed * 40) % 256);
    return img;
}

}  // namespace

TEST_CASE("score_bucket boundaries") {
    CHECK(score_bucket(7.0) == QualityTag::excellent);
    CHECK(score_bucket(5.5) == QualityTag::good);
    CHECK(score_bucket(4.5) == QualityTag::average);
    CHECK(score_bucket(3.9) == QualityTag::excluded);
    CHECK(score_bucket(10.0) == QualityTag::excellent);
    CHECK(score_bucket(6.0) == QualityTag::good);
    CHECK(score_bucket(5.2) == QualityTag::average);
    CHECK(score_bucket(4.0) == QualityTag::average);
    CHECK(score_bucket(1.0) == QualityTag::excluded);
    CHECK_THROWS_AS(score_bucket(0.5), ValidationError);
    CHECK_THROWS_AS(score_bucket(10.01), ValidationError);
    CHECK_THROWS_AS(score_bucket(std::nan("")), ValidationError);
}

TEST_CASE("score_bucket is total and monotone") {
    auto rank = [](QualityTag t) { return t == QualityTag::excellent ? 3 : t == QualityTag::good ? 2 : t == QualityTag::average ? 1 : 0; };
    int previous = -1;
    for (int i = 0; i <= 9000; ++i) {
        const double s = 1.0 + i * 0.001;
        const int r = rank(score_bucket(s));
        CHECK(r >= previous);
        previous = r;
    }
}

TEST_CASE("corpus manifest round trip and line-numbered errors") {
    auto dir = scratch_dir("manifest");
    std::vector<CorpusRecord> records{{"a", "a.png", "a cat", 7.0, QualityTag::excellent}, {"b", "b.png", "", {}, {}}};
    write_manifest(dir / "m.jsonl", records);
    auto back = read_manifest(dir / "m.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].quality_tag == QualityTag::excellent);
    CHECK_FALSE(back[1].quality_score.has_value());

    std::ofstream(dir / "bad.jsonl") << R"({"id": "x"})" << "\n\n" << R"({"id": 3})" << "\n";
    try {
        read_manifest(dir / "bad.jsonl");
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find(":3:") != std::string::npos);
        CHECK(std::string(e.what()).find("'id'") != std::string::npos);
    }
    std::ofstream(dir / "broken.jsonl") << "{not json\n";
    CHECK_THROWS_AS(read_manifest(dir / "broken.jsonl"), ValidationError);
}

TEST_CASE("embedding set validation and file round trip") {
    EmbeddingSet s;
    s.add("x", test::unit({1, 2, 2}));
    s.add("y", test::unit({0, 1, 0}));
    CHECK_NOTHROW(s.validate());
    auto path = scratch_dir("emb") / "e.mmh";
    s.save(path);
    auto back = EmbeddingSet::load(path);
    CHECK(back.ids == s.ids);
    CHECK(back.data == s.data);

    EmbeddingSet bad;
    bad.add("x", std::vector<float>{1, 1});
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_THROWS_AS(bad.add("y", std::vector<float>{1, 0, 0}), DimensionError);
}

TEST_CASE("dbscan: identical, orthogonal and a brute-force example") {
    EmbeddingSet same;
    for (int i = 0; i < 5; ++i) same.add("s" + std::to_string(i), test::unit({1, 1, 0}));
    auto r = dbscan_cosine(same, 0.9, 2);
    CHECK(r.clusters.size() == 1);
    CHECK(r.clusters[0].size() == 5);
    CHECK(r.noise.empty());

    EmbeddingSet ortho;
    for (int i = 0; i < 4; ++i) {
        std::vector<double> v(4, 0.0);
        v[static_cast<std::size_t>(i)] = 1;
        ortho.add("o" + std::to_string(i), test::unit(v));
    }
    r = dbscan_cosine(ortho, 0.9, 2);
    CHECK(r.clusters.empty());
    CHECK(r.noise.size() == 4);

    // v1.v2 = 0.99; everything else pairwise below 0.5.
    EmbeddingSet five;
    five.add("v1", test::unit({1, 0, 0, 0, 0}));
    five.add("v2", test::unit({0.99, std::sqrt(1 - 0.99 * 0.99), 0, 0, 0}));
    five.add("v3", test::unit({0, 0, 1, 0, 0}));
    five.add("v4", test::unit({0, 0, 0.3, 1, 0}));
    five.add("v5", test::unit({0.2, 0, 0, 0, 1}));
    // Oracle: brute-force pairwise similarities.
    int above = 0;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = i + 1; j < 5; ++j) {
            const double c = cosine(five.row(i), five.row(j));
            if (c >= 0.9) ++above;
            else CHECK(c < 0.5);
        }
    CHECK(above == 1);
    r = dbscan_cosine(five, 0.9, 2);
    REQUIRE(r.clusters.size() == 1);
    CHECK(r.clusters[0] == std::vector<std::size_t>{0, 1});
    CHECK(r.noise == std::vector<std::size_t>{2, 3, 4});

    CHECK(dbscan_cosine(EmbeddingSet{}, 0.9, 2).clusters.empty());
    CHECK_THROWS_AS(dbscan_cosine(five, 1.0, 2), ConfigError);
}

TEST_CASE("dbscan: border points take the lowest-id core neighbour, result is order independent") {
    // b is a border point of both the c-core and the d-core (min_pts 4).
    EmbeddingSet s;
    const double t = 0.5;
    auto at = [](double angle) { return test::unit({std::cos(angle), std::sin(angle)}); };
    s.add("c1", at(0.0));
    s.add("c2", at(0.05));
    s.add("c3", at(0.10));
    s.add("c4", at(0.15));
    s.add("b", at(0.62));
    s.add("d1", at(1.10));
    s.add("d2", at(1.15));
    s.add("d3", at(1.20));
    s.add("d4", at(1.25));
    const double thr = std::cos(t);  // neighbours within 0.5 rad; b only reaches c4 and d1
    auto r = dbscan_cosine(s, thr, 4);
    REQUIRE(r.clusters.size() == 2);
    CHECK(r.noise.empty());
    const auto b = index_of(s, "b");
    CHECK(std::find(r.clusters[0].begin(), r.clusters[0].end(), b) != r.clusters[0].end());

    CHECK(r.clusters[0].size() == 5);
    CHECK(r.clusters[1].size() == 4);
    std::vector<std::size_t> reversed{8, 7, 6, 5, 4, 3, 2, 1, 0};
    auto r2 = dbscan_cosine(s, reversed, thr, 4);
    CHECK(r2.clusters == r.clusters);
    CHECK(r2.noise == r.noise);
}

TEST_CASE("dedup_round: duplicate-free input is unchanged") {
    auto c = test::planted_corpus(1, 0, 0, 40);
    DedupConfig cfg;
    cfg.partition_size = 16;
    auto s0 = initial_dedup_state(c.set);
    auto s1 = dedup_round(s0, c.set, cfg);
    CHECK(s1.round == 1);
    CHECK(s1.representatives == s0.representatives);
}

TEST_CASE("dedup_round: one planted pair per chunk removes two") {
    // 40 items, partition 20: chunk 0 is r000..r019, chunk 1 is r020..r039.
    EmbeddingSet s;
    auto base = test::planted_corpus(2, 0, 0, 38).set;
    for (std::size_t i = 0; i < 38; ++i) {
        std::vector<float> v(base.row(i).begin(), base.row(i).end());
        s.add(base.ids[i], v);
    }
    // Near copies of r003 and r025, with ids that sort into the same chunks.
    auto copy = [&](std::size_t src, const std::string& id) {
        std::vector<double> v(base.row(src).begin(), base.row(src).end());
        v[0] += 0.05;
        s.add(id, test::unit(v));
    };
    copy(3, "r003b");
    copy(25, "r025b");
    DedupConfig cfg;
    cfg.partition_size = 20;
    RoundLog log;
    auto next = dedup_round(initial_dedup_state(s), s, cfg, &log);
    CHECK(log.chunks == 2);
    CHECK(log.clusters == 2);
    CHECK(next.representatives.size() == 38);
}

TEST_CASE("dedup_round: cross-chunk duplicates survive round 0 and merge later") {
    // 3 chunks of 44/43/43 in round 0; groups 0 and 1 straddle both boundaries.
    auto c = test::planted_corpus(3, 20, 5, 30, {41, 85});
    DedupConfig cfg;
    cfg.partition_size = 64;
    auto s0 = initial_dedup_state(c.set);
    auto s1 = dedup_round(s0, c.set, cfg);
    auto count = [&](const DedupState& s, int g) {
        int n = 0;
        for (auto i : s.representatives) n += c.label[i] == g;
        return n;
    };
    CHECK(count(s1, 0) == 2);
    CHECK(count(s1, 1) == 2);
    // Unpinned groups are scattered over chunks too; later shuffled rounds merge everything.
    auto report = dedup_converge(c.set, cfg);
    CHECK(report.converged);
    CHECK(report.representatives.size() == 50);
    std::vector<std::size_t> reps;
    for (const auto& id : report.representatives) reps.push_back(index_of(c.set, id));
    CHECK(surviving_labels(c, reps).size() == 50);
}

TEST_CASE("dedup_converge: planted groups, soundness and idempotence") {
    auto c = test::planted_corpus(4, 20, 5, 0);
    DedupConfig cfg;
    auto report = dedup_converge(c.set, cfg);
    CHECK(report.converged);
    CHECK(report.representatives.size() == 20);
    std::vector<std::size_t> reps;
    for (const auto& id : report.representatives) reps.push_back(index_of(c.set, id));
    CHECK(surviving_labels(c, reps).size() == 20);
    for (std::size_t i = 0; i < reps.size(); ++i)
        for (std::size_t j = i + 1; j < reps.size(); ++j) CHECK(cosine(c.set.row(reps[i]), c.set.row(reps[j])) < 0.9);

    EmbeddingSet sub;
    for (auto i : reps) {
        std::vector<float> v(c.set.row(i).begin(), c.set.row(i).end());
        sub.add(c.set.ids[i], v);
    }
    auto again = dedup_converge(sub, cfg);
    CHECK(again.representatives == report.representatives);
    CHECK(again.rounds.size() == 1);  // one confirmation round

    auto j = report.to_json();
    CHECK(j["representative_count"] == 20);
    CHECK(j["rounds"].size() == report.rounds.size());
    for (std::size_t r = 1; r < report.rounds.size(); ++r) CHECK(report.rounds[r].input_size <= report.rounds[r - 1].input_size);
}

TEST_CASE("dedup_converge: multi-chunk runs and the max_rounds warning") {
    auto c = test::planted_corpus(5, 20, 5, 30, {41, 85});
    DedupConfig cfg;
    cfg.partition_size = 32;
    cfg.seed = 9;
    auto report = dedup_converge(c.set, cfg);
    CHECK(report.converged);
    CHECK(report.representatives.size() == 50);

    cfg.max_rounds = 1;
    auto short_run = dedup_converge(c.set, cfg);
    CHECK_FALSE(short_run.converged);
    CHECK_FALSE(short_run.warning.empty());
}

TEST_CASE("dedup config JSON") {
    DedupConfig c;
    c.partition_size = 64;
    CHECK(DedupConfig::from_json(c.to_json()).partition_size == 64);
    CHECK_THROWS_AS(DedupConfig::from_json({{"partition", 3}}), ConfigError);
    CHECK_THROWS_AS(DedupConfig::from_json({{"partition_size", 1}}), ConfigError);
}

TEST_CASE("stage_resize examples") {
    Rng rng(1);
    auto p = stage_resize(512, 512, 1, rng);
    CHECK(p.scaled_width == 256);
    CHECK(p.scaled_height == 256);
    CHECK(p.crop.x == 0);
    CHECK(p.crop.width == 256);

    auto q = stage_resize(640, 480, 2, rng);
    CHECK(q.scaled_width == 577);
    CHECK(q.scaled_height == 433);
    CHECK(q.crop.width == 576);
    CHECK(q.crop.height == 384);

    CHECK(stage_resize(300, 1000, 2, rng).skipped);
    CHECK(stage_resize(900, 300, 2, rng).skipped);
    CHECK_FALSE(stage_resize(899, 300, 2, rng).skipped);
    CHECK_THROWS_AS(stage_resize(0, 10, 2, rng), ValidationError);
    CHECK_THROWS_AS(stage_resize(10, 10, 3, rng), ConfigError);
}

TEST_CASE("stage_resize properties over random sizes") {
    Rng rng(2);
    for (int i = 0; i < 500; ++i) {
        const auto w = 64 + static_cast<std::int64_t>(rng.below(3000));
        const auto h = 64 + static_cast<std::int64_t>(rng.below(3000));
        const double aspect = static_cast<double>(w) / static_cast<double>(h);
        for (int stage : {1, 2}) {
            auto p = stage_resize(w, h, stage, rng);
            if (p.skipped) {
                CHECK(stage == 2);
                CHECK(std::max(aspect, 1 / aspect) >= 3.0);
                continue;
            }
            // Aspect preserved to within one pixel per axis.
            CHECK(std::abs(static_cast<double>(p.scaled_height) * aspect - static_cast<double>(p.scaled_width)) <= 1.0 + aspect);
            CHECK(p.crop.x >= 0);
            CHECK(p.crop.y >= 0);
            CHECK(p.crop.x + p.crop.width <= p.scaled_width);
            CHECK(p.crop.y + p.crop.height <= p.scaled_height);
            if (stage == 1) {
                CHECK(std::min(p.scaled_width, p.scaled_height) == 256);
                CHECK(p.crop.width == 256);
                CHECK(p.crop.height == 256);
            } else {
                CHECK(p.crop.width % 64 == 0);
                CHECK(p.crop.height % 64 == 0);
                CHECK(p.crop.width > 0);
                CHECK(p.crop.height > 0);
                CHECK(std::abs(static_cast<double>(p.scaled_width * p.scaled_height) - 250000.0) < 0.01 * 250000.0);
            }
        }
    }
}

TEST_CASE("pooling adapter") {
    PoolingAdapter adapter(16, 8);
    Image flat{16, 8, std::vector<std::uint8_t>(16 * 8 * 3, 255)};
    auto z = adapter.encode(flat);
    CHECK(z.shape() == Shape{16, 1, 2});
    CHECK(z.data()[0] == 1.0f);
    CHECK(z.data()[6] == 0.0f);  // channel 3
    auto back = adapter.decode(z);
    CHECK(back.width == 16);
    CHECK(back.rgb == flat.rgb);
    CHECK_THROWS_AS(adapter.encode(Image{12, 8, std::vector<std::uint8_t>(12 * 8 * 3)}), DimensionError);
}

TEST_CASE("png encode/decode round trip and resize application") {
    auto dir = scratch_dir("png");
    auto img = gradient_image(40, 24, 1);
    write_png(dir / "g.png", img);
    auto back = read_image(dir / "g.png");
    CHECK(back.width == 40);
    CHECK(back.rgb == img.rgb);
    CHECK(encode_png(img) == encode_png(img));

    Rng rng(3);
    auto big = gradient_image(640, 480, 2);
    auto out = apply_resize(big, stage_resize(640, 480, 2, rng));
    CHECK(out.width == 576);
    CHECK(out.height == 384);
}

TEST_CASE("latent cache: empty, round trip, hash skip, errors") {
    auto dir = scratch_dir("cache");
    PoolingAdapter adapter(16, 8);

    auto empty = build_latent_cache({}, dir, adapter, dir / "empty");
    CHECK(empty.entries.empty());
    CHECK(empty.to_json()["entries"].empty());

    write_png(dir / "a.png", gradient_image(640, 480, 1));
    write_png(dir / "b.png", gradient_image(512, 512, 2));
    write_png(dir / "wide.png", gradient_image(800, 200, 3));
    std::vector<CorpusRecord> records{{"a", "a.png", "first", {}, {}},
                                      {"b", "b.png", "second", {}, {}},
                                      {"gone", "missing.png", "", {}, {}},
                                      {"wide", "wide.png", "", {}, {}}};
    auto out = dir / "out";
    auto m1 = build_latent_cache(records, dir, adapter, out);
    CHECK(m1.entries.size() == 2);
    CHECK(m1.encoded == 2);
    CHECK(m1.rewritten);
    REQUIRE(m1.errors.size() == 1);
    CHECK(m1.errors[0].id == "gone");
    REQUIRE(m1.skipped.size() == 1);
    CHECK(m1.skipped[0].id == "wide");

    // Read-back equals a fresh encode, bit for bit.
    auto cached = read_latent_cache(out);
    REQUIRE(cached.size() == 2);
    Rng unused(0);
    auto expect = adapter.encode(apply_resize(read_image(dir / "a.png"), stage_resize(640, 480, 2, unused)));
    CHECK(cached[0].id == "a");
    CHECK(cached[0].latent.shape() == Shape{16, 48, 72});
    CHECK(std::vector<float>(cached[0].latent.data().begin(), cached[0].latent.data().end()) ==
          std::vector<float>(expect.data().begin(), expect.data().end()));
    // Manifest offsets address the payload inside the container file.
    auto bytes = read_file_bytes(out / "latents.mmh");
    const auto& e = m1.entries[0];
    CHECK(e.end - e.begin == 16 * 48 * 72 * 4);
    float first;
    std::memcpy(&first, bytes.data() + e.begin, 4);
    CHECK(first == expect.data()[0]);

    const auto stamp = fs::last_write_time(out / "latents.mmh");
    auto m2 = build_latent_cache(records, dir, adapter, out);
    CHECK(m2.encoded == 0);
    CHECK_FALSE(m2.rewritten);
    CHECK(fs::last_write_time(out / "latents.mmh") == stamp);

    write_png(dir / "b.png", gradient_image(512, 512, 5));
    auto m3 = build_latent_cache(records, dir, adapter, out);
    CHECK(m3.encoded == 1);
    CHECK(m3.rewritten);
}
