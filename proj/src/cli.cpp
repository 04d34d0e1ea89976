#include "mmhdit/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmhdit/container.hpp"
#include "mmhdit/datapipe.hpp"
#include "mmhdit/errors.hpp"
#include "mmhdit/flow.hpp"
#include "mmhdit/trainer.hpp"

namespace mmh::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::array<std::int64_t, 2> parse_image_size(const std::string& text) {
    static const std::regex pattern(R"(^\s*['"]?\s*\[?\s*(\d+)\s*[, x]\s*(\d+)\s*\]?\s*['"]?\s*$)");
    std::smatch m;
    if (!std::regex_match(text, m, pattern)) {
        throw ConfigError("--image_size: expected '[height,width]', got '" + text + "'");
    }
    return {std::stoll(m[1].str()), std::stoll(m[2].str())};
}

void check_image_size(const std::array<std::int64_t, 2>& size, std::int64_t factor) {
    static const char* axis[] = {"height", "width"};
    for (int i = 0; i < 2; ++i) {
        const auto v = size[static_cast<std::size_t>(i)];
        if (v > 0 && v % factor == 0) continue;
        const auto lo = std::max<std::int64_t>(factor, v / factor * factor);
        const auto hi = lo < v ? lo + factor : lo;
        std::string hint = lo == hi ? std::to_string(lo) : std::to_string(lo) + " or " + std::to_string(hi);
        throw ConfigError("--image_size: " + std::string(axis[i]) + " " + std::to_string(v) +
                          " is not divisible by " + std::to_string(factor) +
                          " (patch_size x latent downsample); nearest valid: " + hint);
    }
}

namespace {

struct Failure : std::runtime_error {
    int code;
    Failure(int c, const std::string& what) : std::runtime_error(what), code(c) {}
};

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const std::string text = j.dump(2) + "\n";
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

double parse_number(const std::string& flag, const std::string& text) {
    std::string s = text;
    if (s.size() >= 2 && (s.front() == '\'' || s.front() == '"') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(flag + ": expected a number, got '" + text + "'");
    }
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string config, run_dir, resume;
    bool resume_latest = false;
    std::int64_t max_steps = -1;
};

json cmd_train(const TrainArgs& a) {
    auto config = TrainConfig::load(a.config);
    const fs::path run_dir(a.run_dir);
    fs::create_directories(run_dir);
    const auto checkpoint = run_dir / "checkpoint.mmh";

    fs::path resume_from;
    if (!a.resume.empty()) resume_from = a.resume;
    if (a.resume_latest) resume_from = checkpoint;
    if (!resume_from.empty() && !fs::exists(resume_from)) {
        throw FileError("checkpoint " + resume_from.string() + " does not exist");
    }
    Trainer trainer = resume_from.empty() ? Trainer(config) : Trainer::resume(config, resume_from);
    auto data = make_training_source(config.data, config.model, fs::path(a.config).parent_path());
    MetricsLog log(run_dir / "metrics.jsonl", trainer.state().global_step);
    std::optional<std::int64_t> limit;
    if (a.max_steps >= 0) limit = a.max_steps;
    trainer.run(*data, &log, checkpoint, limit);
    model_container(trainer.model()).save(run_dir / "model.mmh");

    const auto& s = trainer.state();
    return {{"command", "train"},
            {"finished", trainer.finished()},
            {"global_step", s.global_step},
            {"stage_index", s.stage_index},
            {"ema_loss", s.loss_ema.ema},
            {"spikes", s.spike_count},
            {"skipped_steps", s.skipped_steps},
            {"checkpoint", checkpoint.string()},
            {"model", (run_dir / "model.mmh").string()},
            {"metrics", (run_dir / "metrics.jsonl").string()}};
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
    std::vector<std::string> prompts, negative_prompts;
    std::string image_size = "[256,256]";
    std::string cfg_scale = "5.0";
    std::string model_path, output_dir = "output";
    std::int64_t steps = 20;
    std::uint64_t seed = 0;
};

json cmd_sample(const SampleArgs& a) {
    const auto size = parse_image_size(a.image_size);
    const double cfg_scale = parse_number("--cfg_scale", a.cfg_scale);
    if (cfg_scale < 0) throw ConfigError("--cfg_scale: must be non-negative");
    if (a.prompts.empty()) throw ConfigError("--prompts: at least one prompt is required");
    if (!a.negative_prompts.empty() && a.negative_prompts.size() != 1 && a.negative_prompts.size() != a.prompts.size()) {
        throw ConfigError("--negative_prompts: give one, or one per prompt");
    }
    if (!fs::exists(a.model_path)) throw FileError("checkpoint " + a.model_path + " does not exist");

    auto model = load_model(a.model_path);
    const auto& mc = model->config();
    PoolingAdapter adapter(mc.latent_channels, 8);
    check_image_size(size, mc.patch_size * adapter.downsample());
    const Shape latent{mc.latent_channels, size[0] / adapter.downsample(), size[1] / adapter.downsample()};

    const auto checkpoint_bytes = read_file_bytes(a.model_path);
    const fs::path out_dir(a.output_dir);
    fs::create_directories(out_dir);
    json samples = json::array();
    for (std::size_t i = 0; i < a.prompts.size(); ++i) {
        SamplerConfig sc;
        sc.steps = a.steps;
        sc.cfg_scale = cfg_scale;
        sc.seed = Rng::derive(a.seed, i);
        std::vector<TextEmbedding<float>> text{model->encode_prompt(a.prompts[i])};
        std::vector<TextEmbedding<float>> uncond;
        std::string negative;
        if (!a.negative_prompts.empty()) {
            negative = a.negative_prompts[a.negative_prompts.size() == 1 ? 0 : i];
            uncond.push_back(model->encode_prompt(negative));
        }
        auto z = sample<float>(*model, text, uncond, latent, sc);
        auto image = adapter.decode(Tensor32::from_data(latent, {z.data().begin(), z.data().end()}));
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03zu.png", i);
        write_png(out_dir / name, image);
        json entry{{"prompt", a.prompts[i]}, {"file", name}, {"seed", sc.seed}};
        if (!negative.empty()) entry["negative_prompt"] = negative;
        samples.push_back(entry);
    }
    json manifest{{"command", "sample"},
                  {"model_path", a.model_path},
                  {"checkpoint_sha256", sha256_hex(checkpoint_bytes)},
                  {"image_size", {size[0], size[1]}},
                  {"latent_shape", latent},
                  {"cfg_scale", cfg_scale},
                  {"steps", a.steps},
                  {"seed", a.seed},
                  {"samples", samples}};
    write_json(out_dir / "manifest.json", manifest);
    return manifest;
}

// ---------------------------------------------------------------- dedup

struct DedupArgs {
    std::string embeddings, output_dir, manifest, config;
    DedupConfig dedup;
};

json cmd_dedup(const DedupArgs& a) {
    auto set = EmbeddingSet::load(a.embeddings);
    set.validate();
    DedupConfig cfg = a.dedup;
    if (!a.config.empty()) {
        std::ifstream in(a.config);
        if (!in) throw FileError("cannot open " + a.config);
        cfg = DedupConfig::from_json(json::parse(in));
    }
    cfg.validate();
    auto report = dedup_converge(set, cfg);
    const fs::path out(a.output_dir);
    auto j = report.to_json();
    j["command"] = "dedup";
    j["input_size"] = set.size();
    j["config"] = cfg.to_json();
    if (!a.manifest.empty()) {
        auto records = read_manifest(a.manifest);
        std::set<std::string> keep(report.representatives.begin(), report.representatives.end());
        std::vector<CorpusRecord> kept;
        for (auto& r : records) {
            if (keep.count(r.id)) kept.push_back(std::move(r));
        }
        write_manifest(out / "manifest.jsonl", kept);
        j["manifest"] = (out / "manifest.jsonl").string();
        j["manifest_records"] = kept.size();
    }
    write_json(out / "report.json", j);
    if (!report.converged) throw Failure(runtime, report.warning);
    return j;
}

// ---------------------------------------------------------------- score

struct ScoreArgs {
    std::string manifest, output, scores;
};

json cmd_score(const ScoreArgs& a) {
    auto records = read_manifest(a.manifest);
    if (!a.scores.empty()) {
        // Optional side file of {"id", "score"} lines from an external aesthetic predictor.
        std::map<std::string, double> by_id;
        std::ifstream in(a.scores);
        if (!in) throw FileError("cannot open " + a.scores);
        std::string line;
        for (std::int64_t n = 1; std::getline(in, line); ++n) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            auto j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("id") || !j.contains("score") || !j["score"].is_number()) {
                throw ValidationError(a.scores + ":" + std::to_string(n) + ": expected {\"id\", \"score\"}");
            }
            by_id[j["id"].get<std::string>()] = j["score"].get<double>();
        }
        for (auto& r : records) {
            auto it = by_id.find(r.id);
            if (it != by_id.end()) r.quality_score = it->second;
        }
    }
    json failures = json::array();
    std::map<std::string, std::int64_t> counts;
    for (auto& r : records) {
        if (!r.quality_score) {
            failures.push_back({{"id", r.id}, {"reason", "no quality_score"}});
            continue;
        }
        try {
            r.quality_tag = score_bucket(*r.quality_score);
            ++counts[tag_name(*r.quality_tag)];
        } catch (const ValidationError& e) {
            failures.push_back({{"id", r.id}, {"reason", e.what()}});
        }
    }
    write_manifest(a.output, records);
    json j{{"command", "score"}, {"output", a.output}, {"records", records.size()}, {"tags", counts},
           {"errors", failures}};
    if (!failures.empty()) throw Failure(integrity, j.dump());
    return j;
}

// ---------------------------------------------------------------- prep

struct PrepArgs {
    std::string manifest, output_dir;
    int stage = 2;
    std::uint64_t seed = 0;
    bool keep_excluded = false;
};

json cmd_prep(const PrepArgs& a) {
    auto records = read_manifest(a.manifest);
    std::string out_dir = a.output_dir;
    if (out_dir.empty()) {
        const char* env = std::getenv("MMHDIT_CACHE_DIR");
        if (!env || !*env) throw ConfigError("--output_dir: required when MMHDIT_CACHE_DIR is unset");
        out_dir = env;
    }
    if (a.stage != 1 && a.stage != 2) throw ConfigError("--stage: must be 1 or 2");
    json excluded = json::array();
    std::vector<CorpusRecord> usable;
    for (auto& r : records) {
        if (!a.keep_excluded && r.quality_tag == QualityTag::excluded) {
            excluded.push_back(r.id);
        } else {
            usable.push_back(std::move(r));
        }
    }
    PoolingAdapter adapter;
    CacheOptions opts;
    opts.stage = a.stage;
    opts.seed = a.seed;
    auto m = build_latent_cache(usable, fs::path(a.manifest).parent_path(), adapter, out_dir, opts);

    json entries = json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"id", e.id},
                           {"height", e.shape[1] * adapter.downsample()},
                           {"width", e.shape[2] * adapter.downsample()},
                           {"latent_shape", e.shape}});
    }
    json skipped = json::array();
    for (const auto& s : m.skipped) skipped.push_back({{"id", s.id}, {"reason", s.reason}});
    json errors = json::array();
    for (const auto& s : m.errors) errors.push_back({{"id", s.id}, {"reason", s.reason}});
    json j{{"command", "prep"},  {"stage", a.stage},       {"output_dir", out_dir}, {"entries", entries},
           {"skipped", skipped}, {"excluded", excluded},   {"errors", errors},      {"encoded", m.encoded},
           {"rewritten", m.rewritten}};
    write_json(fs::path(out_dir) / "report.json", j);
    if (!m.errors.empty()) throw Failure(integrity, j.dump());
    return j;
}

json error_json(const std::string& kind, const std::string& message) {
    return {{"error", kind}, {"message", message}};
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Diffusion transformer training, sampling and data preparation", "mmhdit"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Run the training stages of a config");
    t->add_option("--config", train.config, "Training config JSON")->required();
    t->add_option("--run_dir", train.run_dir, "Checkpoint and metrics directory")->required();
    t->add_option("--resume", train.resume, "Resume from this checkpoint");
    t->add_flag("--resume_latest", train.resume_latest, "Resume from run_dir/checkpoint.mmh");
    t->add_option("--max_steps", train.max_steps, "Stop after this many steps in this invocation");

    SampleArgs samp;
    auto* s = app.add_subcommand("sample", "Generate images from prompts");
    s->add_option("--prompts", samp.prompts, "One or more prompts")->required();
    s->add_option("--negative_prompts", samp.negative_prompts, "Guidance baseline prompt(s)");
    s->add_option("--image_size", samp.image_size, "'[height,width]'");
    s->add_option("--cfg_scale", samp.cfg_scale, "Guidance scale");
    s->add_option("--model_path", samp.model_path, "Checkpoint")->required();
    s->add_option("--output_dir", samp.output_dir, "Where PNGs and manifest.json go");
    s->add_option("--steps", samp.steps, "Euler steps");
    s->add_option("--seed", samp.seed, "Base seed; prompt i uses a derived seed");

    DedupArgs dd;
    auto* d = app.add_subcommand("dedup", "Iterative partitioned DBSCAN deduplication");
    d->add_option("--embeddings", dd.embeddings, "Embedding container")->required();
    d->add_option("--output_dir", dd.output_dir, "Report directory")->required();
    d->add_option("--manifest", dd.manifest, "Corpus manifest to filter to representatives");
    d->add_option("--config", dd.config, "Dedup config JSON (overrides flags)");
    d->add_option("--partition_size", dd.dedup.partition_size);
    d->add_option("--threshold", dd.dedup.sim_threshold, "Cosine similarity for neighbours");
    d->add_option("--min_pts", dd.dedup.min_pts);
    d->add_option("--max_rounds", dd.dedup.max_rounds);
    d->add_option("--seed", dd.dedup.seed);

    ScoreArgs sc;
    auto* c = app.add_subcommand("score", "Bucket quality scores into tags");
    c->add_option("--manifest", sc.manifest, "Corpus manifest")->required();
    c->add_option("--output", sc.output, "Annotated manifest")->required();
    c->add_option("--scores", sc.scores, "JSON-lines {id, score} to merge first");

    PrepArgs pr;
    auto* p = app.add_subcommand("prep", "Resize and encode images into a latent cache");
    p->add_option("--manifest", pr.manifest, "Corpus manifest")->required();
    p->add_option("--output_dir", pr.output_dir, "Cache directory (default: $MMHDIT_CACHE_DIR)");
    p->add_option("--stage", pr.stage, "1: 256x256 crops, 2: ~250k-pixel area");
    p->add_option("--seed", pr.seed, "Stage-1 crop seed");
    p->add_flag("--keep_excluded", pr.keep_excluded, "Also encode records tagged excluded");

    std::vector<const char*> argv{"mmhdit"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return ok;
    } catch (const CLI::ParseError& e) {
        err << error_json("usage", e.what()).dump() << '\n';
        return usage;
    }

    try {
        json result;
        if (*t) result = cmd_train(train);
        if (*s) result = cmd_sample(samp);
        if (*d) result = cmd_dedup(dd);
        if (*c) result = cmd_score(sc);
        if (*p) result = cmd_prep(pr);
        out << result.dump(2) << '\n';
        return ok;
    } catch (const Failure& f) {
        out << f.what() << '\n';
        err << error_json("partial_failure", "see the report for the failing records").dump() << '\n';
        return f.code;
    } catch (const ConfigError& e) {
        err << error_json("config", e.what()).dump() << '\n';
        return usage;
    } catch (const FileError& e) {
        err << error_json("file", e.what()).dump() << '\n';
        return usage;
    } catch (const IntegrityError& e) {
        err << error_json("integrity", e.what()).dump() << '\n';
        return integrity;
    } catch (const ValidationError& e) {
        err << error_json("validation", e.what()).dump() << '\n';
        return integrity;
    } catch (const nlohmann::json::exception& e) {
        err << error_json("validation", e.what()).dump() << '\n';
        return integrity;
    } catch (const std::exception& e) {
        err << error_json("runtime", e.what()).dump() << '\n';
        return runtime;
    }
}

}  // namespace mmh::cli
