#include "mmhdit/datapipe.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>

#include "mmhdit/container.hpp"
#include "mmhdit/errors.hpp"
#include "mmhdit/model.hpp"

namespace mmh {

namespace fs = std::filesystem;

std::string tag_name(QualityTag tag) {
    switch (tag) {
        case QualityTag::excellent:
            return "excellent";
        case QualityTag::good:
            return "good";
        case QualityTag::average:
            return "average";
        case QualityTag::excluded:
            return "excluded";
    }
    return "excluded";
}

QualityTag parse_tag(const std::string& name) {
    for (auto tag : {QualityTag::excellent, QualityTag::good, QualityTag::average, QualityTag::excluded}) {
        if (tag_name(tag) == name) return tag;
    }
    throw ValidationError("unknown quality tag '" + name + "'");
}

QualityTag score_bucket(double score) {
    if (!(score >= 1.0 && score <= 10.0)) {
        throw ValidationError("quality score " + std::to_string(score) + " outside [1, 10]");
    }
    if (score > 6.0) return QualityTag::excellent;
    if (score > 5.2) return QualityTag::good;
    if (score >= 4.0) return QualityTag::average;
    return QualityTag::excluded;
}

nlohmann::json CorpusRecord::to_json() const {
    nlohmann::json j{{"id", id}, {"image", image}, {"caption", caption}};
    if (quality_score) j["quality_score"] = *quality_score;
    if (quality_tag) j["quality_tag"] = tag_name(*quality_tag);
    return j;
}

CorpusRecord CorpusRecord::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("record must be a JSON object");
    CorpusRecord r;
    auto text = [&](const char* key, bool required) -> std::string {
        if (!j.contains(key)) {
            if (required) throw ValidationError(std::string("field '") + key + "': missing");
            return {};
        }
        if (!j[key].is_string()) throw ValidationError(std::string("field '") + key + "': expected a string");
        return j[key].get<std::string>();
    };
    r.id = text("id", true);
    if (r.id.empty()) throw ValidationError("field 'id': empty");
    r.image = text("image", false);
    r.caption = text("caption", false);
    if (j.contains("quality_score") && !j["quality_score"].is_null()) {
        if (!j["quality_score"].is_number()) throw ValidationError("field 'quality_score': expected a number");
        r.quality_score = j["quality_score"].get<double>();
    }
    if (j.contains("quality_tag") && !j["quality_tag"].is_null()) {
        try {
            r.quality_tag = parse_tag(text("quality_tag", true));
        } catch (const ValidationError& e) {
            throw ValidationError(std::string("field 'quality_tag': ") + e.what());
        }
    }
    return r;
}

std::vector<CorpusRecord> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open manifest '" + path.string() + "'");
    std::vector<CorpusRecord> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(CorpusRecord::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

void write_manifest(const fs::path& path, std::span<const CorpusRecord> records) {
    std::string text;
    for (const auto& r : records) text += r.to_json().dump() + "\n";
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void EmbeddingSet::add(std::string id, std::span<const float> vector) {
    if (dim == 0 && ids.empty()) dim = static_cast<std::int64_t>(vector.size());
    if (static_cast<std::int64_t>(vector.size()) != dim) {
        throw DimensionError("embedding '" + id + "' has dimension " + std::to_string(vector.size()) + ", expected " +
                             std::to_string(dim));
    }
    ids.push_back(std::move(id));
    data.insert(data.end(), vector.begin(), vector.end());
}

void EmbeddingSet::validate() const {
    if (data.size() != ids.size() * static_cast<std::size_t>(dim)) {
        throw ValidationError("embedding matrix does not match " + std::to_string(ids.size()) + " ids");
    }
    std::set<std::string> seen;
    for (std::size_t i = 0; i < size(); ++i) {
        if (!seen.insert(ids[i]).second) throw ValidationError("duplicate embedding id '" + ids[i] + "'");
        double sq = 0;
        for (float v : row(i)) sq += static_cast<double>(v) * v;
        if (std::abs(std::sqrt(sq) - 1.0) >= 1e-5) {
            throw ValidationError("embedding '" + ids[i] + "' is not unit-normalized (norm " +
                                  std::to_string(std::sqrt(sq)) + ")");
        }
    }
}

void EmbeddingSet::save(const fs::path& path) const {
    TensorContainer c;
    c.put("embeddings", Tensor32::from_data({static_cast<std::int64_t>(size()), dim}, data));
    c.metadata["ids"] = ids;
    c.save(path);
}

EmbeddingSet EmbeddingSet::load(const fs::path& path) {
    auto c = TensorContainer::load(path);
    if (!c.metadata.contains("ids") || !c.metadata["ids"].is_array()) {
        throw IntegrityError("embedding file '" + path.string() + "' has no id list");
    }
    auto m = c.get<float>("embeddings");
    EmbeddingSet s;
    s.ids = c.metadata["ids"].get<std::vector<std::string>>();
    if (m.ndim() != 2 || m.size(0) != static_cast<std::int64_t>(s.ids.size())) {
        throw IntegrityError("embedding matrix " + shape_str(m.shape()) + " does not match " +
                             std::to_string(s.ids.size()) + " ids");
    }
    s.dim = m.size(1);
    s.data.assign(m.data().begin(), m.data().end());
    s.validate();
    return s;
}

double cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / std::sqrt(na * nb);
}

namespace {

std::vector<std::size_t> sorted_by_id(const EmbeddingSet& set, std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return set.ids[a] < set.ids[b]; });
    return idx;
}

}  // namespace

DbscanResult dbscan_cosine(const EmbeddingSet& set, std::span<const std::size_t> members, double sim_threshold,
                           std::int64_t min_pts) {
    if (!(sim_threshold > 0.0 && sim_threshold < 1.0)) {
        throw ConfigError("similarity threshold must be in (0, 1), got " + std::to_string(sim_threshold));
    }
    if (min_pts < 1) throw ConfigError("min_pts must be >= 1");
    auto order = sorted_by_id(set, {members.begin(), members.end()});
    const auto n = order.size();

    std::vector<std::vector<std::size_t>> neighbours(n);  // positions in `order`, ascending
    for (std::size_t i = 0; i < n; ++i) {
        neighbours[i].push_back(i);
        for (std::size_t j = i + 1; j < n; ++j) {
            if (cosine(set.row(order[i]), set.row(order[j])) >= sim_threshold) {
                neighbours[i].push_back(j);
                neighbours[j].push_back(i);
            }
        }
    }
    for (auto& nb : neighbours) std::sort(nb.begin(), nb.end());
    std::vector<char> core(n);
    for (std::size_t i = 0; i < n; ++i) core[i] = static_cast<std::int64_t>(neighbours[i].size()) >= min_pts;

    constexpr std::size_t unassigned = static_cast<std::size_t>(-1);
    std::vector<std::size_t> label(n, unassigned);
    std::size_t clusters = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!core[i] || label[i] != unassigned) continue;
        std::vector<std::size_t> frontier{i};
        label[i] = clusters;
        while (!frontier.empty()) {
            auto p = frontier.back();
            frontier.pop_back();
            for (auto q : neighbours[p]) {
                if (core[q] && label[q] == unassigned) {
                    label[q] = clusters;
                    frontier.push_back(q);
                }
            }
        }
        ++clusters;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (core[i]) continue;
        for (auto q : neighbours[i]) {
            if (core[q]) {
                label[i] = label[q];  // neighbours are ascending, so this is the lowest-id core
                break;
            }
        }
    }

    DbscanResult out;
    out.clusters.resize(clusters);
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] == unassigned) {
            out.noise.push_back(order[i]);
        } else {
            out.clusters[label[i]].push_back(order[i]);
        }
    }
    return out;
}

DbscanResult dbscan_cosine(const EmbeddingSet& set, double sim_threshold, std::int64_t min_pts) {
    std::vector<std::size_t> all(set.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return dbscan_cosine(set, all, sim_threshold, min_pts);
}

void DedupConfig::validate() const {
    if (partition_size < 2) throw ConfigError("field 'partition_size': must be >= 2");
    if (!(sim_threshold > 0.0 && sim_threshold < 1.0)) throw ConfigError("field 'sim_threshold': must be in (0, 1)");
    if (min_pts < 1) throw ConfigError("field 'min_pts': must be >= 1");
    if (max_rounds < 1) throw ConfigError("field 'max_rounds': must be >= 1");
    if (multi_chunk_patience < 1) throw ConfigError("field 'multi_chunk_patience': must be >= 1");
}

nlohmann::json DedupConfig::to_json() const {
    return {{"partition_size", partition_size}, {"sim_threshold", sim_threshold},
            {"min_pts", min_pts},               {"max_rounds", max_rounds},
            {"multi_chunk_patience", multi_chunk_patience}, {"seed", seed}};
}

DedupConfig DedupConfig::from_json(const nlohmann::json& j) {
    DedupConfig c;
    if (!j.is_object()) throw ConfigError("dedup config must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        const auto& v = it.value();
        auto need_int = [&] {
            if (!v.is_number_integer()) throw ConfigError("field '" + k + "': expected an integer");
        };
        if (k == "partition_size") {
            need_int();
            c.partition_size = v.get<std::int64_t>();
        } else if (k == "sim_threshold") {
            if (!v.is_number()) throw ConfigError("field 'sim_threshold': expected a number");
            c.sim_threshold = v.get<double>();
        } else if (k == "min_pts") {
            need_int();
            c.min_pts = v.get<std::int64_t>();
        } else if (k == "max_rounds") {
            need_int();
            c.max_rounds = v.get<std::int64_t>();
        } else if (k == "multi_chunk_patience") {
            need_int();
            c.multi_chunk_patience = v.get<std::int64_t>();
        } else if (k == "seed") {
            need_int();
            c.seed = v.get<std::uint64_t>();
        } else {
            throw ConfigError("field '" + k + "': unknown field");
        }
    }
    c.validate();
    return c;
}

DedupState initial_dedup_state(const EmbeddingSet& set) {
    std::vector<std::size_t> all(set.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return {0, sorted_by_id(set, std::move(all))};
}

DedupState dedup_round(const DedupState& state, const EmbeddingSet& set, const DedupConfig& config, RoundLog* log) {
    config.validate();
    auto items = state.representatives;
    const auto round = static_cast<std::uint64_t>(state.round);
    if (state.round > 0) {
        Rng shuffle(Rng::derive(config.seed, 2 * round));
        for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[shuffle.below(i)]);
    }
    const auto n = items.size();
    const auto part = static_cast<std::size_t>(config.partition_size);
    const std::size_t chunks = n == 0 ? 0 : (n + part - 1) / part;

    Rng pick(Rng::derive(config.seed, 2 * round + 1));
    std::vector<std::size_t> kept;
    RoundLog entry{state.round, n, 0, chunks, 0, 0};
    std::size_t begin = 0;
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t len = n / chunks + (c < n % chunks ? 1 : 0);
        std::span<const std::size_t> chunk(items.data() + begin, len);
        begin += len;
        auto result = dbscan_cosine(set, chunk, config.sim_threshold, config.min_pts);
        for (const auto& cluster : result.clusters) kept.push_back(cluster[pick.below(cluster.size())]);
        kept.insert(kept.end(), result.noise.begin(), result.noise.end());
        entry.clusters += result.clusters.size();
        entry.noise += result.noise.size();
    }
    DedupState next{state.round + 1, sorted_by_id(set, std::move(kept))};
    entry.output_size = next.representatives.size();
    if (log) *log = entry;
    return next;
}

nlohmann::json DedupReport::to_json() const {
    nlohmann::json rounds_json = nlohmann::json::array();
    for (const auto& r : rounds) {
        rounds_json.push_back({{"round", r.round},
                               {"input_size", r.input_size},
                               {"output_size", r.output_size},
                               {"chunks", r.chunks},
                               {"clusters", r.clusters},
                               {"noise", r.noise}});
    }
    nlohmann::json j{{"representatives", representatives},
                     {"representative_count", representatives.size()},
                     {"rounds", rounds_json},
                     {"converged", converged}};
    if (!warning.empty()) j["warning"] = warning;
    return j;
}

DedupReport dedup_converge(const EmbeddingSet& set, const DedupConfig& config) {
    config.validate();
    DedupReport report;
    auto state = initial_dedup_state(set);
    std::int64_t unchanged = 0;
    while (state.round < config.max_rounds) {
        RoundLog log;
        auto next = dedup_round(state, set, config, &log);
        report.rounds.push_back(log);
        const bool same = next.representatives == state.representatives;
        state = std::move(next);
        if (!same) {
            unchanged = 0;
            continue;
        }
        ++unchanged;
        if (log.chunks <= 1 || unchanged >= config.multi_chunk_patience) {
            report.converged = true;
            break;
        }
    }
    if (!report.converged) {
        report.warning = "stopped after max_rounds=" + std::to_string(config.max_rounds) + " without convergence";
    }
    for (auto i : state.representatives) report.representatives.push_back(set.ids[i]);
    std::sort(report.representatives.begin(), report.representatives.end());
    return report;
}

ResizePlan stage_resize(std::int64_t width, std::int64_t height, int stage, Rng& rng) {
    if (width <= 0 || height <= 0) {
        throw ValidationError("image dimensions must be positive, got " + std::to_string(width) + "x" +
                              std::to_string(height));
    }
    ResizePlan plan;
    if (stage == 1) {
        const double s = 256.0 / static_cast<double>(std::min(width, height));
        plan.scaled_width = width <= height ? 256 : std::max<std::int64_t>(256, std::llround(width * s));
        plan.scaled_height = height <= width ? 256 : std::max<std::int64_t>(256, std::llround(height * s));
        plan.crop.width = plan.crop.height = 256;
        plan.crop.x = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(plan.scaled_width - 255)));
        plan.crop.y = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(plan.scaled_height - 255)));
        return plan;
    }
    if (stage != 2) throw ConfigError("resize stage must be 1 or 2, got " + std::to_string(stage));
    const double aspect = static_cast<double>(std::max(width, height)) / static_cast<double>(std::min(width, height));
    if (aspect >= 3.0) {
        plan.skipped = true;
        plan.reason = "aspect ratio " + std::to_string(aspect) + " is not below 3:1";
        return plan;
    }
    const double s = std::sqrt(250000.0 / (static_cast<double>(width) * static_cast<double>(height)));
    plan.scaled_width = std::llround(width * s);
    plan.scaled_height = std::llround(height * s);
    plan.crop.width = plan.scaled_width / 64 * 64;
    plan.crop.height = plan.scaled_height / 64 * 64;
    plan.crop.x = (plan.scaled_width - plan.crop.width) / 2;
    plan.crop.y = (plan.scaled_height - plan.crop.height) / 2;
    return plan;
}

namespace {

cv::Mat to_mat(const Image& image) {
    cv::Mat rgb(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3,
                const_cast<std::uint8_t*>(image.rgb.data()));
    return rgb.clone();
}

Image from_mat(const cv::Mat& rgb) {
    cv::Mat dense = rgb.isContinuous() ? rgb : rgb.clone();
    Image out{dense.cols, dense.rows, {}};
    out.rgb.assign(dense.data, dense.data + dense.total() * 3);
    return out;
}

Image decode_image(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    cv::Mat bgr = cv::imdecode(bytes, cv::IMREAD_COLOR);
    if (bgr.empty()) throw ValidationError("cannot decode image '" + what + "'");
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return from_mat(rgb);
}

}  // namespace

Image read_image(const fs::path& path) { return decode_image(read_file_bytes(path), path.string()); }

std::vector<std::uint8_t> encode_png(const Image& image) {
    if (static_cast<std::int64_t>(image.rgb.size()) != image.width * image.height * 3) {
        throw DimensionError("image buffer does not match " + std::to_string(image.width) + "x" +
                             std::to_string(image.height));
    }
    cv::Mat bgr;
    cv::cvtColor(to_mat(image), bgr, cv::COLOR_RGB2BGR);
    std::vector<std::uint8_t> bytes;
    if (!cv::imencode(".png", bgr, bytes)) throw FileError("PNG encoding failed");
    return bytes;
}

void write_png(const fs::path& path, const Image& image) { write_file_bytes(path, encode_png(image)); }

Image apply_resize(const Image& image, const ResizePlan& plan) {
    if (plan.skipped) throw ContractError("cannot apply a skipped resize plan");
    cv::Mat scaled;
    cv::resize(to_mat(image), scaled, cv::Size(static_cast<int>(plan.scaled_width), static_cast<int>(plan.scaled_height)),
               0, 0, cv::INTER_AREA);
    cv::Rect roi(static_cast<int>(plan.crop.x), static_cast<int>(plan.crop.y), static_cast<int>(plan.crop.width),
                 static_cast<int>(plan.crop.height));
    return from_mat(scaled(roi).clone());
}

PoolingAdapter::PoolingAdapter(std::int64_t channels, std::int64_t factor) : channels_(channels), factor_(factor) {
    if (channels < 3) throw ConfigError("pooling adapter needs at least 3 latent channels");
    if (factor < 1) throw ConfigError("pooling adapter factor must be >= 1");
}

Tensor32 PoolingAdapter::encode(const Image& image) const {
    if (image.width % factor_ != 0 || image.height % factor_ != 0) {
        throw DimensionError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                             " is not divisible by the adapter factor " + std::to_string(factor_));
    }
    const auto h = image.height / factor_, w = image.width / factor_;
    std::vector<float> out(static_cast<std::size_t>(channels_ * h * w), 0.0f);
    const double norm = 1.0 / static_cast<double>(factor_ * factor_);
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0;
                for (std::int64_t dy = 0; dy < factor_; ++dy) {
                    for (std::int64_t dx = 0; dx < factor_; ++dx) {
                        const auto px = ((y * factor_ + dy) * image.width + x * factor_ + dx) * 3 + c;
                        acc += image.rgb[static_cast<std::size_t>(px)] / 127.5 - 1.0;
                    }
                }
                out[static_cast<std::size_t>((c * h + y) * w + x)] = static_cast<float>(acc * norm);
            }
        }
    }
    return Tensor32::from_data({channels_, h, w}, std::move(out));
}

Image PoolingAdapter::decode(const Tensor32& latent) const {
    if (latent.ndim() != 3 || latent.size(0) != channels_) {
        throw DimensionError("decode expects [" + std::to_string(channels_) + ", H, W], got " +
                             shape_str(latent.shape()));
    }
    const auto h = latent.size(1), w = latent.size(2);
    Image out{w * factor_, h * factor_, {}};
    out.rgb.resize(static_cast<std::size_t>(out.width * out.height * 3));
    for (std::int64_t y = 0; y < out.height; ++y) {
        for (std::int64_t x = 0; x < out.width; ++x) {
            for (std::int64_t c = 0; c < 3; ++c) {
                const double v = latent.data()[static_cast<std::size_t>((c * h + y / factor_) * w + x / factor_)];
                const double p = std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0);
                out.rgb[static_cast<std::size_t>((y * out.width + x) * 3 + c)] = static_cast<std::uint8_t>(p);
            }
        }
    }
    return out;
}

nlohmann::json PoolingAdapter::describe() const {
    return {{"kind", "pooling"}, {"channels", channels_}, {"factor", factor_}};
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

nlohmann::json CacheManifest::to_json() const {
    nlohmann::json e = nlohmann::json::object();
    for (const auto& x : entries) {
        e[x.id] = {{"content_hash", x.content_hash}, {"shape", x.shape}, {"offsets", {x.begin, x.end}}};
    }
    auto list = [](const std::vector<CacheError>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& x : v) a.push_back({{"id", x.id}, {"reason", x.reason}});
        return a;
    };
    return {{"container", "latents.mmh"}, {"entries", e}, {"errors", list(errors)}, {"skipped", list(skipped)}};
}

CacheManifest CacheManifest::from_json(const nlohmann::json& j) {
    CacheManifest m;
    try {
        for (auto it = j.at("entries").begin(); it != j.at("entries").end(); ++it) {
            const auto& v = it.value();
            auto offsets = v.at("offsets");
            m.entries.push_back({it.key(), v.at("content_hash").get<std::string>(), v.at("shape").get<Shape>(),
                                 offsets.at(0).get<std::uint64_t>(), offsets.at(1).get<std::uint64_t>()});
        }
        for (const auto& e : j.at("errors")) m.errors.push_back({e.at("id"), e.at("reason")});
        for (const auto& e : j.at("skipped")) m.skipped.push_back({e.at("id"), e.at("reason")});
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed latent cache manifest: ") + e.what());
    }
    return m;
}

CacheManifest build_latent_cache(std::span<const CorpusRecord> records, const fs::path& manifest_dir,
                                 const LatentAdapter& adapter, const fs::path& out_dir, const CacheOptions& options) {
    const auto container_path = out_dir / "latents.mmh";
    const auto manifest_path = out_dir / "manifest.json";

    // Previous cache, if it is intact.
    std::map<std::string, std::string> old_hash;
    TensorContainer old;
    if (fs::exists(container_path) && fs::exists(manifest_path)) {
        try {
            old = TensorContainer::load(container_path);
            std::ifstream in(manifest_path);
            for (const auto& e : CacheManifest::from_json(nlohmann::json::parse(in)).entries) {
                old_hash[e.id] = e.content_hash;
            }
        } catch (const std::exception&) {
            old_hash.clear();
        }
    }

    const auto adapter_desc = adapter.describe().dump();
    CacheManifest manifest;
    TensorContainer cache;
    cache.metadata["adapter"] = adapter.describe();
    cache.metadata["stage"] = options.stage;
    std::map<std::string, std::string> hashes;
    std::set<std::string> seen;
    for (const auto& rec : records) {
        if (!seen.insert(rec.id).second) {
            manifest.errors.push_back({rec.id, "duplicate record id"});
            continue;
        }
        fs::path path = rec.image;
        if (path.is_relative()) path = manifest_dir / path;
        std::vector<std::uint8_t> bytes;
        try {
            bytes = read_file_bytes(path);
        } catch (const FileError&) {
            manifest.errors.push_back({rec.id, "missing image '" + path.string() + "'"});
            continue;
        }
        std::string salt = "|stage=" + std::to_string(options.stage) + "|adapter=" + adapter_desc;
        if (options.stage == 1) salt += "|seed=" + std::to_string(options.seed);
        std::vector<std::uint8_t> keyed(bytes);
        keyed.insert(keyed.end(), salt.begin(), salt.end());
        const auto hash = sha256_hex(keyed);

        auto found = old_hash.find(rec.id);
        if (found != old_hash.end() && found->second == hash && old.contains(rec.id)) {
            cache.put_entry(rec.id, old.entry(rec.id));
            hashes[rec.id] = hash;
            continue;
        }
        try {
            auto image = decode_image(bytes, path.string());
            Rng rng(Rng::derive(options.seed, fnv1a64(rec.id)));
            auto plan = stage_resize(image.width, image.height, options.stage, rng);
            if (plan.skipped) {
                manifest.skipped.push_back({rec.id, plan.reason});
                continue;
            }
            cache.put(rec.id, adapter.encode(apply_resize(image, plan)));
            hashes[rec.id] = hash;
            ++manifest.encoded;
        } catch (const Error& e) {
            manifest.errors.push_back({rec.id, e.what()});
        }
    }

    auto ranges = cache.payload_ranges();
    for (const auto& name : cache.names()) {
        manifest.entries.push_back({name, hashes[name], cache.entry(name).shape, ranges[name].first,
                                    ranges[name].second});
    }

    const auto bytes = cache.serialize();
    const auto manifest_text = manifest.to_json().dump(2) + "\n";
    bool same = false;
    if (fs::exists(container_path) && fs::exists(manifest_path)) {
        try {
            auto old_manifest = read_file_bytes(manifest_path);
            same = read_file_bytes(container_path) == bytes &&
                   std::string(old_manifest.begin(), old_manifest.end()) == manifest_text;
        } catch (const FileError&) {
            same = false;
        }
    }
    if (!same) {
        write_file_bytes(container_path, bytes);
        write_file_bytes(manifest_path,
                         std::span(reinterpret_cast<const std::uint8_t*>(manifest_text.data()), manifest_text.size()));
        manifest.rewritten = true;
    }
    return manifest;
}

std::vector<CachedLatent> read_latent_cache(const fs::path& out_dir) {
    auto container = TensorContainer::load(out_dir / "latents.mmh");
    std::ifstream in(out_dir / "manifest.json");
    if (!in) throw FileError("cannot open '" + (out_dir / "manifest.json").string() + "'");
    CacheManifest manifest;
    try {
        manifest = CacheManifest::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed latent cache manifest: ") + e.what());
    }
    std::vector<CachedLatent> out;
    for (const auto& e : manifest.entries) out.push_back({e.id, container.get<float>(e.id)});
    return out;
}

}  // namespace mmh
