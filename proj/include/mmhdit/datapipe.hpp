#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmhdit/rng.hpp"
#include "mmhdit/tensor.hpp"

namespace mmh {

// ---------------------------------------------------------------- corpus

enum class QualityTag { excellent, good, average, excluded };

std::string tag_name(QualityTag tag);
QualityTag parse_tag(const std::string& name);

/// (6, 10] excellent, (5.2, 6] good, [4, 5.2] average, [1, 4) excluded.
/// Scores outside [1, 10] (or NaN) raise ValidationError.
QualityTag score_bucket(double score);

struct CorpusRecord {
    std::string id;
    std::string image;  // path, relative paths resolve against the manifest directory
    std::string caption;
    std::optional<double> quality_score;
    std::optional<QualityTag> quality_tag;

    nlohmann::json to_json() const;
    /// Throws ValidationError naming the bad field.
    static CorpusRecord from_json(const nlohmann::json& j);
};

/// JSON-lines manifest. Errors carry the 1-based line number.
std::vector<CorpusRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const CorpusRecord> records);

// ---------------------------------------------------------------- embeddings

/// Fixed-dimension unit vectors with their record ids, stored row-major.
struct EmbeddingSet {
    std::vector<std::string> ids;
    std::int64_t dim = 0;
    std::vector<float> data;  // ids.size() * dim

    std::size_t size() const { return ids.size(); }
    std::span<const float> row(std::size_t i) const {
        return {data.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    void add(std::string id, std::span<const float> vector);
    /// Unique ids and |norm - 1| < 1e-5 for every row; throws ValidationError.
    void validate() const;

    /// Container with an "embeddings" [n, d] F32 tensor and the id list in metadata.
    void save(const std::filesystem::path& path) const;
    static EmbeddingSet load(const std::filesystem::path& path);
};

double cosine(std::span<const float> a, std::span<const float> b);

// ---------------------------------------------------------------- dedup

/// Members are indices into the EmbeddingSet, each list sorted by id.
struct DbscanResult {
    std::vector<std::vector<std::size_t>> clusters;
    std::vector<std::size_t> noise;
};

/// DBSCAN over `members` with neighbourhoods {y : cos(x, y) >= sim_threshold}
/// (x itself included, so min_pts counts the point). Core points are visited
/// in id order; a border point joins the cluster of its lowest-id core neighbour.
DbscanResult dbscan_cosine(const EmbeddingSet& set, std::span<const std::size_t> members, double sim_threshold,
                           std::int64_t min_pts);
DbscanResult dbscan_cosine(const EmbeddingSet& set, double sim_threshold, std::int64_t min_pts);

struct DedupConfig {
    std::int64_t partition_size = 1024;
    double sim_threshold = 0.9;
    std::int64_t min_pts = 2;
    std::int64_t max_rounds = 16;
    /// Unchanged rounds needed before stopping while the set still spans
    /// several chunks (a single-chunk unchanged round is conclusive).
    std::int64_t multi_chunk_patience = 2;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static DedupConfig from_json(const nlohmann::json& j);
};

struct DedupState {
    std::int64_t round = 0;
    std::vector<std::size_t> representatives;  // sorted by id
};

struct RoundLog {
    std::int64_t round = 0;
    std::size_t input_size = 0;
    std::size_t output_size = 0;
    std::size_t chunks = 0;
    std::size_t clusters = 0;
    std::size_t noise = 0;
};

/// Every record of the set, round 0.
DedupState initial_dedup_state(const EmbeddingSet& set);

/// One pass: split into balanced chunks (id order in round 0, a seed-derived
/// shuffle afterwards), cluster each chunk, keep one seeded-random member per
/// cluster plus every noise point.
DedupState dedup_round(const DedupState& state, const EmbeddingSet& set, const DedupConfig& config,
                       RoundLog* log = nullptr);

struct DedupReport {
    std::vector<std::string> representatives;  // sorted
    std::vector<RoundLog> rounds;
    bool converged = false;
    std::string warning;

    nlohmann::json to_json() const;
};

DedupReport dedup_converge(const EmbeddingSet& set, const DedupConfig& config);

// ---------------------------------------------------------------- resize

struct Rect {
    std::int64_t x = 0, y = 0, width = 0, height = 0;
};

struct ResizePlan {
    bool skipped = false;
    std::string reason;
    std::int64_t scaled_width = 0, scaled_height = 0;
    Rect crop;
};

/// Stage 1: short edge to 256, random 256x256 crop (offsets from `rng`).
/// Stage 2: area ~250k (scale sqrt(250000 / (W H)), rounded), then a centered
/// crop of each side down to a multiple of 64; aspect ratio >= 3 is skipped.
ResizePlan stage_resize(std::int64_t width, std::int64_t height, int stage, Rng& rng);

// ---------------------------------------------------------------- images

/// 8-bit RGB, row-major, interleaved.
struct Image {
    std::int64_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb;
};

Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
Image apply_resize(const Image& image, const ResizePlan& plan);
/// PNG bytes (deterministic for equal images).
std::vector<std::uint8_t> encode_png(const Image& image);

/// Pluggable pixel <-> latent mapping.
class LatentAdapter {
   public:
    virtual ~LatentAdapter() = default;
    virtual std::int64_t channels() const = 0;
    virtual std::int64_t downsample() const = 0;
    /// [channels, H / downsample, W / downsample]
    virtual Tensor32 encode(const Image& image) const = 0;
    virtual Image decode(const Tensor32& latent) const = 0;
    virtual nlohmann::json describe() const = 0;
};

/// Parameter-free stand-in for a VAE: encode averages each f x f block of
/// pixels mapped to [-1, 1] into the first three channels (the rest are
/// zero); decode repeats the first three channels over each block and maps
/// back to [0, 255].
class PoolingAdapter final : public LatentAdapter {
   public:
    explicit PoolingAdapter(std::int64_t channels = 16, std::int64_t factor = 8);
    std::int64_t channels() const override { return channels_; }
    std::int64_t downsample() const override { return factor_; }
    Tensor32 encode(const Image& image) const override;
    Image decode(const Tensor32& latent) const override;
    nlohmann::json describe() const override;

   private:
    std::int64_t channels_, factor_;
};

// ---------------------------------------------------------------- latent cache

std::string sha256_hex(std::span<const std::uint8_t> bytes);

struct CacheEntry {
    std::string id;
    std::string content_hash;
    Shape shape;
    std::uint64_t begin = 0, end = 0;  // absolute byte range in the cache container
};

struct CacheError {
    std::string id;
    std::string reason;
};

struct CacheManifest {
    std::vector<CacheEntry> entries;  // sorted by id
    std::vector<CacheError> errors;
    std::vector<CacheError> skipped;  // e.g. stage-2 aspect ratio
    std::size_t encoded = 0;          // records (re)encoded on this run
    bool rewritten = false;           // container or manifest written on this run

    nlohmann::json to_json() const;
    static CacheManifest from_json(const nlohmann::json& j);
};

struct CacheOptions {
    int stage = 2;
    std::uint64_t seed = 0;  // stage-1 crop offsets
};

/// Encodes every record into `out_dir/latents.mmh` plus `out_dir/manifest.json`.
/// Records whose content hash (image bytes, stage, adapter) is unchanged are
/// copied from the previous cache; if nothing changed, no file is written.
/// Missing or unreadable images are listed in `errors` and skipped.
CacheManifest build_latent_cache(std::span<const CorpusRecord> records, const std::filesystem::path& manifest_dir,
                                 const LatentAdapter& adapter, const std::filesystem::path& out_dir,
                                 const CacheOptions& options = {});

struct CachedLatent {
    std::string id;
    Tensor32 latent;
};

std::vector<CachedLatent> read_latent_cache(const std::filesystem::path& out_dir);

}  // namespace mmh
