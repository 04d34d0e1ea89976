#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmhdit/container.hpp"
#include "mmhdit/datapipe.hpp"
#include "mmhdit/flow.hpp"
#include "mmhdit/model.hpp"
#include "mmhdit/rng.hpp"

namespace mmh {

// ---------------------------------------------------------------- optimizer

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Applied to parameters with two or more axes; vectors (biases) are not decayed.
    double weight_decay = 0.01;

    void validate() const;
    nlohmann::json to_json() const;
    static AdamWConfig from_json(const nlohmann::json& j, const std::string& where = "optimizer");
};

/// Moments for every trainable parameter, in parameter-list order.
template <class T>
struct OptimizerState {
    AdamWConfig config;
    std::int64_t step = 0;
    std::vector<std::string> names;
    std::vector<Tensor<T>> m, v;

    static OptimizerState init(const ParameterList<T>& params, AdamWConfig config);
};

/// One decoupled-decay Adam update from the gradients held by `params`:
///   p <- p (1 - lr wd);  m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
///   p <- p - lr (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
/// Parameters that no backward pass reached count as zero gradients.
/// Returns false, leaving parameters and state untouched, if any gradient is
/// not finite.
template <class T>
bool adamw_step(ParameterList<T>& params, OptimizerState<T>& state, double lr);

template <class T>
void zero_grads(ParameterList<T>& params);

// ---------------------------------------------------------------- schedule

struct StageSpec {
    std::string name = "stage";
    /// "square256" (stage 1) or "area250k" (stage 2); only checked against cached data.
    std::string resolution = "square256";
    double lr_start = 2e-4;
    double lr_end = 2e-4;
    std::int64_t batch_size = 8;
    std::int64_t max_steps = 1000;
    std::int64_t warmup_steps = 100;

    void validate(const std::string& where = "stage") const;
    nlohmann::json to_json() const;
    static StageSpec from_json(const nlohmann::json& j, const std::string& where = "stage");
};

struct SpikePolicy {
    double ema_decay = 0.9;
    double threshold = 3.0;  // spike iff loss > threshold * EMA
    double lr_decay = 0.7;   // LR factor applied per spike

    void validate() const;
    nlohmann::json to_json() const;
    static SpikePolicy from_json(const nlohmann::json& j, const std::string& where = "spike");
};

/// Linear warmup from 0 to lr_start, linear decay to lr_end at max_steps,
/// times lr_decay^spikes.
double lr_at(std::int64_t step, const StageSpec& stage, std::int64_t spikes, double lr_decay);

/// EMA of the loss seeded with the first observation.
struct SpikeDetector {
    double ema = 0.0;
    bool initialized = false;

    /// Compares against the EMA before folding `loss` in. Non-finite losses
    /// are ignored here; the trainer skips those steps instead.
    bool update(double loss, const SpikePolicy& policy);
};

// ---------------------------------------------------------------- data

/// Source of training pairs. Batches depend only on the supplied stream.
class TrainingSource {
   public:
    virtual ~TrainingSource() = default;
    virtual std::size_t size() const = 0;
    /// Fills `latents` ([B, C, H, W]) and `captions` (B entries).
    virtual void draw(Rng& rng, std::int64_t batch, Tensor32& latents, std::vector<std::string>& captions) const = 0;
};

/// Eight (by default) prompt classes, each a tight Gaussian around its own
/// random centroid. Infinite; size() is the class count.
class SyntheticClassData final : public TrainingSource {
   public:
    SyntheticClassData(std::uint64_t seed, std::int64_t classes, Shape latent_shape, double spread);

    std::size_t size() const override { return centroids_.size(); }
    void draw(Rng& rng, std::int64_t batch, Tensor32& latents, std::vector<std::string>& captions) const override;

    std::int64_t classes() const { return static_cast<std::int64_t>(centroids_.size()); }
    const Shape& latent_shape() const { return shape_; }
    const std::vector<float>& centroid(std::int64_t k) const { return centroids_[static_cast<std::size_t>(k)]; }
    static std::string caption(std::int64_t k);
    /// Index of the closest centroid (Euclidean).
    std::int64_t nearest(std::span<const float> latent) const;

   private:
    Shape shape_;
    double spread_;
    std::vector<std::vector<float>> centroids_;
};

/// Latents from a prep cache with captions from the corpus manifest. Each
/// batch is drawn from records sharing one latent shape.
class LatentCacheData final : public TrainingSource {
   public:
    LatentCacheData(const std::filesystem::path& cache_dir, const std::filesystem::path& corpus_manifest);

    std::size_t size() const override { return items_.size(); }
    void draw(Rng& rng, std::int64_t batch, Tensor32& latents, std::vector<std::string>& captions) const override;

   private:
    struct Item {
        Tensor32 latent;
        std::string caption;
    };
    std::vector<Item> items_;
};

struct DataSpec {
    std::string kind = "synthetic";  // "synthetic" | "latent_cache"
    std::int64_t classes = 8;
    double spread = 0.1;
    std::int64_t latent_size = 8;  // synthetic latents are [channels, size, size]
    std::uint64_t seed = 0;
    std::string cache_dir;
    std::string manifest;

    void validate() const;
    nlohmann::json to_json() const;
    static DataSpec from_json(const nlohmann::json& j, const std::string& where = "data");
};

std::unique_ptr<TrainingSource> make_training_source(const DataSpec& spec, const ModelConfig& model,
                                                     const std::filesystem::path& base_dir = {});

// ---------------------------------------------------------------- config

struct TrainConfig {
    ModelConfig model;
    std::vector<StageSpec> stages;
    AdamWConfig optimizer;
    SpikePolicy spike;
    DataSpec data;
    std::uint64_t seed = 0;
    double cfg_dropout = 0.1;  // captions replaced by "" with this probability
    double sigma = 0.0;
    std::int64_t checkpoint_every = 0;  // 0: only at the end of each stage

    void validate() const;
    nlohmann::json to_json() const;
    /// Field-precise ConfigError messages ("stages[1].lr_end: ...").
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig load(const std::filesystem::path& path);

    static TrainConfig desk();
    static TrainConfig paper_scale();
};

// ---------------------------------------------------------------- training

struct TrainState {
    std::int64_t stage_index = 0;
    std::int64_t step_in_stage = 0;
    std::int64_t global_step = 0;
    std::int64_t spikes_in_stage = 0;
    std::int64_t spike_count = 0;
    std::int64_t skipped_steps = 0;
    SpikeDetector loss_ema;
    std::string data_rng, noise_rng;  // serialized Rng states
    OptimizerState<float> optim;

    nlohmann::json to_json() const;  // everything except the moment tensors
};

struct StepRecord {
    std::int64_t step = 0;  // global, 1-based
    std::int64_t stage = 0;
    double loss = 0.0;
    double ema_loss = 0.0;
    double lr = 0.0;
    bool spike = false;
    bool skipped = false;
    double wallclock = 0.0;

    nlohmann::json to_json() const;
};

/// Append-only JSON-lines metrics. Opening for a resumed run drops lines
/// past the checkpoint so every step appears exactly once.
class MetricsLog {
   public:
    MetricsLog() = default;
    MetricsLog(const std::filesystem::path& path, std::int64_t keep_through_step);
    void write(const StepRecord& record);
    bool is_open() const { return out_.is_open(); }

    static std::vector<StepRecord> read(const std::filesystem::path& path);

   private:
    std::ofstream out_;
};

class Trainer {
   public:
    explicit Trainer(TrainConfig config);
    /// Restores model, optimizer, rng streams and counters. A checkpoint whose
    /// model config differs from `config.model` raises ConfigError.
    static Trainer resume(TrainConfig config, const std::filesystem::path& checkpoint);

    const TrainConfig& config() const { return config_; }
    DiT<float>& model() { return *model_; }
    const DiT<float>& model() const { return *model_; }
    const TrainState& state() const { return state_; }
    bool finished() const { return state_.stage_index >= static_cast<std::int64_t>(config_.stages.size()); }

    /// One optimizer step of the current stage.
    StepRecord step(const TrainingSource& data);

    /// Runs the current stage to its end (or until `step_limit` more steps),
    /// writing metrics and periodic checkpoints to `checkpoint_path` when set.
    void run_stage(const TrainingSource& data, MetricsLog* log, const std::filesystem::path& checkpoint_path = {},
                   std::optional<std::int64_t> step_limit = {});
    /// All remaining stages.
    void run(const TrainingSource& data, MetricsLog* log, const std::filesystem::path& checkpoint_path = {},
             std::optional<std::int64_t> step_limit = {});

    TensorContainer checkpoint() const;
    void save_checkpoint(const std::filesystem::path& path) const;

   private:
    void advance_stage();

    TrainConfig config_;
    std::unique_ptr<DiT<float>> model_;
    ParameterList<float> params_;
    TrainState state_;
    std::chrono::steady_clock::time_point started_;
};

/// Model weights from a training or weights-only checkpoint.
std::unique_ptr<DiT<float>> load_model(const std::filesystem::path& checkpoint);

/// Every model.* tensor plus the config.
TensorContainer model_container(const DiT<float>& model);

}  // namespace mmh
