#include "mmhdit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mmhdit/errors.hpp"
#include "mmhdit/ops.hpp"

namespace mmh {

namespace {

using nlohmann::json;

/// Field-checked reads from a config object; every error names `where.key`.
class Fields {
   public:
    Fields(const json& j, std::string where, std::initializer_list<const char*> known) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) throw ConfigError("field '" + where_ + "': expected an object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
                throw ConfigError("field '" + path(it.key()) + "': unknown field");
            }
        }
    }
    std::string path(const std::string& key) const { return where_ + "." + key; }

    void get(const char* key, double& dst) const {
        if (!j_.contains(key)) return;
        if (!j_[key].is_number()) throw ConfigError("field '" + path(key) + "': expected a number");
        dst = j_[key].get<double>();
    }
    void get(const char* key, std::int64_t& dst) const {
        if (!j_.contains(key)) return;
        if (!j_[key].is_number_integer()) throw ConfigError("field '" + path(key) + "': expected an integer");
        dst = j_[key].get<std::int64_t>();
    }
    void get(const char* key, std::uint64_t& dst) const {
        if (!j_.contains(key)) return;
        if (!j_[key].is_number_unsigned()) throw ConfigError("field '" + path(key) + "': expected a non-negative integer");
        dst = j_[key].get<std::uint64_t>();
    }
    void get(const char* key, std::string& dst) const {
        if (!j_.contains(key)) return;
        if (!j_[key].is_string()) throw ConfigError("field '" + path(key) + "': expected a string");
        dst = j_[key].get<std::string>();
    }

   private:
    const json& j_;
    std::string where_;
};

void require(bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError("field '" + field + "': " + message);
}

Tensor32 copy_tensor(const Tensor32& t) { return Tensor32::from_data(t.shape(), {t.data().begin(), t.data().end()}); }

}  // namespace

// ---------------------------------------------------------------- optimizer

void AdamWConfig::validate() const {
    require(beta1 >= 0 && beta1 < 1, "optimizer.beta1", "must be in [0, 1)");
    require(beta2 >= 0 && beta2 < 1, "optimizer.beta2", "must be in [0, 1)");
    require(eps > 0, "optimizer.eps", "must be positive");
    require(weight_decay >= 0, "optimizer.weight_decay", "must be non-negative");
}

json AdamWConfig::to_json() const {
    return {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"weight_decay", weight_decay}};
}

AdamWConfig AdamWConfig::from_json(const json& j, const std::string& where) {
    Fields f(j, where, {"beta1", "beta2", "eps", "weight_decay"});
    AdamWConfig c;
    f.get("beta1", c.beta1);
    f.get("beta2", c.beta2);
    f.get("eps", c.eps);
    f.get("weight_decay", c.weight_decay);
    c.validate();
    return c;
}

template <class T>
OptimizerState<T> OptimizerState<T>::init(const ParameterList<T>& params, AdamWConfig config) {
    config.validate();
    OptimizerState s;
    s.config = config;
    for (const auto& p : params) {
        if (!p.trainable) continue;
        s.names.push_back(p.name);
        s.m.push_back(Tensor<T>::zeros(p.tensor.shape()));
        s.v.push_back(Tensor<T>::zeros(p.tensor.shape()));
    }
    return s;
}

template <class T>
bool adamw_step(ParameterList<T>& params, OptimizerState<T>& state, double lr) {
    std::vector<Tensor<T>*> live;
    for (auto& p : params) {
        if (p.trainable) live.push_back(&p.tensor);
    }
    if (live.size() != state.m.size()) {
        throw ContractError("optimizer tracks " + std::to_string(state.m.size()) + " parameters, got " +
                            std::to_string(live.size()));
    }
    for (auto* p : live) {
        for (T g : p->grad()) {
            if (!std::isfinite(g)) return false;
        }
    }
    const auto& c = state.config;
    state.step += 1;
    const double k = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, k);
    const double bc2 = 1.0 - std::pow(c.beta2, k);
    for (std::size_t i = 0; i < live.size(); ++i) {
        auto& p = *live[i];
        if (p.shape() != state.m[i].shape()) {
            throw DimensionError("optimizer moment for '" + state.names[i] + "' has shape " +
                                 shape_str(state.m[i].shape()) + ", parameter has " + shape_str(p.shape()));
        }
        // Arithmetic in T keeps the loop vectorizable; T = double gives the exact reference.
        const T decay = static_cast<T>(p.ndim() >= 2 ? 1.0 - lr * c.weight_decay : 1.0);
        const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
        const T step_size = static_cast<T>(lr / bc1);
        const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
        const T eps = static_cast<T>(c.eps);
        T* w = p.data_mut().data();
        T* m = state.m[i].data_mut().data();
        T* v = state.v[i].data_mut().data();
        const std::size_t n = p.data().size();
        if (p.grad().empty()) {
            for (std::size_t e = 0; e < n; ++e) {
                m[e] = b1 * m[e];
                v[e] = b2 * v[e];
                w[e] = w[e] * decay - step_size * m[e] / (std::sqrt(v[e]) * inv_sqrt_bc2 + eps);
            }
            continue;
        }
        const T* g = p.grad().data();
        for (std::size_t e = 0; e < n; ++e) {
            m[e] = b1 * m[e] + (T(1) - b1) * g[e];
            v[e] = b2 * v[e] + (T(1) - b2) * g[e] * g[e];
            w[e] = w[e] * decay - step_size * m[e] / (std::sqrt(v[e]) * inv_sqrt_bc2 + eps);
        }
    }
    return true;
}

template <class T>
void zero_grads(ParameterList<T>& params) {
    for (auto& p : params) {
        if (p.tensor.has_grad()) p.tensor.zero_grad();
    }
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template bool adamw_step(ParameterList<float>&, OptimizerState<float>&, double);
template bool adamw_step(ParameterList<double>&, OptimizerState<double>&, double);
template void zero_grads(ParameterList<float>&);
template void zero_grads(ParameterList<double>&);

// ---------------------------------------------------------------- schedule

void StageSpec::validate(const std::string& where) const {
    require(resolution == "square256" || resolution == "area250k", where + ".resolution",
            "expected \"square256\" or \"area250k\", got \"" + resolution + "\"");
    require(lr_start >= 0, where + ".lr_start", "must be non-negative");
    require(lr_end >= 0 && lr_end <= lr_start, where + ".lr_end", "must be in [0, lr_start]");
    require(batch_size >= 1, where + ".batch_size", "must be at least 1");
    require(max_steps >= 0, where + ".max_steps", "must be non-negative");
    require(warmup_steps >= 0 && warmup_steps <= max_steps, where + ".warmup_steps", "must be in [0, max_steps]");
}

json StageSpec::to_json() const {
    return {{"name", name},         {"resolution", resolution}, {"lr_start", lr_start},         {"lr_end", lr_end},
            {"batch_size", batch_size}, {"max_steps", max_steps}, {"warmup_steps", warmup_steps}};
}

StageSpec StageSpec::from_json(const json& j, const std::string& where) {
    Fields f(j, where, {"name", "resolution", "lr_start", "lr_end", "batch_size", "max_steps", "warmup_steps"});
    StageSpec s;
    f.get("name", s.name);
    f.get("resolution", s.resolution);
    f.get("lr_start", s.lr_start);
    s.lr_end = s.lr_start;
    f.get("lr_end", s.lr_end);
    f.get("batch_size", s.batch_size);
    f.get("max_steps", s.max_steps);
    f.get("warmup_steps", s.warmup_steps);
    s.validate(where);
    return s;
}

void SpikePolicy::validate() const {
    require(ema_decay >= 0 && ema_decay < 1, "spike.ema_decay", "must be in [0, 1)");
    require(threshold > 1, "spike.threshold", "must exceed 1");
    require(lr_decay > 0 && lr_decay <= 1, "spike.lr_decay", "must be in (0, 1]");
}

json SpikePolicy::to_json() const {
    return {{"ema_decay", ema_decay}, {"threshold", threshold}, {"lr_decay", lr_decay}};
}

SpikePolicy SpikePolicy::from_json(const json& j, const std::string& where) {
    Fields f(j, where, {"ema_decay", "threshold", "lr_decay"});
    SpikePolicy p;
    f.get("ema_decay", p.ema_decay);
    f.get("threshold", p.threshold);
    f.get("lr_decay", p.lr_decay);
    p.validate();
    return p;
}

double lr_at(std::int64_t step, const StageSpec& stage, std::int64_t spikes, double lr_decay) {
    double lr;
    if (step < stage.warmup_steps) {
        lr = stage.lr_start * static_cast<double>(step) / static_cast<double>(stage.warmup_steps);
    } else if (stage.max_steps <= stage.warmup_steps) {
        lr = stage.lr_start;
    } else {
        const double frac = std::min(1.0, static_cast<double>(step - stage.warmup_steps) /
                                              static_cast<double>(stage.max_steps - stage.warmup_steps));
        lr = stage.lr_start + (stage.lr_end - stage.lr_start) * frac;
    }
    return lr * std::pow(lr_decay, static_cast<double>(spikes));
}

bool SpikeDetector::update(double loss, const SpikePolicy& policy) {
    if (!std::isfinite(loss)) return false;
    if (!initialized) {
        ema = loss;
        initialized = true;
        return false;
    }
    const bool spike = loss > policy.threshold * ema;
    ema = policy.ema_decay * ema + (1.0 - policy.ema_decay) * loss;
    return spike;
}

// ---------------------------------------------------------------- data

SyntheticClassData::SyntheticClassData(std::uint64_t seed, std::int64_t classes, Shape latent_shape, double spread)
    : shape_(std::move(latent_shape)), spread_(spread) {
    if (classes < 1) throw ConfigError("field 'data.classes': must be at least 1");
    if (spread < 0) throw ConfigError("field 'data.spread': must be non-negative");
    Rng rng(Rng::derive(seed, 0x63656e74));
    const auto n = static_cast<std::size_t>(shape_numel(shape_));
    for (std::int64_t k = 0; k < classes; ++k) {
        std::vector<float> c(n);
        for (auto& x : c) x = static_cast<float>(rng.normal());
        centroids_.push_back(std::move(c));
    }
}

std::string SyntheticClassData::caption(std::int64_t k) {
    static const char* words[] = {"red", "green", "blue", "amber", "violet", "cyan", "ivory", "coal"};
    const auto w = words[k % 8];
    return std::string("a ") + w + " thing" + (k >= 8 ? " variant " + std::to_string(k / 8) : "");
}

void SyntheticClassData::draw(Rng& rng, std::int64_t batch, Tensor32& latents, std::vector<std::string>& captions) const {
    Shape shape{batch};
    shape.insert(shape.end(), shape_.begin(), shape_.end());
    const auto n = centroids_[0].size();
    std::vector<float> data(static_cast<std::size_t>(batch) * n);
    captions.clear();
    for (std::int64_t b = 0; b < batch; ++b) {
        const auto k = static_cast<std::int64_t>(rng.below(centroids_.size()));
        captions.push_back(caption(k));
        const auto& c = centroids_[static_cast<std::size_t>(k)];
        float* dst = data.data() + static_cast<std::size_t>(b) * n;
        for (std::size_t e = 0; e < n; ++e) dst[e] = c[e] + static_cast<float>(spread_ * rng.normal());
    }
    latents = Tensor32::from_data(std::move(shape), std::move(data));
}

std::int64_t SyntheticClassData::nearest(std::span<const float> latent) const {
    std::int64_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < centroids_.size(); ++k) {
        double d = 0;
        for (std::size_t e = 0; e < latent.size(); ++e) {
            const double diff = static_cast<double>(latent[e]) - centroids_[k][e];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::int64_t>(k);
        }
    }
    return best;
}

LatentCacheData::LatentCacheData(const std::filesystem::path& cache_dir, const std::filesystem::path& corpus_manifest) {
    std::map<std::string, std::string> captions;
    for (const auto& r : read_manifest(corpus_manifest)) captions[r.id] = r.caption;
    for (auto& c : read_latent_cache(cache_dir)) {
        auto it = captions.find(c.id);
        items_.push_back({std::move(c.latent), it == captions.end() ? std::string() : it->second});
    }
}

void LatentCacheData::draw(Rng& rng, std::int64_t batch, Tensor32& latents, std::vector<std::string>& captions) const {
    if (items_.empty()) throw ConfigError("training data is empty");
    const auto& anchor = items_[rng.below(items_.size())];
    std::vector<std::size_t> same;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].latent.shape() == anchor.latent.shape()) same.push_back(i);
    }
    Shape shape{batch};
    shape.insert(shape.end(), anchor.latent.shape().begin(), anchor.latent.shape().end());
    std::vector<float> data;
    captions.clear();
    for (std::int64_t b = 0; b < batch; ++b) {
        const auto& item = items_[same[rng.below(same.size())]];
        data.insert(data.end(), item.latent.data().begin(), item.latent.data().end());
        captions.push_back(item.caption);
    }
    latents = Tensor32::from_data(std::move(shape), std::move(data));
}

void DataSpec::validate() const {
    require(kind == "synthetic" || kind == "latent_cache", "data.kind",
            "expected \"synthetic\" or \"latent_cache\", got \"" + kind + "\"");
    if (kind == "synthetic") {
        require(classes >= 1, "data.classes", "must be at least 1");
        require(spread >= 0, "data.spread", "must be non-negative");
        require(latent_size >= 1, "data.latent_size", "must be at least 1");
    } else {
        require(!cache_dir.empty(), "data.cache_dir", "required for latent_cache data");
        require(!manifest.empty(), "data.manifest", "required for latent_cache data");
    }
}

json DataSpec::to_json() const {
    if (kind == "synthetic") {
        return {{"kind", kind}, {"classes", classes}, {"spread", spread}, {"latent_size", latent_size}, {"seed", seed}};
    }
    return {{"kind", kind}, {"cache_dir", cache_dir}, {"manifest", manifest}};
}

DataSpec DataSpec::from_json(const json& j, const std::string& where) {
    Fields f(j, where, {"kind", "classes", "spread", "latent_size", "seed", "cache_dir", "manifest"});
    DataSpec d;
    f.get("kind", d.kind);
    f.get("classes", d.classes);
    f.get("spread", d.spread);
    f.get("latent_size", d.latent_size);
    f.get("seed", d.seed);
    f.get("cache_dir", d.cache_dir);
    f.get("manifest", d.manifest);
    d.validate();
    return d;
}

std::unique_ptr<TrainingSource> make_training_source(const DataSpec& spec, const ModelConfig& model,
                                                     const std::filesystem::path& base_dir) {
    spec.validate();
    if (spec.kind == "synthetic") {
        return std::make_unique<SyntheticClassData>(spec.seed, spec.classes,
                                                    Shape{model.latent_channels, spec.latent_size, spec.latent_size},
                                                    spec.spread);
    }
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    auto data = std::make_unique<LatentCacheData>(resolve(spec.cache_dir), resolve(spec.manifest));
    if (data->size() == 0) throw ConfigError("field 'data.cache_dir': latent cache has no entries");
    return data;
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
    model.validate();
    require(!stages.empty(), "stages", "at least one stage is required");
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].validate("stages[" + std::to_string(i) + "]");
    optimizer.validate();
    spike.validate();
    data.validate();
    require(cfg_dropout >= 0 && cfg_dropout <= 1, "cfg_dropout", "must be in [0, 1]");
    require(sigma >= 0, "sigma", "must be non-negative");
    require(checkpoint_every >= 0, "checkpoint_every", "must be non-negative");
}

json TrainConfig::to_json() const {
    json st = json::array();
    for (const auto& s : stages) st.push_back(s.to_json());
    return {{"model", model.to_json()},
            {"stages", st},
            {"optimizer", optimizer.to_json()},
            {"spike", spike.to_json()},
            {"data", data.to_json()},
            {"seed", seed},
            {"cfg_dropout", cfg_dropout},
            {"sigma", sigma},
            {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    Fields f(j, "config", {"model", "stages", "optimizer", "spike", "data", "seed", "cfg_dropout", "sigma",
                           "checkpoint_every", "$schema"});
    TrainConfig c;
    if (!j.contains("model")) throw ConfigError("field 'model': required");
    c.model = ModelConfig::from_json(j["model"], "model");
    if (!j.contains("stages") || !j["stages"].is_array()) throw ConfigError("field 'stages': expected an array");
    for (std::size_t i = 0; i < j["stages"].size(); ++i) {
        c.stages.push_back(StageSpec::from_json(j["stages"][i], "stages[" + std::to_string(i) + "]"));
    }
    if (j.contains("optimizer")) c.optimizer = AdamWConfig::from_json(j["optimizer"]);
    if (j.contains("spike")) c.spike = SpikePolicy::from_json(j["spike"]);
    if (j.contains("data")) c.data = DataSpec::from_json(j["data"]);
    f.get("seed", c.seed);
    f.get("cfg_dropout", c.cfg_dropout);
    f.get("sigma", c.sigma);
    f.get("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
    try {
        return from_json(j);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.model = ModelConfig::desk();
    StageSpec s;
    s.name = "desk";
    s.resolution = "square256";
    s.lr_start = 1e-3;
    s.lr_end = 1e-4;
    s.batch_size = 8;
    s.max_steps = 2000;
    s.warmup_steps = 100;
    c.stages = {s};
    return c;
}

TrainConfig TrainConfig::paper_scale() {
    TrainConfig c;
    c.model = ModelConfig::paper_scale();
    c.stages = {{"pretrain-256", "square256", 2e-4, 2e-4, 1024, 200000, 1000},
                {"area-512", "area250k", 1e-4, 7e-5, 384, 100000, 1000},
                {"final", "area250k", 2e-5, 1e-6, 384, 50000, 1000}};
    c.data.kind = "latent_cache";
    c.data.cache_dir = "cache/stage2";
    c.data.manifest = "corpus.jsonl";
    c.checkpoint_every = 1000;
    return c;
}

// ---------------------------------------------------------------- training

json TrainState::to_json() const {
    return {{"stage_index", stage_index},
            {"step_in_stage", step_in_stage},
            {"global_step", global_step},
            {"spikes_in_stage", spikes_in_stage},
            {"spike_count", spike_count},
            {"skipped_steps", skipped_steps},
            {"ema_loss", loss_ema.ema},
            {"ema_initialized", loss_ema.initialized},
            {"data_rng", data_rng},
            {"noise_rng", noise_rng},
            {"optimizer_step", optim.step}};
}

json StepRecord::to_json() const {
    return {{"step", step}, {"stage", stage},  {"loss", loss},       {"ema_loss", ema_loss},
            {"lr", lr},     {"spike", spike}, {"skipped", skipped}, {"wallclock", wallclock}};
}

MetricsLog::MetricsLog(const std::filesystem::path& path, std::int64_t keep_through_step) {
    std::vector<std::string> kept;
    if (keep_through_step > 0 && std::filesystem::exists(path)) {
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("step")) continue;
            if (j["step"].get<std::int64_t>() <= keep_through_step) kept.push_back(line);
        }
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw FileError("cannot write metrics to " + path.string());
    for (const auto& line : kept) out_ << line << '\n';
    out_.flush();
}

void MetricsLog::write(const StepRecord& record) {
    out_ << record.to_json().dump() << '\n';
    out_.flush();
}

std::vector<StepRecord> MetricsLog::read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open metrics " + path.string());
    std::vector<StepRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = json::parse(line);
        StepRecord r;
        r.step = j.at("step");
        r.stage = j.at("stage");
        r.loss = j.at("loss");
        r.ema_loss = j.at("ema_loss");
        r.lr = j.at("lr");
        r.spike = j.at("spike");
        r.skipped = j.value("skipped", false);
        r.wallclock = j.at("wallclock");
        out.push_back(r);
    }
    return out;
}

Trainer::Trainer(TrainConfig config) : config_(std::move(config)), started_(std::chrono::steady_clock::now()) {
    config_.validate();
    model_ = std::make_unique<DiT<float>>(config_.model, config_.seed);
    params_ = model_->parameters();
    state_.optim = OptimizerState<float>::init(params_, config_.optimizer);
    state_.data_rng = Rng(Rng::derive(config_.seed, 0x64617461)).state();
    state_.noise_rng = Rng(Rng::derive(config_.seed, 0x6e6f6973)).state();
}

TensorContainer model_container(const DiT<float>& model) {
    TensorContainer c;
    for (const auto& p : model.parameters()) c.put("model." + p.name, p.tensor);
    c.config = model.config().to_json();
    c.metadata["kind"] = "weights";
    return c;
}

TensorContainer Trainer::checkpoint() const {
    TensorContainer c;
    for (const auto& p : params_) c.put("model." + p.name, p.tensor);
    for (std::size_t i = 0; i < state_.optim.names.size(); ++i) {
        c.put("optim.m." + state_.optim.names[i], state_.optim.m[i]);
        c.put("optim.v." + state_.optim.names[i], state_.optim.v[i]);
    }
    c.config = config_.to_json();
    c.metadata["kind"] = "train";
    c.metadata["train_state"] = state_.to_json();
    return c;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    checkpoint().save(path);
}

namespace {

ModelConfig checkpoint_model_config(const TensorContainer& c) {
    if (!c.config.is_object()) throw IntegrityError("checkpoint has no __config__ entry");
    if (c.config.contains("model") && c.config["model"].is_object()) return ModelConfig::from_json(c.config["model"]);
    return ModelConfig::from_json(c.config);
}

void restore_weights(const TensorContainer& c, const ParameterList<float>& params) {
    for (const auto& p : params) {
        const std::string name = "model." + p.name;
        if (!c.contains(name)) throw IntegrityError("checkpoint is missing tensor '" + name + "'");
        auto t = c.get<float>(name);
        if (t.shape() != p.tensor.shape()) {
            throw IntegrityError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                                 shape_str(p.tensor.shape()));
        }
        auto dst = const_cast<Tensor32&>(p.tensor).data_mut();
        std::copy(t.data().begin(), t.data().end(), dst.begin());
    }
}

std::string describe_mismatch(const ModelConfig& have, const ModelConfig& want) {
    const auto a = have.to_json();
    const auto b = want.to_json();
    std::string fields;
    for (auto it = b.begin(); it != b.end(); ++it) {
        if (!a.contains(it.key()) || a[it.key()] != it.value()) {
            if (!fields.empty()) fields += ", ";
            fields += it.key() + " (checkpoint " + (a.contains(it.key()) ? a[it.key()].dump() : "absent") +
                      ", requested " + it.value().dump() + ")";
        }
    }
    return "checkpoint model config differs from the requested one: " + fields;
}

}  // namespace

std::unique_ptr<DiT<float>> load_model(const std::filesystem::path& checkpoint) {
    auto c = TensorContainer::load(checkpoint);
    auto model = std::make_unique<DiT<float>>(checkpoint_model_config(c), 0);
    restore_weights(c, model->parameters());
    return model;
}

Trainer Trainer::resume(TrainConfig config, const std::filesystem::path& checkpoint) {
    auto c = TensorContainer::load(checkpoint);
    const auto stored = checkpoint_model_config(c);
    if (!(stored == config.model)) throw ConfigError(describe_mismatch(stored, config.model));
    if (!c.metadata.contains("train_state")) {
        throw IntegrityError(checkpoint.string() + " holds weights only, not a training state");
    }
    Trainer t(std::move(config));
    restore_weights(c, t.params_);
    auto& optim = t.state_.optim;
    for (std::size_t i = 0; i < optim.names.size(); ++i) {
        for (auto [prefix, dst] : {std::pair{"optim.m.", &optim.m[i]}, std::pair{"optim.v.", &optim.v[i]}}) {
            const std::string name = prefix + optim.names[i];
            if (!c.contains(name)) throw IntegrityError("checkpoint is missing tensor '" + name + "'");
            auto loaded = c.get<float>(name);
            if (loaded.shape() != dst->shape()) throw IntegrityError("tensor '" + name + "' has the wrong shape");
            *dst = copy_tensor(loaded);
        }
    }
    const auto& s = c.metadata["train_state"];
    try {
        t.state_.stage_index = s.at("stage_index");
        t.state_.step_in_stage = s.at("step_in_stage");
        t.state_.global_step = s.at("global_step");
        t.state_.spikes_in_stage = s.at("spikes_in_stage");
        t.state_.spike_count = s.at("spike_count");
        t.state_.skipped_steps = s.at("skipped_steps");
        t.state_.loss_ema.ema = s.at("ema_loss");
        t.state_.loss_ema.initialized = s.at("ema_initialized");
        t.state_.data_rng = s.at("data_rng");
        t.state_.noise_rng = s.at("noise_rng");
        optim.step = s.at("optimizer_step");
    } catch (const json::exception& e) {
        throw IntegrityError("checkpoint train_state is malformed: " + std::string(e.what()));
    }
    return t;
}

StepRecord Trainer::step(const TrainingSource& data) {
    if (finished()) throw ContractError("training already finished");
    const auto& stage = config_.stages[static_cast<std::size_t>(state_.stage_index)];
    if (data.size() == 0) throw ConfigError("training data is empty");

    Rng data_rng;
    data_rng.set_state(state_.data_rng);
    Rng noise_rng;
    noise_rng.set_state(state_.noise_rng);

    Tensor32 latents;
    std::vector<std::string> captions;
    data.draw(data_rng, stage.batch_size, latents, captions);
    for (auto& c : captions) {
        if (data_rng.uniform() < config_.cfg_dropout) c.clear();
    }
    std::vector<TextEmbedding<float>> texts;
    texts.reserve(captions.size());
    for (const auto& c : captions) texts.push_back(model_->encode_prompt(c));

    auto batch = make_flow_batch(latents, noise_rng, config_.sigma);
    auto loss = icfm_loss<float>(*model_, batch, texts);
    const double loss_value = loss.item();

    StepRecord rec;
    rec.stage = state_.stage_index;
    rec.loss = loss_value;
    rec.spike = state_.loss_ema.update(loss_value, config_.spike);
    if (rec.spike) {
        ++state_.spikes_in_stage;
        ++state_.spike_count;
    }
    rec.lr = lr_at(state_.step_in_stage + 1, stage, state_.spikes_in_stage, config_.spike.lr_decay);
    bool applied = false;
    if (std::isfinite(loss_value)) {
        loss.backward();
        applied = adamw_step(params_, state_.optim, rec.lr);
    }
    zero_grads(params_);
    if (!applied) {
        rec.skipped = true;
        ++state_.skipped_steps;
    }

    state_.data_rng = data_rng.state();
    state_.noise_rng = noise_rng.state();
    ++state_.step_in_stage;
    ++state_.global_step;
    rec.step = state_.global_step;
    rec.ema_loss = state_.loss_ema.ema;
    rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    if (state_.step_in_stage >= stage.max_steps) advance_stage();
    return rec;
}

void Trainer::advance_stage() {
    ++state_.stage_index;
    state_.step_in_stage = 0;
    state_.spikes_in_stage = 0;
}

void Trainer::run_stage(const TrainingSource& data, MetricsLog* log, const std::filesystem::path& checkpoint_path,
                        std::optional<std::int64_t> step_limit) {
    if (finished()) return;
    if (data.size() == 0) throw ConfigError("training data is empty");
    const auto stage = state_.stage_index;
    if (config_.stages[static_cast<std::size_t>(stage)].max_steps == 0) {
        advance_stage();
        return;
    }
    std::int64_t taken = 0;
    while (!finished() && state_.stage_index == stage && (!step_limit || taken < *step_limit)) {
        auto rec = step(data);
        ++taken;
        if (log) log->write(rec);
        const bool stage_done = state_.stage_index != stage;
        const bool periodic = config_.checkpoint_every > 0 && state_.global_step % config_.checkpoint_every == 0;
        if (!checkpoint_path.empty() && (stage_done || periodic)) save_checkpoint(checkpoint_path);
    }
}

void Trainer::run(const TrainingSource& data, MetricsLog* log, const std::filesystem::path& checkpoint_path,
                  std::optional<std::int64_t> step_limit) {
    const auto start = state_.global_step;
    while (!finished()) {
        std::optional<std::int64_t> remaining;
        if (step_limit) {
            remaining = *step_limit - (state_.global_step - start);
            if (*remaining <= 0) break;
        }
        run_stage(data, log, checkpoint_path, remaining);
    }
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path);
}

}  // namespace mmh
