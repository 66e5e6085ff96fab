#include "acvtt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "acvtt/avol.hpp"
#include "acvtt/binary_io.hpp"
#include "acvtt/errors.hpp"

namespace acvtt {

namespace fs = std::filesystem;
using nlohmann::json;

ModelConfig ExperimentConfig::model_config() const {
    ModelConfig m;
    m.widths = {base_width, 2 * base_width, 4 * base_width, 8 * base_width};
    m.fusion_depth = fusion_depth;
    m.fusion_width = fusion_width;
    return m;
}

NetworkOptions ExperimentConfig::network_options() const {
    NetworkOptions o;
    o.fusion = relevance_fusion ? FusionMode::relevance : FusionMode::average;
    return o;
}

namespace {

template <typename T>
T take(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

std::array<std::size_t, 3> take_dims(const json& j, const char* key, std::array<std::size_t, 3> fallback) {
    auto v = take<std::vector<std::size_t>>(j, key, {fallback.begin(), fallback.end()});
    if (v.size() != 3) throw ConfigError(std::string("config key '") + key + "' needs three extents");
    return {v[0], v[1], v[2]};
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double mean_abs_diff(const Volume& a, const Volume& b) {
    if (!a.same_shape(b)) throw DimensionError("loss: volume shapes differ");
    Graph g(false);
    Tensor ta({a.size()}, {a.voxels().begin(), a.voxels().end()});
    Tensor tb({b.size()}, {b.voxels().begin(), b.voxels().end()});
    return ops::l1_loss(g, ta, tb).item();
}

Rng step_rng(const TrainState& state) {
    return Rng({state.config.seed, static_cast<std::uint64_t>(state.stage), static_cast<std::uint64_t>(state.step)});
}

struct Sample {
    std::array<std::size_t, 3> offset;
    Volume gt;
    Volume lr;
};

Sample sample_crop(const ExperimentConfig& c, const Volume& volume, Rng& rng) {
    std::array<std::size_t, 3> off = {rng.below(volume.depth() - c.crop[0] + 1), rng.below(volume.height() - c.crop[1] + 1),
                                      rng.below(volume.width() - c.crop[2] + 1)};
    Volume gt = crop_volume(volume, off[0], off[1], off[2], c.crop[0], c.crop[1], c.crop[2]);
    Volume lr = downsample_depth(gt, c.r);
    return {off, std::move(gt), std::move(lr)};
}

std::vector<Tensor> reference_images(const ReferenceSet& refs) {
    std::vector<Tensor> out;
    for (const auto& s : refs.slices) out.push_back(image_tensor(s.image));
    return out;
}

void check_volume_fits(const ExperimentConfig& c, const Volume& v) {
    if (v.depth() < c.crop[0] || v.height() < c.crop[1] || v.width() < c.crop[2]) {
        throw ConfigError("crop exceeds the training volume extents");
    }
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
    static const std::set<std::string> known = {"r",          "N",           "crop",          "base_width",
                                                "lr",         "stage1_steps", "stage2_steps", "seed",
                                                "relevance_fusion", "phantom", "input",       "slices_per_step",
                                                "fusion_depth", "fusion_width", "out_dir",    "threads",
                                                "checkpoint_every"};
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    ExperimentConfig c;
    c.r = take(j, "r", c.r);
    c.n_refs = take(j, "N", c.n_refs);
    c.crop = take_dims(j, "crop", c.crop);
    c.base_width = take(j, "base_width", c.base_width);
    c.lr = take(j, "lr", c.lr);
    c.stage1_steps = take(j, "stage1_steps", c.stage1_steps);
    c.stage2_steps = take(j, "stage2_steps", c.stage2_steps);
    c.seed = take(j, "seed", c.seed);
    c.relevance_fusion = take(j, "relevance_fusion", c.relevance_fusion);
    if (j.contains("phantom")) {
        const json& p = j.at("phantom");
        if (!p.is_object()) throw ConfigError("config key 'phantom' must be an object");
        try {
            c.phantom.kind = parse_phantom_kind(take<std::string>(p, "kind", std::string(to_string(c.phantom.kind))));
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
        c.phantom.dims = take_dims(p, "dims", c.phantom.dims);
        c.phantom.seed = take(p, "seed", c.phantom.seed);
    }
    c.input = take(j, "input", c.input);
    c.slices_per_step = take(j, "slices_per_step", c.slices_per_step);
    c.fusion_depth = take(j, "fusion_depth", c.fusion_depth);
    c.fusion_width = take(j, "fusion_width", c.fusion_width);
    c.out_dir = take(j, "out_dir", c.out_dir);
    c.threads = take(j, "threads", c.threads);
    c.checkpoint_every = take(j, "checkpoint_every", c.checkpoint_every);
    validate_config(c);
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::string text;
    try {
        text = read_text(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    try {
        return parse_config(json::parse(text));
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

json config_json(const ExperimentConfig& c) {
    return {{"r", c.r},
            {"N", c.n_refs},
            {"crop", c.crop},
            {"base_width", c.base_width},
            {"lr", c.lr},
            {"stage1_steps", c.stage1_steps},
            {"stage2_steps", c.stage2_steps},
            {"seed", c.seed},
            {"relevance_fusion", c.relevance_fusion},
            {"phantom", {{"kind", to_string(c.phantom.kind)}, {"dims", c.phantom.dims}, {"seed", c.phantom.seed}}},
            {"input", c.input},
            {"slices_per_step", c.slices_per_step},
            {"fusion_depth", c.fusion_depth},
            {"fusion_width", c.fusion_width},
            {"out_dir", c.out_dir},
            {"threads", c.threads},
            {"checkpoint_every", c.checkpoint_every}};
}

void validate_config(const ExperimentConfig& c) {
    if (c.r < 1) throw ConfigError("r must be at least 1");
    if (c.crop[0] < 2 || (c.crop[0] - 1) % c.r != 0) {
        throw ConfigError("crop depth - 1 must be a positive multiple of r");
    }
    if (c.crop[1] == 0 || c.crop[2] == 0 || c.crop[1] % 8 != 0 || c.crop[2] % 8 != 0) {
        throw ConfigError("crop height and width must be positive multiples of 8");
    }
    const std::size_t d = (c.crop[0] - 1) / c.r + 1;
    if (c.n_refs > d) throw ConfigError("N exceeds the number of sparse slices in a crop");
    if (c.base_width == 0) throw ConfigError("base_width must be positive");
    if (c.fusion_depth > 0 && c.fusion_width == 0) throw ConfigError("fusion_width must be positive");
    if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ConfigError("lr must be a finite non-negative number");
    if (c.slices_per_step == 0) throw ConfigError("slices_per_step must be positive");
    if (c.threads == 0) throw ConfigError("threads must be positive");
    if (c.input.empty()) {
        for (auto e : c.phantom.dims) {
            if (e < 8) throw ConfigError("phantom extents must be at least 8");
        }
        if (c.phantom.dims[0] < c.crop[0] || c.phantom.dims[1] < c.crop[1] || c.phantom.dims[2] < c.crop[2]) {
            throw ConfigError("crop exceeds the phantom extents");
        }
    }
}

std::string config_hash(const ExperimentConfig& c) {
    json h = {{"r", c.r},
              {"N", c.n_refs},
              {"crop", c.crop},
              {"base_width", c.base_width},
              {"lr", fmt_double(c.lr)},
              {"seed", c.seed},
              {"relevance_fusion", c.relevance_fusion},
              {"slices_per_step", c.slices_per_step},
              {"fusion_depth", c.fusion_depth},
              {"fusion_width", c.fusion_width}};
    if (c.input.empty()) {
        h["phantom"] = {{"kind", to_string(c.phantom.kind)}, {"dims", c.phantom.dims}, {"seed", c.phantom.seed}};
    } else {
        h["input_sha"] = fnv1a_hex_file(c.input);
    }
    return fnv1a_hex(h.dump());
}

Volume training_volume(const ExperimentConfig& c) {
    Volume v = c.input.empty()
                   ? generate_phantom(c.phantom.kind, c.phantom.dims[0], c.phantom.dims[1], c.phantom.dims[2], c.phantom.seed)
                   : load_volume(c.input);
    if (v.domain() != IntensityDomain::normalized) v = normalize_hu(v);
    check_volume_fits(c, v);
    return v;
}

double loss_trans(const Volume& v_gt, const Volume& v_cor, const Volume& v_sag) {
    return mean_abs_diff(v_gt, v_cor) + mean_abs_diff(v_gt, v_sag);
}

double loss_fuse(const Volume& v_gt, const Volume& v_fused) { return mean_abs_diff(v_gt, v_fused); }

void Adam::step(std::vector<std::pair<std::string, Tensor>>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        auto& [m, v] = moments_[name];
        if (m.empty()) {
            m.assign(p.numel(), 0.0);
            v.assign(p.numel(), 0.0);
        }
        const auto grad = p.grad();
        auto values = p.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double gi = grad.empty() ? 0.0 : grad[i];
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            values[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

void Adam::save(Checkpoint& cp) const {
    cp.meta["adam"] = {{"t", t_},
                       {"lr", config_.lr},
                       {"beta1", config_.beta1},
                       {"beta2", config_.beta2},
                       {"eps", config_.eps}};
    for (const auto& [name, mv] : moments_) {
        cp.tensors.emplace_back("adam.m/" + name, Tensor({mv.first.size()}, mv.first));
        cp.tensors.emplace_back("adam.v/" + name, Tensor({mv.second.size()}, mv.second));
    }
}

void Adam::load(const Checkpoint& cp, const std::vector<std::pair<std::string, Tensor>>& params) {
    if (!cp.meta.contains("adam")) throw StateError("checkpoint lacks optimizer state");
    const json& a = cp.meta["adam"];
    t_ = a.at("t").get<std::size_t>();
    config_ = {a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(), a.at("eps").get<double>()};
    moments_.clear();
    for (const auto& [name, p] : params) {
        if (!cp.contains("adam.m/" + name)) continue;
        const Tensor& m = cp.get("adam.m/" + name);
        const Tensor& v = cp.get("adam.v/" + name);
        if (m.numel() != p.numel() || v.numel() != p.numel()) throw StateError("optimizer moment shape mismatch for " + name);
        moments_[name] = {{m.values().begin(), m.values().end()}, {v.values().begin(), v.values().end()}};
    }
}

TrainState init_train_state(const ExperimentConfig& config, int stage) {
    validate_config(config);
    TrainState s{config, config_hash(config), init_model(config.model_config(), config.seed), Adam({config.lr}), 0, stage};
    return s;
}

std::vector<std::pair<std::string, Tensor>> trainable_parameters(TrainState& state) {
    const std::string prefix = state.stage == 1 ? "unet/" : "fusion/";
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& p : named_parameters(state.model)) {
        if (p.first.rfind(prefix, 0) == 0) out.push_back(std::move(p));
    }
    return out;
}

StepMetrics train_step_stage1(TrainState& state, const Volume& volume) {
    if (state.stage != 1) throw StateError("train_step_stage1 on a stage-2 state");
    const ExperimentConfig& c = state.config;
    check_volume_fits(c, volume);
    Rng rng = step_rng(state);
    Sample s = sample_crop(c, volume, rng);
    const Plane plane = rng.below(2) == 0 ? Plane::coronal : Plane::sagittal;
    const std::size_t extent = plane_extent(s.gt, plane);
    auto targets = rng.sample_without_replacement(extent, std::min(c.slices_per_step, extent));
    std::sort(targets.begin(), targets.end());
    ReferenceSet refs;
    if (c.n_refs > 0) refs = make_reference_set(s.lr, sample_reference_indices(s.lr.depth(), c.n_refs, ReferenceMode::random, rng));

    const Volume up = upsample_depth_linear(s.lr, c.r);
    auto params = trainable_parameters(state);
    for (auto& [_, p] : params) p.zero_grad();
    Graph g;
    const auto images = reference_images(refs);
    const ReferenceFeatures features = encode_references(g, state.model.unet, images);
    const NetworkOptions options = c.network_options();
    Tensor total;
    for (auto idx : targets) {
        Tensor pred = reconstruct_slice(g, state.model.unet, image_tensor(extract_view(up, plane, idx).image), features, options);
        Tensor loss = ops::l1_loss(g, pred, image_tensor(extract_view(s.gt, plane, idx).image));
        total = total.defined() ? ops::add(g, total, loss) : loss;
    }
    total = ops::scale(g, total, 1.0 / static_cast<double>(targets.size()));
    StepMetrics m{state.step, 1, total.item(), plane, refs.indices};
    g.backward(total);
    state.optimizer.step(params);
    ++state.step;
    return m;
}

std::pair<Volume, Volume> ReconstructionCache::get(const TrainState& state, const Volume& lr,
                                                   std::array<std::size_t, 3> offset, const ReferenceSet& refs) {
    std::vector<std::size_t> key(offset.begin(), offset.end());
    key.insert(key.end(), refs.indices.begin(), refs.indices.end());
    auto it = entries_.find(key);
    if (it == entries_.end()) {
        const ExperimentConfig& c = state.config;
        const NetworkOptions options = c.network_options();
        Volume cor = reconstruct_view(lr, Plane::coronal, refs, c.r, state.model.unet, options, c.threads);
        Volume sag = reconstruct_view(lr, Plane::sagittal, refs, c.r, state.model.unet, options, c.threads);
        it = entries_.emplace(std::move(key), std::make_pair(std::move(cor), std::move(sag))).first;
    }
    return it->second;
}

StepMetrics train_step_stage2(TrainState& state, const Volume& volume, ReconstructionCache& cache) {
    if (state.stage != 2) throw StateError("train_step_stage2 on a stage-1 state");
    const ExperimentConfig& c = state.config;
    check_volume_fits(c, volume);
    Rng rng = step_rng(state);
    Sample s = sample_crop(c, volume, rng);
    ReferenceSet refs;
    if (c.n_refs > 0) refs = make_reference_set(s.lr, sample_reference_indices(s.lr.depth(), c.n_refs, ReferenceMode::random, rng));
    auto [cor, sag] = cache.get(state, s.lr, s.offset, refs);

    auto params = trainable_parameters(state);
    for (auto& [_, p] : params) p.zero_grad();
    Graph g;
    Tensor total;
    for (std::size_t z = 0; z < s.gt.depth(); ++z) {
        Tensor fused = fuse_slice(g, state.model.fusion, image_tensor(extract_view(cor, Plane::axial, z).image),
                                  image_tensor(extract_view(sag, Plane::axial, z).image));
        Tensor loss = ops::l1_loss(g, fused, image_tensor(extract_view(s.gt, Plane::axial, z).image));
        total = total.defined() ? ops::add(g, total, loss) : loss;
    }
    total = ops::scale(g, total, 1.0 / static_cast<double>(s.gt.depth()));
    StepMetrics m{state.step, 2, total.item(), Plane::axial, refs.indices};
    if (total.requires_grad()) {
        g.backward(total);
    }
    state.optimizer.step(params);
    ++state.step;
    return m;
}

void save_train_state(const fs::path& manifest, const TrainState& state) {
    ModelParams model = state.model;
    Checkpoint cp = model_checkpoint(model);
    cp.meta["config"] = config_json(state.config);
    cp.meta["config_hash"] = state.config_hash;
    cp.meta["stage"] = state.stage;
    cp.meta["step"] = state.step;
    state.optimizer.save(cp);
    if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
    write_checkpoint(manifest, cp);
}

TrainState load_train_state(const fs::path& manifest) {
    Checkpoint cp = read_checkpoint(manifest);
    try {
        TrainState s;
        s.config = parse_config(cp.meta.at("config"));
        s.config_hash = cp.meta.at("config_hash").get<std::string>();
        s.stage = cp.meta.at("stage").get<int>();
        s.step = cp.meta.at("step").get<std::size_t>();
        s.model = model_from_checkpoint(cp);
        s.optimizer = Adam({s.config.lr});
        s.optimizer.load(cp, trainable_parameters(s));
        return s;
    } catch (const json::exception& e) {
        throw StateError("checkpoint '" + manifest.string() + "' has malformed metadata: " + e.what());
    } catch (const ConfigError& e) {
        throw StateError("checkpoint '" + manifest.string() + "' holds an invalid config: " + e.what());
    }
}

fs::path stage_checkpoint_path(const ExperimentConfig& config, int stage) {
    return fs::path(config.out_dir) / ("stage" + std::to_string(stage) + ".json");
}

fs::path metrics_path(const ExperimentConfig& config, int stage) {
    return fs::path(config.out_dir) / ("metrics_stage" + std::to_string(stage) + ".csv");
}

TrainOutcome run_training(const ExperimentConfig& config, int stage, bool resume) {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    validate_config(config);
    const std::string hash = config_hash(config);
    const fs::path ckpt = stage_checkpoint_path(config, stage);
    TrainState state;
    bool resumed = false;
    if (resume && fs::exists(ckpt)) {
        state = load_train_state(ckpt);
        if (state.config_hash != hash) {
            throw StateError("cannot resume: checkpoint config hash " + state.config_hash + " differs from " + hash);
        }
        state.config = config;
        resumed = true;
    } else if (stage == 1) {
        state = init_train_state(config, 1);
    } else {
        const fs::path s1 = stage_checkpoint_path(config, 1);
        if (!fs::exists(s1)) throw StateError("stage 2 needs the stage-1 checkpoint '" + s1.string() + "'");
        TrainState first = load_train_state(s1);
        if (first.config_hash != hash) {
            throw StateError("stage-1 checkpoint config hash " + first.config_hash + " differs from " + hash);
        }
        state.config = config;
        state.config_hash = hash;
        state.model = first.model;
        state.optimizer = Adam({config.lr});
        state.step = 0;
        state.stage = 2;
    }

    fs::create_directories(config.out_dir);
    const fs::path csv = metrics_path(config, stage);
    const bool append = resumed && fs::exists(csv);
    std::ofstream log(csv, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write metrics '" + csv.string() + "'");
    if (!append) log << "step,stage,loss,lr,seed,config_hash\n";

    const Volume volume = training_volume(config);
    ReconstructionCache cache;
    const std::size_t budget = stage == 1 ? config.stage1_steps : config.stage2_steps;
    TrainOutcome outcome{ckpt, csv, state.step, state.step, 0.0};
    while (state.step < budget) {
        StepMetrics m = stage == 1 ? train_step_stage1(state, volume) : train_step_stage2(state, volume, cache);
        log << m.step << ',' << m.stage << ',' << fmt_double(m.loss) << ',' << fmt_double(config.lr) << ','
            << config.seed << ',' << hash << '\n';
        outcome.final_loss = m.loss;
        if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < budget) {
            log.flush();
            save_train_state(ckpt, state);
        }
    }
    log.close();
    save_train_state(ckpt, state);
    outcome.last_step = state.step;
    return outcome;
}

double evaluate_trans_loss(const ModelParams& model, const Volume& v_gt, std::size_t r, std::size_t n,
                           const NetworkOptions& options, std::size_t threads) {
    const Volume lr = downsample_depth(v_gt, r);
    ReferenceSet refs;
    if (n > 0) {
        Rng unused(0);
        refs = make_reference_set(lr, sample_reference_indices(lr.depth(), n, ReferenceMode::uniform, unused));
    }
    Volume cor = reconstruct_view(lr, Plane::coronal, refs, r, model.unet, options, threads);
    Volume sag = reconstruct_view(lr, Plane::sagittal, refs, r, model.unet, options, threads);
    return loss_trans(v_gt, cor, sag);
}

}  // namespace acvtt
