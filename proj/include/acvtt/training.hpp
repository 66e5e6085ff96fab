#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "acvtt/network.hpp"
#include "acvtt/volume.hpp"

namespace acvtt {

struct PhantomSpec {
    PhantomKind kind = PhantomKind::spheres;
    std::array<std::size_t, 3> dims = {16, 16, 16};
    std::uint64_t seed = 7;
};

struct ExperimentConfig {
    std::size_t r = 5;
    std::size_t n_refs = 3;
    std::array<std::size_t, 3> crop = {16, 16, 16};  // depth, height, width
    std::size_t base_width = 8;
    double lr = 1e-4;
    std::size_t stage1_steps = 200;
    std::size_t stage2_steps = 100;
    std::uint64_t seed = 0;
    bool relevance_fusion = true;
    PhantomSpec phantom;
    std::string input;  // optional AVOL training volume; overrides the phantom
    std::size_t slices_per_step = 4;
    std::size_t fusion_depth = 1;
    std::size_t fusion_width = 8;
    std::string out_dir = "run";
    std::size_t threads = 1;
    std::size_t checkpoint_every = 0;  // 0: only at the end of a run

    ModelConfig model_config() const;
    NetworkOptions network_options() const;
};

/// Parses the JSON config document; unknown keys and invalid values raise ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json config_json(const ExperimentConfig& config);
/// Throws ConfigError unless crop, r, N and widths are mutually consistent.
void validate_config(const ExperimentConfig& config);
/// Fingerprint of every setting that influences numerics (not paths, thread
/// counts or step budgets). The input volume enters through its content hash.
std::string config_hash(const ExperimentConfig& config);

/// The dense ground-truth training volume (phantom or loaded input).
Volume training_volume(const ExperimentConfig& config);

/// L1(V, cor) + L1(V, sag).
double loss_trans(const Volume& v_gt, const Volume& v_cor, const Volume& v_sag);
double loss_fuse(const Volume& v_gt, const Volume& v_fused);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam over named tensors; moments are created on first use.
class Adam {
  public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    const AdamConfig& config() const noexcept { return config_; }
    std::size_t steps() const noexcept { return t_; }

    /// One update of every tensor from its accumulated gradient (missing gradient = zero).
    void step(std::vector<std::pair<std::string, Tensor>>& params);

    void save(Checkpoint& cp) const;
    void load(const Checkpoint& cp, const std::vector<std::pair<std::string, Tensor>>& params);

    const std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>& moments() const noexcept {
        return moments_;
    }

  private:
    AdamConfig config_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct TrainState {
    ExperimentConfig config;
    std::string config_hash;
    ModelParams model;
    Adam optimizer;
    std::size_t step = 0;
    int stage = 1;
};

TrainState init_train_state(const ExperimentConfig& config, int stage);

/// Parameters updated in `stage`: "unet/..." in stage 1, "fusion/..." in stage 2.
std::vector<std::pair<std::string, Tensor>> trainable_parameters(TrainState& state);

struct StepMetrics {
    std::size_t step = 0;
    int stage = 1;
    double loss = 0.0;
    Plane plane = Plane::coronal;
    std::vector<std::size_t> references;
};

/// Random crop, decimation, random view, random target slices and references;
/// L1 over the sampled view's slices; one Adam update of the U-Net.
StepMetrics train_step_stage1(TrainState& state, const Volume& volume);

/// Stage-1 reconstructions are memoised per (crop offset, references) since
/// the reconstruction weights are frozen.
class ReconstructionCache {
  public:
    std::pair<Volume, Volume> get(const TrainState& state, const Volume& lr, std::array<std::size_t, 3> offset,
                                  const ReferenceSet& refs);
    std::size_t size() const noexcept { return entries_.size(); }

  private:
    std::map<std::vector<std::size_t>, std::pair<Volume, Volume>> entries_;
};

/// L_fuse over the whole crop with frozen stage-1 weights; updates the fusion network only.
StepMetrics train_step_stage2(TrainState& state, const Volume& volume, ReconstructionCache& cache);

/// Checkpoint: model parameters, Adam moments, step, stage and config hash.
void save_train_state(const std::filesystem::path& manifest, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& manifest);

std::filesystem::path stage_checkpoint_path(const ExperimentConfig& config, int stage);
std::filesystem::path metrics_path(const ExperimentConfig& config, int stage);

struct TrainOutcome {
    std::filesystem::path checkpoint;
    std::filesystem::path metrics;
    std::size_t first_step = 0;
    std::size_t last_step = 0;  // exclusive
    double final_loss = 0.0;
};

/// Runs stage 1 or 2 up to the configured step budget. Stage 2 starts from the
/// stage-1 checkpoint (StateError when absent). With `resume`, continues from
/// the stage's own checkpoint, whose config hash must match.
TrainOutcome run_training(const ExperimentConfig& config, int stage, bool resume);

/// L_trans of the full crop-free volume with uniform references (a
/// deterministic training-set score).
double evaluate_trans_loss(const ModelParams& model, const Volume& v_gt, std::size_t r, std::size_t n,
                           const NetworkOptions& options, std::size_t threads = 1);

}  // namespace acvtt
