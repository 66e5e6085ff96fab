#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "acvtt/binary_io.hpp"
#include "acvtt/errors.hpp"
#include "acvtt/training.hpp"

using namespace acvtt;
namespace fs = std::filesystem;

namespace {

Volume dyadic_volume(std::size_t d, std::size_t h, std::size_t w, std::uint64_t seed, double offset = 0.0) {
    Rng rng(seed);
    std::vector<double> v(d * h * w);
    for (auto& x : v) x = static_cast<double>(rng.below(9)) / 8.0 + offset;
    return Volume(d, h, w, std::move(v), {}, IntensityDomain::raw_hu);
}

Volume shifted(const Volume& v, double delta) {
    std::vector<double> out(v.voxels().begin(), v.voxels().end());
    for (auto& x : out) x += delta;
    return Volume(v.depth(), v.height(), v.width(), std::move(out), v.spacing(), IntensityDomain::raw_hu);
}

ExperimentConfig tiny_config(const std::string& name) {
    ExperimentConfig c;
    c.r = 3;
    c.n_refs = 2;
    c.crop = {10, 8, 8};
    c.base_width = 2;
    c.fusion_width = 2;
    c.lr = 1e-3;
    c.phantom.dims = {13, 16, 8};
    c.slices_per_step = 2;
    c.stage1_steps = 4;
    c.stage2_steps = 3;
    c.out_dir = (fs::temp_directory_path() / ("acvtt_train_" + name)).string();
    fs::remove_all(c.out_dir);
    return c;
}

std::vector<std::vector<double>> snapshot(ModelParams& m) {
    std::vector<std::vector<double>> out;
    for (auto& [_, t] : named_parameters(m)) out.emplace_back(t.values().begin(), t.values().end());
    return out;
}

}  // namespace

TEST(Losses, TransExamples) {
    Volume gt = dyadic_volume(3, 4, 4, 1);
    EXPECT_EQ(loss_trans(gt, gt, gt), 0.0);
    EXPECT_EQ(loss_trans(gt, shifted(gt, 1.0), gt), 1.0);
    EXPECT_THROW(loss_trans(gt, dyadic_volume(3, 4, 5, 2), gt), DimensionError);
}

TEST(Losses, TransMatchesRecomputation) {
    Volume gt = dyadic_volume(4, 3, 5, 3), a = dyadic_volume(4, 3, 5, 4), b = dyadic_volume(4, 3, 5, 5);
    Rng rng(6);
    std::vector<double> noise(gt.size());
    for (auto& x : noise) x = rng.uniform();
    Volume c(4, 3, 5, noise, {}, IntensityDomain::raw_hu);
    auto mae = [](const Volume& x, const Volume& y) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x.voxels()[i] - y.voxels()[i]);
        return s / static_cast<double>(x.size());
    };
    EXPECT_EQ(loss_trans(gt, a, c), mae(gt, a) + mae(gt, c));
    EXPECT_EQ(loss_fuse(gt, b), mae(gt, b));
}

TEST(Losses, FuseExamples) {
    Volume gt = dyadic_volume(3, 4, 4, 7);
    EXPECT_EQ(loss_fuse(gt, gt), 0.0);
    EXPECT_EQ(loss_fuse(gt, shifted(gt, 0.25)), 0.25);
    Graph g(false);
    Volume other = dyadic_volume(3, 4, 4, 8);
    Tensor ta({gt.size()}, {gt.voxels().begin(), gt.voxels().end()});
    Tensor tb({gt.size()}, {other.voxels().begin(), other.voxels().end()});
    EXPECT_EQ(loss_fuse(gt, other), ops::l1_loss(g, ta, tb).item());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Adam adam({1e-2});
    std::vector<std::pair<std::string, Tensor>> params = {{"p", Tensor({3}, {0.5, -1.0, 2.0}, true)}};
    params[0].second.grad_buffer();
    for (int i = 0; i < 5; ++i) adam.step(params);
    EXPECT_EQ(params[0].second[0], 0.5);
    EXPECT_EQ(params[0].second[1], -1.0);
    EXPECT_EQ(params[0].second[2], 2.0);
}

TEST(Adam, ConstantGradientMatchesRecurrence) {
    const double g = 0.37, lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Adam adam({lr, b1, b2, eps});
    std::vector<std::pair<std::string, Tensor>> params = {{"w", Tensor({1}, {1.5}, true)}};
    double theta = 1.5, m = 0.0, v = 0.0;
    for (int t = 1; t <= 50; ++t) {
        params[0].second.zero_grad();
        params[0].second.grad_buffer()[0] = g;
        adam.step(params);
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        theta -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
        ASSERT_EQ(params[0].second[0], theta) << t;
        // Closed form: with constant g the bias-corrected step is lr * g / (|g| + eps).
        EXPECT_NEAR(params[0].second[0], 1.5 - t * lr * g / (g + eps), 1e-12);
    }
}

TEST(Config, DefaultsAndValidation) {
    ExperimentConfig c = parse_config(nlohmann::json::object());
    EXPECT_EQ(c.lr, 1e-4);
    EXPECT_EQ(c.r, 5u);
    EXPECT_EQ(c.n_refs, 3u);
    EXPECT_EQ(c.crop, (std::array<std::size_t, 3>{16, 16, 16}));
    EXPECT_THROW(parse_config({{"bogus", 1}}), ConfigError);
    EXPECT_THROW(parse_config({{"crop", {15, 16, 16}}}), ConfigError);
    EXPECT_THROW(parse_config({{"crop", {16, 12, 16}}}), ConfigError);
    EXPECT_THROW(parse_config({{"N", 5}}), ConfigError);
    EXPECT_THROW(parse_config({{"r", "five"}}), ConfigError);
    ExperimentConfig back = parse_config(config_json(c));
    EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, HashCoversNumericsOnly) {
    ExperimentConfig a;
    ExperimentConfig b = a;
    b.out_dir = "elsewhere";
    b.threads = 4;
    b.stage1_steps = 999;
    b.checkpoint_every = 3;
    EXPECT_EQ(config_hash(a), config_hash(b));
    for (auto mutate : std::vector<std::function<void(ExperimentConfig&)>>{
             [](ExperimentConfig& c) { c.lr = 2e-4; }, [](ExperimentConfig& c) { c.seed = 1; },
             [](ExperimentConfig& c) { c.n_refs = 2; }, [](ExperimentConfig& c) { c.relevance_fusion = false; },
             [](ExperimentConfig& c) { c.phantom.seed = 8; }}) {
        ExperimentConfig m = a;
        mutate(m);
        EXPECT_NE(config_hash(m), config_hash(a));
    }
    EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Stage1, EqualSeedsGiveIdenticalTrajectories) {
    ExperimentConfig c = tiny_config("det");
    Volume v = training_volume(c);
    TrainState a = init_train_state(c, 1), b = init_train_state(c, 1);
    for (int i = 0; i < 3; ++i) {
        auto ma = train_step_stage1(a, v);
        auto mb = train_step_stage1(b, v);
        EXPECT_EQ(ma.loss, mb.loss);
        EXPECT_EQ(ma.references, mb.references);
    }
    EXPECT_EQ(snapshot(a.model), snapshot(b.model));
    EXPECT_EQ(a.step, 3u);
}

TEST(Stage1, ZeroLearningRateIsANullUpdate) {
    ExperimentConfig c = tiny_config("lr0");
    c.lr = 0.0;
    Volume v = training_volume(c);
    TrainState s = init_train_state(c, 1);
    const auto before = snapshot(s.model);
    s.step = 5;
    const double first = train_step_stage1(s, v).loss;
    EXPECT_EQ(snapshot(s.model), before);
    s.step = 5;
    EXPECT_EQ(train_step_stage1(s, v).loss, first);
}

TEST(Stage1, SamplesRequestedSlicesAndReferences) {
    ExperimentConfig c = tiny_config("sampling");
    Volume v = training_volume(c);
    TrainState s = init_train_state(c, 1);
    for (int i = 0; i < 5; ++i) {
        auto m = train_step_stage1(s, v);
        EXPECT_EQ(m.references.size(), 2u);
        EXPECT_TRUE(m.plane == Plane::coronal || m.plane == Plane::sagittal);
        EXPECT_TRUE(std::isfinite(m.loss));
    }
    EXPECT_THROW(train_step_stage1(s, generate_phantom(PhantomKind::bands, 8, 8, 8, 1)), ConfigError);
}

TEST(Stage2, ZeroPhiStartsAtTheAverageLossAndFreezesStageOne) {
    ExperimentConfig c = tiny_config("stage2");
    c.crop = {13, 16, 8};
    Volume v = training_volume(c);
    TrainState s = init_train_state(c, 1);
    for (int i = 0; i < 2; ++i) train_step_stage1(s, v);
    s.stage = 2;
    s.step = 0;
    s.optimizer = Adam({c.lr});
    const auto frozen_before = snapshot(s.model);
    ReconstructionCache cache;
    auto first = train_step_stage2(s, v, cache);
    // With the full volume as the crop, the offset is fixed; refs drawn per step.
    Volume lr = downsample_depth(v, c.r);
    ReferenceSet refs = make_reference_set(lr, first.references);
    auto [cor, sag] = cache.get(s, lr, {0, 0, 0}, refs);
    std::vector<double> avg(cor.size());
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = (cor.voxels()[i] + sag.voxels()[i]) * 0.5;
    EXPECT_NEAR(first.loss, loss_fuse(v, Volume(v.depth(), v.height(), v.width(), avg)), 1e-14);

    for (int i = 0; i < 4; ++i) train_step_stage2(s, v, cache);
    auto after = named_parameters(s.model);
    for (std::size_t k = 0; k < after.size(); ++k) {
        if (after[k].first.rfind("unet/", 0) != 0) continue;
        const auto& t = after[k].second;
        ASSERT_EQ(std::vector<double>(t.values().begin(), t.values().end()), frozen_before[k]) << after[k].first;
    }
    EXPECT_LE(cache.size(), 1u + 4u);
}

TEST(TrainState, CheckpointResumeIsBitIdentical) {
    ExperimentConfig c = tiny_config("resume_state");
    Volume v = training_volume(c);
    TrainState straight = init_train_state(c, 1);
    for (int i = 0; i < 4; ++i) train_step_stage1(straight, v);

    TrainState part = init_train_state(c, 1);
    for (int i = 0; i < 2; ++i) train_step_stage1(part, v);
    fs::create_directories(c.out_dir);
    save_train_state(fs::path(c.out_dir) / "mid.json", part);
    TrainState resumed = load_train_state(fs::path(c.out_dir) / "mid.json");
    EXPECT_EQ(resumed.step, 2u);
    EXPECT_EQ(resumed.config_hash, part.config_hash);
    for (int i = 0; i < 2; ++i) train_step_stage1(resumed, v);
    EXPECT_EQ(snapshot(resumed.model), snapshot(straight.model));
    EXPECT_EQ(resumed.optimizer.moments(), straight.optimizer.moments());
}

TEST(RunTraining, StageTwoRequiresStageOne) {
    ExperimentConfig c = tiny_config("needs_stage1");
    EXPECT_THROW(run_training(c, 2, false), StateError);
}

TEST(RunTraining, ResumeContinuesWithoutGapsAndMatchesStraightRun) {
    ExperimentConfig c = tiny_config("resume_run");
    c.stage1_steps = 2;
    run_training(c, 1, false);
    c.stage1_steps = 4;
    auto out = run_training(c, 1, true);
    EXPECT_EQ(out.first_step, 2u);
    EXPECT_EQ(out.last_step, 4u);
    std::ifstream in(out.metrics);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "step,stage,loss,lr,seed,config_hash");
    std::size_t expected = 0;
    while (std::getline(in, line)) {
        EXPECT_EQ(line.substr(0, line.find(',')), std::to_string(expected));
        EXPECT_NE(line.find(config_hash(c)), std::string::npos);
        ++expected;
    }
    EXPECT_EQ(expected, 4u);

    ExperimentConfig d = tiny_config("straight_run");
    d.stage1_steps = 4;
    run_training(d, 1, false);
    EXPECT_EQ(fnv1a_hex_file(fs::path(d.out_dir) / "stage1.json.bin"), fnv1a_hex_file(fs::path(c.out_dir) / "stage1.json.bin"));
    EXPECT_EQ(read_text(metrics_path(d, 1)), read_text(metrics_path(c, 1)));

    run_training(c, 2, false);
    EXPECT_TRUE(fs::exists(stage_checkpoint_path(c, 2)));
}

TEST(RunTraining, ResumeRejectsForeignCheckpoint) {
    ExperimentConfig c = tiny_config("foreign");
    c.stage1_steps = 1;
    run_training(c, 1, false);
    c.seed = 99;
    EXPECT_THROW(run_training(c, 1, true), StateError);
}
