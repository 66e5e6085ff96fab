#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>

#include "acvtt/errors.hpp"
#include "acvtt/grad_check.hpp"
#include "acvtt/network.hpp"
#include "test_util.hpp"

using namespace acvtt;
using acvtt::testing::max_abs_diff;
using acvtt::testing::random_tensor;

namespace {

void randomize(Tensor& t, Rng& rng, double bound) {
    for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
}

/// Gives the zero-initialised heads, MRNLA output projections and all biases
/// random values so every path carries signal.
ModelParams lively_model(const ModelConfig& config, std::uint64_t seed) {
    ModelParams m = init_model(config, seed);
    Rng rng(seed + 1000);
    visit_parameters(m, [&](const std::string& name, Tensor& t) {
        if (name.find("head") != std::string::npos || name.find("w_out") != std::string::npos) randomize(t, rng, 0.1);
        else if (name.find("bias") != std::string::npos || name.find(".b_") != std::string::npos) randomize(t, rng, 0.05);
    });
    return m;
}

Volume random_volume(std::size_t d, std::size_t h, std::size_t w, std::uint64_t seed,
                     IntensityDomain domain = IntensityDomain::normalized) {
    Rng rng(seed);
    std::vector<double> v(d * h * w);
    for (auto& x : v) x = rng.uniform();
    return Volume(d, h, w, std::move(v), {}, domain);
}

ModelConfig small_config() {
    ModelConfig c;
    c.widths = {4, 6, 8, 10};
    c.fusion_width = 3;
    return c;
}

}  // namespace

TEST(Encode, PyramidShapes) {
    ModelParams m = init_model(ModelConfig{}, 1);
    Graph g(false);
    Pyramid p = encode(g, m.unet.core, random_tensor({1, 1, 16, 16}, 2));
    ASSERT_EQ(p.levels.size(), 4u);
    EXPECT_EQ(p.levels[0].shape(), (Shape{1, 8, 16, 16}));
    EXPECT_EQ(p.levels[1].shape(), (Shape{1, 16, 8, 8}));
    EXPECT_EQ(p.levels[2].shape(), (Shape{1, 32, 4, 4}));
    EXPECT_EQ(p.levels[3].shape(), (Shape{1, 64, 2, 2}));
    EXPECT_THROW(encode(g, m.unet.core, Tensor::zeros({1, 1, 12, 16})), DimensionError);
}

TEST(Encode, SharedWeightsGiveIdenticalPyramids) {
    ModelParams m = init_model(small_config(), 3);
    Graph g(false);
    Tensor a = random_tensor({1, 1, 16, 8}, 4);
    Tensor b = a.detach();
    Pyramid pa = encode(g, m.unet.core, a), pb = encode(g, m.unet.core, b);
    for (std::size_t l = 0; l < 4; ++l) {
        for (std::size_t i = 0; i < pa.levels[l].numel(); ++i) ASSERT_EQ(pa.levels[l][i], pb.levels[l][i]);
    }
}

TEST(Encode, ZeroInputIsTranslationInvariantInTheInterior) {
    ModelParams m = lively_model(small_config(), 5);
    Graph g(false);
    Pyramid p = encode(g, m.unet.core, Tensor::zeros({1, 1, 16, 16}));
    const Tensor& l0 = p.levels[0];
    for (std::size_t c = 0; c < l0.dim(1); ++c) {
        const double ref = l0.at({0, c, 2, 2});
        for (std::size_t y = 2; y < 14; ++y)
            for (std::size_t x = 2; x < 14; ++x) EXPECT_EQ(l0.at({0, c, y, x}), ref);
    }
}

TEST(Decode, GlobalResidualIdentityAtInit) {
    ModelParams m = init_model(small_config(), 6);
    Graph g(false);
    Tensor slice = random_tensor({24, 16}, 7, 0, 1);
    const Tensor refs_img[] = {random_tensor({16, 16}, 8, 0, 1)};
    ReferenceFeatures refs = encode_references(g, m.unet, refs_img);
    Tensor out = reconstruct_slice(g, m.unet, slice, refs, {});
    ASSERT_EQ(out.shape(), (Shape{24, 16}));
    for (std::size_t i = 0; i < slice.numel(); ++i) ASSERT_EQ(out[i], slice[i]);
}

TEST(Decode, OutputShapeWithPadding) {
    ModelParams m = lively_model(small_config(), 9);
    Graph g(false);
    const Tensor refs_img[] = {random_tensor({12, 16}, 10, 0, 1), random_tensor({12, 16}, 11, 0, 1)};
    ReferenceFeatures refs = encode_references(g, m.unet, refs_img);
    std::vector<Tensor> rel;
    Tensor out = reconstruct_slice(g, m.unet, random_tensor({21, 12}, 12, 0, 1), refs, {}, &rel);
    EXPECT_EQ(out.shape(), (Shape{21, 12}));
    ASSERT_EQ(rel.size(), 3u);
    EXPECT_EQ(rel[0].shape(), (Shape{2, 24 * 16}));
    EXPECT_EQ(rel[2].shape(), (Shape{2, 6 * 4}));
}

TEST(Decode, NoReferencesBypassesMrnla) {
    ModelParams m = lively_model(small_config(), 13);
    Graph g(false);
    Tensor slice = random_tensor({16, 8}, 14, 0, 1);
    ReferenceFeatures none = encode_references(g, m.unet, {});
    Tensor base = reconstruct_slice(g, m.unet, slice, none, {});
    Rng rng(15);
    for (auto& p : m.unet.mrnla) randomize(p.w_out, rng, 1.0);
    Tensor again = reconstruct_slice(g, m.unet, slice, none, {});
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_EQ(base[i], again[i]);
    const Tensor one[] = {random_tensor({8, 8}, 16, 0, 1)};
    Tensor with_ref = reconstruct_slice(g, m.unet, slice, encode_references(g, m.unet, one), {});
    EXPECT_GT(max_abs_diff(with_ref.values(), base.values()), 0.0);
}

TEST(Decode, FreshMrnlaIsTheIdentity) {
    ModelParams m = init_model(small_config(), 19);
    Rng rng(20);
    randomize(m.unet.core.head.weight, rng, 0.1);
    Graph g(false);
    Tensor slice = random_tensor({16, 8}, 21, 0, 1);
    Tensor base = reconstruct_slice(g, m.unet, slice, encode_references(g, m.unet, {}), {});
    const Tensor two[] = {random_tensor({8, 8}, 22, 0, 1), random_tensor({8, 8}, 23, 0, 1)};
    Tensor with_refs = reconstruct_slice(g, m.unet, slice, encode_references(g, m.unet, two), {});
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_EQ(base[i], with_refs[i]);
}

TEST(Decode, ZeroInputsAreDeterministic) {
    ModelParams m = lively_model(small_config(), 17);
    Graph g(false);
    const Tensor refs_img[] = {Tensor::zeros({8, 8})};
    auto refs = encode_references(g, m.unet, refs_img);
    Tensor a = reconstruct_slice(g, m.unet, Tensor::zeros({8, 8}), refs, {});
    Tensor b = reconstruct_slice(g, m.unet, Tensor::zeros({8, 8}), refs, {});
    for (std::size_t i = 0; i < a.numel(); ++i) {
        EXPECT_TRUE(std::isfinite(a[i]));
        EXPECT_EQ(a[i], b[i]);
    }
}

TEST(ReconstructView, IdentityAtInitForUnitRatio) {
    ModelParams m = init_model(small_config(), 18);
    Volume v = random_volume(8, 8, 16, 19);
    Rng rng(20);
    ReferenceSet refs = make_reference_set(v, sample_reference_indices(8, 2, ReferenceMode::uniform, rng));
    Volume out = reconstruct_view(v, Plane::coronal, refs, 1, m.unet, {});
    EXPECT_EQ(out, v);
}

TEST(ReconstructView, StacksPerSliceOutputs) {
    ModelParams m = lively_model(small_config(), 21);
    Volume v = random_volume(3, 8, 8, 22, IntensityDomain::raw_hu);
    ReferenceSet refs = make_reference_set(v, {0, 2});
    const std::size_t r = 4;
    Volume up = upsample_depth_linear(v, r);
    Graph g(false);
    std::vector<Tensor> imgs;
    for (const auto& s : refs.slices) imgs.push_back(image_tensor(s.image));
    auto features = encode_references(g, m.unet, imgs);
    for (Plane plane : {Plane::coronal, Plane::sagittal}) {
        Volume out = reconstruct_view(v, plane, refs, r, m.unet, {});
        EXPECT_EQ(out.depth(), 9u);
        EXPECT_EQ(out.height(), 8u);
        EXPECT_EQ(out.width(), 8u);
        for (std::size_t i = 0; i < 8; ++i) {
            Tensor expect = reconstruct_slice(g, m.unet, image_tensor(extract_view(up, plane, i).image), features, {});
            EXPECT_EQ(extract_view(out, plane, i).image, tensor_image(expect));
        }
    }
}

TEST(ReconstructView, ThreadCountDoesNotChangeResult) {
    ModelParams m = lively_model(small_config(), 23);
    Volume v = random_volume(3, 8, 16, 24);
    ReferenceSet refs = make_reference_set(v, {0, 1, 2});
    RelevanceTrace t1, t3;
    Volume a = reconstruct_view(v, Plane::sagittal, refs, 3, m.unet, {}, 1, &t1);
    Volume b = reconstruct_view(v, Plane::sagittal, refs, 3, m.unet, {}, 3, &t3);
    EXPECT_EQ(a, b);
    ASSERT_EQ(t1.maps.size(), 3u);
    EXPECT_EQ(t1.maps[0].size(), 16u);
    EXPECT_EQ(t1.query_shapes[0], (std::pair<std::size_t, std::size_t>{8, 8}));
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(t1.maps[1][i].values()[3], t3.maps[1][i].values()[3]);
}

TEST(ResidualFuse, ZeroPhiAverages) {
    ModelParams m = init_model(small_config(), 25);
    Volume a = random_volume(3, 4, 6, 26), b = random_volume(3, 4, 6, 27);
    Volume out = residual_fuse(a, b, m.fusion);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(out.voxels()[i], (a.voxels()[i] + b.voxels()[i]) * 0.5);
    EXPECT_EQ(residual_fuse(a, a, m.fusion), a);
    EXPECT_THROW(residual_fuse(a, random_volume(3, 4, 5, 28), m.fusion), DimensionError);
}

TEST(ResidualFuse, LinearPhiMatchesPerSliceConvolution) {
    ModelConfig c = small_config();
    c.fusion_depth = 0;
    ModelParams m = lively_model(c, 29);
    const Tensor& w = m.fusion.core.head.weight;
    const Tensor& bias = m.fusion.core.head.bias;
    ASSERT_EQ(w.shape(), (Shape{1, 2, 3, 3}));
    Volume a = random_volume(3, 5, 4, 30, IntensityDomain::raw_hu), b = random_volume(3, 5, 4, 31, IntensityDomain::raw_hu);
    Volume out = residual_fuse(a, b, m.fusion);
    for (std::size_t z = 0; z < 3; ++z)
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 4; ++x) {
                double acc = bias[0];
                for (std::size_t ci = 0; ci < 2; ++ci) {
                    const Volume& src = ci == 0 ? a : b;
                    for (std::size_t ky = 0; ky < 3; ++ky)
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            const long yy = static_cast<long>(y + ky) - 1, xx = static_cast<long>(x + kx) - 1;
                            if (yy < 0 || xx < 0 || yy >= 5 || xx >= 4) continue;
                            acc += w.at({0, ci, ky, kx}) * src.at(z, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                        }
                }
                EXPECT_EQ(out.at(z, y, x), (a.at(z, y, x) + b.at(z, y, x)) * 0.5 + acc);
            }
}

TEST(ResidualFuse, LinearInInputsWhenPhiIsLinear) {
    ModelConfig c = small_config();
    c.fusion_depth = 0;
    ModelParams m = lively_model(c, 32);
    m.fusion.core.head.bias.mutable_values()[0] = 0.0;
    auto vol = [](std::uint64_t s) { return random_volume(2, 4, 4, s, IntensityDomain::raw_hu); };
    Volume a1 = vol(33), a2 = vol(34), b1 = vol(35), b2 = vol(36);
    auto combo = [](const Volume& x, const Volume& y, double p, double q) {
        std::vector<double> v(x.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = p * x.voxels()[i] + q * y.voxels()[i];
        return Volume(x.depth(), x.height(), x.width(), v, {}, IntensityDomain::raw_hu);
    };
    Volume lhs = residual_fuse(combo(a1, a2, 0.3, -1.7), combo(b1, b2, 0.3, -1.7), m.fusion);
    Volume rhs = combo(residual_fuse(a1, b1, m.fusion), residual_fuse(a2, b2, m.fusion), 0.3, -1.7);
    EXPECT_LT(max_abs_diff(lhs.voxels(), rhs.voxels()), 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto dir = std::filesystem::temp_directory_path() / "acvtt_test_ckpt";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    ModelParams m = lively_model(small_config(), 37);
    Checkpoint cp = model_checkpoint(m);
    cp.meta["note"] = "x";
    write_checkpoint(dir / "model.json", cp);
    Checkpoint back = read_checkpoint(dir / "model.json");
    EXPECT_EQ(back.meta["note"], "x");
    ModelParams restored = model_from_checkpoint(back);
    auto before = named_parameters(m), after = named_parameters(restored);
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
        EXPECT_EQ(before[i].first, after[i].first);
        ASSERT_EQ(before[i].second.shape(), after[i].second.shape());
        for (std::size_t k = 0; k < before[i].second.numel(); ++k) ASSERT_EQ(before[i].second[k], after[i].second[k]);
    }
    EXPECT_THROW(read_checkpoint(dir / "missing.json"), StateError);
}

TEST(Network, EndToEndGradientsPerParameterGroup) {
    // Desk instance: 16x16x16 volume, r = 5, two references, coronal slice loss
    // plus a fusion loss on one axial slice.
    ModelConfig c;
    c.widths = {4, 6, 8, 10};
    c.fusion_width = 3;
    ModelParams m = lively_model(c, 38);
    Volume gt = random_volume(16, 16, 16, 39);
    Volume lr = downsample_depth(gt, 5);
    Volume up = upsample_depth_linear(lr, 5);
    Tensor slice = image_tensor(extract_view(up, Plane::coronal, 7).image);
    Tensor target = image_tensor(extract_view(gt, Plane::coronal, 7).image);
    const Tensor imgs[] = {image_tensor(extract_view(lr, Plane::axial, 0).image),
                           image_tensor(extract_view(lr, Plane::axial, 2).image)};
    Tensor cor = random_tensor({16, 16}, 40, 0, 1), sag = random_tensor({16, 16}, 41, 0, 1);
    Tensor axial_gt = random_tensor({16, 16}, 42, 0, 1);
    auto thunk = [&](Graph& g) {
        auto refs = encode_references(g, m.unet, imgs);
        Tensor out = reconstruct_slice(g, m.unet, slice, refs, {});
        Tensor fused = fuse_slice(g, m.fusion, cor, sag);
        return ops::add(g, ops::l1_loss(g, out, target), ops::l1_loss(g, fused, axial_gt));
    };
    const auto start = std::chrono::steady_clock::now();
    Rng pick(43);
    visit_parameters(m, [&](const std::string& name, Tensor& t) {
        std::vector<std::size_t> coords = pick.sample_without_replacement(t.numel(), std::min<std::size_t>(3, t.numel()));
        auto report = grad_check_parameter(thunk, t, 1e-6, coords, 1e-6);
        EXPECT_LT(report.max_relative_error, 1e-3)
            << name << " index " << report.worst_index << " analytic " << report.worst_analytic << " numeric "
            << report.worst_numeric;
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_LT(secs, 60.0);
}
