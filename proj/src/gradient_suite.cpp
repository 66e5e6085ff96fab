#include "acvtt/gradient_suite.hpp"

#include <algorithm>
#include <cmath>

#include "acvtt/errors.hpp"
#include "acvtt/grad_check.hpp"
#include "acvtt/mrnla.hpp"
#include "acvtt/network.hpp"
#include "acvtt/ops.hpp"
#include "acvtt/rng.hpp"
#include "acvtt/volume.hpp"

namespace acvtt {

namespace {

constexpr double kEps = 1e-6;

class Suite {
  public:
    Suite(std::string name, double tolerance, std::vector<GradCaseResult>& out,
          const std::function<void(const GradCaseResult&)>& progress)
        : name_(std::move(name)), tolerance_(tolerance), out_(out), progress_(progress) {}

    void record(std::string name, const GradCheckReport& report) {
        GradCaseResult r{name_, std::move(name), report.max_relative_error, tolerance_, report.coordinates};
        if (progress_) progress_(r);
        out_.push_back(std::move(r));
    }

  private:
    std::string name_;
    double tolerance_;
    std::vector<GradCaseResult>& out_;
    const std::function<void(const GradCaseResult&)>& progress_;
};

Tensor random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for ops with a kink there.
Tensor away_from_zero(Rng& rng, Shape shape) {
    Tensor t = random(rng, std::move(shape));
    for (auto& v : t.mutable_values()) v = std::copysign(0.2 + 0.8 * std::abs(v), v);
    return t;
}

// Reduces an output to a scalar through fixed random weights.
struct Probe {
    Rng& rng;
    Tensor operator()(Graph& g, const Tensor& y) const {
        return ops::sum(g, ops::mul(g, y, weights(y.shape())));
    }
    Tensor weights(const Shape& shape) const {
        auto it = std::find_if(cache.begin(), cache.end(), [&](const auto& p) { return p.first == shape; });
        if (it != cache.end()) return it->second;
        cache.emplace_back(shape, random(rng, shape, 0.5, 1.5));
        return cache.back().second;
    }
    mutable std::vector<std::pair<Shape, Tensor>> cache;
};

void tensor_suite(Suite& s, Rng& rng) {
    Probe p{rng, {}};
    auto check = [&](const char* name, const ScalarFn& f, const Tensor& at) { s.record(name, grad_check(f, at, kEps)); };

    const Tensor x = random(rng, {1, 2, 5, 4}), w = random(rng, {3, 2, 3, 3}), b = random(rng, {3});
    check("conv2d.input", [&](Graph& g, const Tensor& v) { return p(g, ops::conv2d(g, v, w, b, 1)); }, x);
    check("conv2d.weight", [&](Graph& g, const Tensor& v) { return p(g, ops::conv2d(g, x, v, b, 1)); }, w);
    check("conv2d.bias", [&](Graph& g, const Tensor& v) { return p(g, ops::conv2d(g, x, w, v, 1)); }, b);
    check("conv2d.unpadded", [&](Graph& g, const Tensor& v) { return p(g, ops::conv2d(g, v, w, b, 0)); }, x);

    const Tensor a = random(rng, {3, 4}), c = random(rng, {3, 4}), m = random(rng, {4, 5});
    const Tensor wl = random(rng, {2, 4}), bl = random(rng, {2});
    check("linear.x", [&](Graph& g, const Tensor& v) { return p(g, ops::linear(g, v, wl, bl)); }, a);
    check("linear.weight", [&](Graph& g, const Tensor& v) { return p(g, ops::linear(g, a, v, bl)); }, wl);
    check("linear.bias", [&](Graph& g, const Tensor& v) { return p(g, ops::linear(g, a, wl, v)); }, bl);
    check("matmul.a", [&](Graph& g, const Tensor& v) { return p(g, ops::matmul(g, v, m)); }, a);
    check("matmul.b", [&](Graph& g, const Tensor& v) { return p(g, ops::matmul(g, a, v)); }, m);
    check("transpose", [&](Graph& g, const Tensor& v) { return p(g, ops::transpose(g, v)); }, a);
    check("add", [&](Graph& g, const Tensor& v) { return p(g, ops::add(g, v, c)); }, a);
    check("sub", [&](Graph& g, const Tensor& v) { return p(g, ops::sub(g, c, v)); }, a);
    check("mul", [&](Graph& g, const Tensor& v) { return p(g, ops::mul(g, v, c)); }, a);
    check("scale", [&](Graph& g, const Tensor& v) { return p(g, ops::scale(g, v, -1.7)); }, a);
    check("relu", [&](Graph& g, const Tensor& v) { return p(g, ops::relu(g, v)); }, away_from_zero(rng, {3, 4}));

    const Tensor sm = random(rng, {3, 4}, -2.0, 2.0);
    check("softmax.axis0", [&](Graph& g, const Tensor& v) { return p(g, ops::softmax(g, v, 0)); }, sm);
    check("softmax.axis1", [&](Graph& g, const Tensor& v) { return p(g, ops::softmax(g, v, 1)); }, sm);
    const Tensor ln = random(rng, {4, 5}, -2.0, 2.0);
    check("layer_norm", [&](Graph& g, const Tensor& v) { return p(g, ops::layer_norm(g, v, 1)); }, ln);
    check("layer_norm.axis0", [&](Graph& g, const Tensor& v) { return p(g, ops::layer_norm(g, v, 0)); }, ln);

    const Tensor img = random(rng, {2, 4, 6});
    check("bilinear_resize", [&](Graph& g, const Tensor& v) { return p(g, ops::bilinear_resize(g, v, 7, 9)); }, img);
    check("avg_pool2", [&](Graph& g, const Tensor& v) { return p(g, ops::avg_pool2(g, v)); }, img);
    check("pad_reflect", [&](Graph& g, const Tensor& v) { return p(g, ops::pad_reflect(g, v, 2, 1, 0, 3)); }, img);
    check("crop2d", [&](Graph& g, const Tensor& v) { return p(g, ops::crop2d(g, v, 1, 2, 2, 3)); }, img);

    const std::size_t order[] = {2, 0, 1};
    check("permute", [&](Graph& g, const Tensor& v) { return p(g, ops::permute(g, v, order)); }, img);
    check("reshape", [&](Graph& g, const Tensor& v) { return p(g, ops::reshape(g, v, {8, 6})); }, img);
    check("select", [&](Graph& g, const Tensor& v) { return p(g, ops::select(g, v, 1, 2)); }, img);
    check("sum_axis", [&](Graph& g, const Tensor& v) { return p(g, ops::sum_axis(g, v, 2)); }, img);
    check("mean", [&](Graph& g, const Tensor& v) { return ops::mean(g, ops::mul(g, v, v)); }, img);
    check("concat", [&](Graph& g, const Tensor& v) {
        const Tensor parts[] = {v, c, v};
        return p(g, ops::concat(g, parts, 1));
    }, a);
    check("stack", [&](Graph& g, const Tensor& v) {
        const Tensor parts[] = {c, v};
        return p(g, ops::stack(g, parts));
    }, a);
    const Tensor target = random(rng, {3, 4}, 3.0, 4.0);
    check("l1_loss", [&](Graph& g, const Tensor& v) { return ops::l1_loss(g, v, target); }, a);

    const Tensor i1 = random(rng, {3, 4}), ws = random(rng, {2, 3}, 0.0, 1.0);
    check("weighted_sum.items", [&](Graph& g, const Tensor& v) {
        const Tensor items[] = {v, i1};
        return p(g, ops::weighted_sum(g, items, ws));
    }, a);
    check("weighted_sum.weights", [&](Graph& g, const Tensor& v) {
        const Tensor items[] = {a, i1};
        return p(g, ops::weighted_sum(g, items, v));
    }, ws);

    const Tensor q = random(rng, {5, 3}), k = random(rng, {9, 3}), val = random(rng, {9, 2});
    auto attend = [&](Graph& g, const Tensor& tq, const Tensor& tk, const Tensor& tv) {
        auto r = ops::blocked_attention(g, tq, tk, tv, 0.8, 4);
        return ops::add(g, p(g, r.output), p(g, r.relation));
    };
    check("blocked_attention.q", [&](Graph& g, const Tensor& v) { return attend(g, v, k, val); }, q);
    check("blocked_attention.k", [&](Graph& g, const Tensor& v) { return attend(g, q, v, val); }, k);
    check("blocked_attention.v", [&](Graph& g, const Tensor& v) { return attend(g, q, k, v); }, val);
}

void mrnla_suite(Suite& s, Rng& rng) {
    const std::size_t C = 3;
    NlabParams params = init_nlab(C, rng);
    for (Tensor* bias : {&params.b_q, &params.b_k, &params.b_v, &params.b_out}) {
        for (auto& v : bias->mutable_values()) v = rng.uniform(-0.2, 0.2);
    }
    Tensor query = random(rng, {2, 3, C}, -1.0, 1.0, true);
    std::vector<Tensor> refs = {random(rng, {3, 2, C}, -1.0, 1.0, true), random(rng, {2, 4, C}, -1.0, 1.0, true)};
    Probe p{rng, {}};
    for (auto impl : {AttentionImpl::naive, AttentionImpl::tiled}) {
        for (auto mode : {FusionMode::relevance, FusionMode::average}) {
            const MrnlaOptions opts{mode, {impl, 2}};
            auto thunk = [&](Graph& g) { return p(g, mrnla_forward(g, query, refs, params, opts).fused); };
            const std::string tag = std::string(impl == AttentionImpl::naive ? "naive" : "tiled") +
                                    (mode == FusionMode::relevance ? ".relevance." : ".average.");
            const std::pair<const char*, Tensor*> targets[] = {
                {"query", &query}, {"ref0", &refs[0]}, {"ref1", &refs[1]}, {"w_q", &params.w_q},
                {"b_q", &params.b_q}, {"w_k", &params.w_k}, {"b_k", &params.b_k}, {"w_v", &params.w_v},
                {"b_v", &params.b_v}, {"w_out", &params.w_out}, {"b_out", &params.b_out}};
            for (const auto& [name, t] : targets) {
                s.record(tag + name, grad_check_parameter(thunk, *t, kEps, {}, 1e-8));
            }
        }
    }
}

void network_suite(Suite& s, Rng& rng) {
    ModelConfig config;
    config.widths = {4, 6, 8, 10};
    config.fusion_width = 3;
    ModelParams model = init_model(config, rng.next_u64());
    // Zero heads, output projections and biases would hide most paths from the check.
    visit_parameters(model, [&](const std::string& name, Tensor& t) {
        const bool head = name.find("head") != std::string::npos || name.find("w_out") != std::string::npos;
        const bool bias = name.find("bias") != std::string::npos || name.find(".b_") != std::string::npos;
        if (head || bias) {
            for (auto& v : t.mutable_values()) v = rng.uniform(-1.0, 1.0) * (head ? 0.1 : 0.05);
        }
    });
    std::vector<double> voxels(16 * 16 * 16);
    for (auto& v : voxels) v = rng.uniform();
    const Volume gt(16, 16, 16, std::move(voxels));
    const Volume lr = downsample_depth(gt, 5);
    const Volume up = upsample_depth_linear(lr, 5);
    const std::size_t index = rng.below(16);
    const Tensor slice = image_tensor(extract_view(up, Plane::coronal, index).image);
    const Tensor target = image_tensor(extract_view(gt, Plane::coronal, index).image);
    const Tensor images[] = {image_tensor(extract_view(lr, Plane::axial, 0).image),
                             image_tensor(extract_view(lr, Plane::axial, 2).image)};
    const Tensor cor = random(rng, {16, 16}, 0.0, 1.0), sag = random(rng, {16, 16}, 0.0, 1.0);
    const Tensor axial = random(rng, {16, 16}, 0.0, 1.0);
    auto thunk = [&](Graph& g) {
        auto refs = encode_references(g, model.unet, images);
        Tensor out = reconstruct_slice(g, model.unet, slice, refs, {});
        Tensor fused = fuse_slice(g, model.fusion, cor, sag);
        return ops::add(g, ops::l1_loss(g, out, target), ops::l1_loss(g, fused, axial));
    };
    visit_parameters(model, [&](const std::string& name, Tensor& t) {
        const auto coords = rng.sample_without_replacement(t.numel(), std::min<std::size_t>(3, t.numel()));
        // Composite gradients of order 1e-9 sit at the finite-difference noise level.
        s.record(name, grad_check_parameter(thunk, t, kEps, coords, 1e-6));
    });
}

}  // namespace

std::vector<GradCaseResult> run_gradient_suites(std::uint64_t seed, const std::vector<std::string>& suites,
                                                const std::function<void(const GradCaseResult&)>& progress) {
    for (const auto& name : suites) {
        if (name != "tensor" && name != "mrnla" && name != "network") {
            throw ParameterError("unknown gradient suite '" + name + "'");
        }
    }
    auto wanted = [&](const char* name) {
        return suites.empty() || std::find(suites.begin(), suites.end(), name) != suites.end();
    };
    std::vector<GradCaseResult> results;
    if (wanted("tensor")) {
        Suite s("tensor", kPrimitiveGradTolerance, results, progress);
        Rng rng({seed, 1});
        tensor_suite(s, rng);
    }
    if (wanted("mrnla")) {
        Suite s("mrnla", kCompositeGradTolerance, results, progress);
        Rng rng({seed, 2});
        mrnla_suite(s, rng);
    }
    if (wanted("network")) {
        Suite s("network", kCompositeGradTolerance, results, progress);
        Rng rng({seed, 3});
        network_suite(s, rng);
    }
    return results;
}

}  // namespace acvtt
