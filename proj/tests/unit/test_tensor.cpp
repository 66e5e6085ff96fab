#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "acvtt/errors.hpp"
#include "acvtt/grad_check.hpp"
#include "acvtt/ops.hpp"
#include "test_util.hpp"

using namespace acvtt;
using acvtt::testing::max_abs_diff;
using acvtt::testing::probe_weights;
using acvtt::testing::random_tensor;

namespace {

// Weighted sum reduction used to turn tensor-valued ops into scalars.
Tensor reduce(Graph& g, const Tensor& y, std::uint64_t seed = 99) {
    return ops::sum(g, ops::mul(g, y, probe_weights(y.shape(), seed)));
}

constexpr double kPrimitiveTol = 1e-4;

}  // namespace

TEST(Tensor, ShapeInvariant) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    EXPECT_THROW(Tensor({0, 3}, {}), DimensionError);
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.at({1, 2}), 6.0);
    EXPECT_FALSE(t.has_grad());
}

TEST(Graph, BackwardRequiresScalar) {
    Graph g;
    Tensor x = random_tensor({3}, 1, -1, 1, true);
    Tensor y = ops::scale(g, x, 2.0);
    EXPECT_THROW(g.backward(y), ContractError);
    Graph off(false);
    Tensor z = ops::sum(off, x);
    EXPECT_EQ(off.size(), 0u);
    EXPECT_THROW(off.backward(z), ContractError);
}

TEST(Graph, RecordsInExecutionOrder) {
    Graph g;
    Tensor x = random_tensor({2, 2}, 2, -1, 1, true);
    Tensor y = ops::relu(g, x);
    Tensor z = ops::sum(g, y);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_EQ(g.op_names()[0], "relu");
    EXPECT_EQ(g.op_names()[1], "sum");
    g.backward(z);
    EXPECT_TRUE(x.has_grad());
}

TEST(Graph, GradientsAccumulateAcrossUses) {
    Graph g;
    Tensor x({1}, {3.0}, true);
    Tensor y = ops::add(g, ops::mul(g, x, x), x);  // x^2 + x
    g.backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

// --- conv2d ---------------------------------------------------------------

namespace {

// Brute-force sliding window over an explicitly zero-padded copy of the input.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = w.dim(0), k = w.dim(2);
    const std::size_t PH = H + 2 * pad, PW = W + 2 * pad, OH = PH - k + 1, OW = PW - k + 1;
    std::vector<double> padded(B * C * PH * PW, 0.0);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx)
                    padded[((n * C + c) * PH + y + pad) * PW + xx + pad] = x.at({n, c, y, xx});
    std::vector<double> out;
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t y = 0; y < OH; ++y)
                for (std::size_t xx = 0; xx < OW; ++xx) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::size_t py = y + ky, px = xx + kx;
                                const bool inside = py >= pad && py < H + pad && px >= pad && px < W + pad;
                                if (inside) acc += w.at({o, c, ky, kx}) * padded[((n * C + c) * PH + py) * PW + px];
                            }
                    out.push_back(acc);
                }
    return out;
}

}  // namespace

TEST(Conv2d, ZeroInputGivesBias) {
    Graph g(false);
    Tensor x = Tensor::zeros({1, 2, 5, 5});
    Tensor w = random_tensor({3, 2, 3, 3}, 3);
    Tensor b({3}, {0.5, -1.0, 2.0});
    Tensor y = ops::conv2d(g, x, w, b, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 3, 5, 5}));
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y[o * 25 + i], b[o]);
}

TEST(Conv2d, IdentityPointwise) {
    Graph g(false);
    Tensor x = random_tensor({2, 3, 4, 5}, 4);
    std::vector<double> eye(9, 0.0);
    for (std::size_t c = 0; c < 3; ++c) eye[c * 3 + c] = 1.0;
    Tensor y = ops::conv2d(g, x, Tensor({3, 3, 1, 1}, eye), Tensor::zeros({3}), 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, RampMatchesSlidingWindowOracle) {
    Graph g(false);
    std::vector<double> ramp(16);
    for (std::size_t i = 0; i < 16; ++i) ramp[i] = static_cast<double>(i);
    Tensor x({1, 1, 4, 4}, ramp);
    Tensor w = random_tensor({1, 1, 3, 3}, 5);
    Tensor b({1}, {0.25});
    for (std::size_t pad : {0u, 1u}) {
        for (auto kernel : {ops::ConvKernel::direct, ops::ConvKernel::blocked}) {
            Tensor y = ops::conv2d(g, x, w, b, pad, kernel);
            EXPECT_EQ(y.dim(2), 4 + 2 * pad - 2);
            const auto oracle = conv_oracle(x, w, b, pad);
            ASSERT_EQ(oracle.size(), y.numel());
            for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_EQ(y[i], oracle[i]);
        }
    }
}

TEST(Conv2d, BlockedKernelBitIdenticalToDirect) {
    Graph g(false);
    Tensor x = random_tensor({2, 3, 9, 7}, 6);
    Tensor w = random_tensor({4, 3, 5, 5}, 7);
    Tensor b = random_tensor({4}, 8);
    for (std::size_t pad : {0u, 1u, 2u}) {
        Tensor a = ops::conv2d(g, x, w, b, pad, ops::ConvKernel::direct);
        Tensor c = ops::conv2d(g, x, w, b, pad, ops::ConvKernel::blocked);
        ASSERT_EQ(a.shape(), c.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], c[i]);
    }
}

TEST(Conv2d, ChannelMismatchThrows) {
    Graph g(false);
    EXPECT_THROW(ops::conv2d(g, Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), 1),
                 DimensionError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    const Tensor x = random_tensor({1, 2, 4, 4}, 10);
    const Tensor w = random_tensor({2, 2, 3, 3}, 11);
    const Tensor b = random_tensor({2}, 12);
    auto wrt_x = [&](Graph& g, const Tensor& v) { return reduce(g, ops::conv2d(g, v, w, b, 1)); };
    auto wrt_w = [&](Graph& g, const Tensor& v) { return reduce(g, ops::conv2d(g, x, v, b, 1)); };
    auto wrt_b = [&](Graph& g, const Tensor& v) { return reduce(g, ops::conv2d(g, x, w, v, 1)); };
    EXPECT_LT(grad_check(wrt_x, x, 1e-6).max_relative_error, kPrimitiveTol);
    EXPECT_LT(grad_check(wrt_w, w, 1e-6).max_relative_error, kPrimitiveTol);
    EXPECT_LT(grad_check(wrt_b, b, 1e-6).max_relative_error, kPrimitiveTol);
}

TEST(Conv2d, L1LossCompositeGradient) {
    const Tensor x = random_tensor({1, 1, 4, 4}, 13);
    const Tensor w = random_tensor({1, 1, 3, 3}, 14);
    const Tensor target = random_tensor({1, 1, 4, 4}, 15, 2.0, 3.0);  // keeps |y - t| away from its kink
    auto f = [&](Graph& g, const Tensor& v) {
        return ops::l1_loss(g, ops::conv2d(g, x, v, Tensor::zeros({1}), 1), target);
    };
    EXPECT_LT(grad_check(f, w, 1e-6).max_relative_error, 1e-4);
}

// --- softmax --------------------------------------------------------------

TEST(Softmax, AnalyticCases) {
    Graph g(false);
    Tensor u = ops::softmax(g, Tensor({3}, {0.7, 0.7, 0.7}), 0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(u[i], 1.0 / 3.0, 1e-15);
    Tensor t = ops::softmax(g, Tensor({2}, {0.0, std::log(2.0)}), 0);
    EXPECT_NEAR(t[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(t[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
    Graph g(false);
    Tensor x = random_tensor({5}, 16, -4.0, 4.0);
    Tensor y = ops::softmax(g, x, 0);
    long double total = 0.0L;
    for (std::size_t i = 0; i < 5; ++i) total += std::exp(static_cast<long double>(x[i]));
    for (std::size_t i = 0; i < 5; ++i) {
        const long double expect = std::exp(static_cast<long double>(x[i])) / total;
        EXPECT_LT(std::abs(static_cast<long double>(y[i]) - expect) / expect, 1e-12L);
    }
}

TEST(Softmax, StableForLargeInputsAndSumsToOne) {
    Graph g(false);
    Tensor y = ops::softmax(g, Tensor({2, 3}, {1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0}), 1);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_TRUE(std::isfinite(y[r * 3 + c]));
            EXPECT_GE(y[r * 3 + c], 0.0);
            s += y[r * 3 + c];
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    EXPECT_THROW(ops::softmax(g, Tensor({2}, {0.0, INFINITY}), 0), NumericError);
}

TEST(Softmax, SumsToOneOnRandomInputsAlongEveryAxis) {
    Graph g(false);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tensor x = random_tensor({3, 4, 5}, 100 + seed, -10.0, 10.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            Tensor y = ops::softmax(g, x, axis);
            Tensor s = ops::sum_axis(g, y, axis);
            for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-9);
            for (double v : y.values()) EXPECT_GE(v, 0.0);
        }
    }
}

TEST(Softmax, Gradient) {
    const Tensor x = random_tensor({3, 4}, 17, -2, 2);
    for (std::size_t axis : {0u, 1u}) {
        auto f = [&](Graph& g, const Tensor& v) { return reduce(g, ops::softmax(g, v, axis)); };
        EXPECT_LT(grad_check(f, x, 1e-6).max_relative_error, kPrimitiveTol);
    }
}

// --- layer_norm -----------------------------------------------------------

TEST(LayerNorm, AnalyticCases) {
    Graph g(false);
    Tensor c = ops::layer_norm(g, Tensor({4}, {2.5, 2.5, 2.5, 2.5}), 0);
    for (double v : c.values()) EXPECT_EQ(v, 0.0);
    Tensor u = ops::layer_norm(g, Tensor({2}, {-1.0, 1.0}), 0, 0.0);
    EXPECT_DOUBLE_EQ(u[0], -1.0);
    EXPECT_DOUBLE_EQ(u[1], 1.0);
    EXPECT_THROW(ops::layer_norm(g, Tensor({3, 1}, {1, 2, 3}), 1), DimensionError);
}

TEST(LayerNorm, MatchesTwoPassOracle) {
    Graph g(false);
    Tensor x = random_tensor({4, 6}, 18, -3, 3);
    Tensor y = ops::layer_norm(g, x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < 6; ++c) mu += x.at({r, c});
        mu /= 6.0;
        double var = 0.0;
        for (std::size_t c = 0; c < 6; ++c) var += (x.at({r, c}) - mu) * (x.at({r, c}) - mu);
        var /= 6.0;
        for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(y.at({r, c}), (x.at({r, c}) - mu) / std::sqrt(var + 1e-5), 1e-10);
    }
}

TEST(LayerNorm, Gradient) {
    const Tensor x = random_tensor({3, 5}, 19, -2, 2);
    for (std::size_t axis : {0u, 1u}) {
        auto f = [&](Graph& g, const Tensor& v) { return reduce(g, ops::layer_norm(g, v, axis)); };
        EXPECT_LT(grad_check(f, x, 1e-6).max_relative_error, kPrimitiveTol);
    }
}

// --- bilinear_resize ------------------------------------------------------

TEST(Bilinear, IdentityIsBitExact) {
    Graph g(false);
    Tensor x = random_tensor({2, 5, 3}, 20);
    Tensor y = ops::bilinear_resize(g, x, 5, 3);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(y[i]), std::bit_cast<std::uint64_t>(x[i]));
}

TEST(Bilinear, AlignCornersRow) {
    Graph g(false);
    Tensor y = ops::bilinear_resize(g, Tensor({1, 2}, {0.0, 1.0}), 1, 3);
    EXPECT_EQ(y[0], 0.0);
    EXPECT_EQ(y[1], 0.5);
    EXPECT_EQ(y[2], 1.0);
}

TEST(Bilinear, MatchesPerPixelOracle) {
    Graph g(false);
    Tensor x = random_tensor({4, 4}, 21);
    Tensor y = ops::bilinear_resize(g, x, 7, 7);
    for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t j = 0; j < 7; ++j) {
            const double sy = static_cast<double>(i) * 3.0 / 6.0, sx = static_cast<double>(j) * 3.0 / 6.0;
            const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(sy), 2);
            const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(sx), 2);
            const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
            const double expect = (1.0 - fy) * ((1.0 - fx) * x.at({y0, x0}) + fx * x.at({y0, x0 + 1})) +
                                  fy * ((1.0 - fx) * x.at({y0 + 1, x0}) + fx * x.at({y0 + 1, x0 + 1}));
            EXPECT_EQ(y.at({i, j}), expect);
        }
    }
}

TEST(Bilinear, Linearity) {
    Graph g(false);
    Tensor a = random_tensor({3, 5}, 22), b = random_tensor({3, 5}, 23);
    const double alpha = 0.7, beta = -1.3;
    Tensor combo = ops::add(g, ops::scale(g, a, alpha), ops::scale(g, b, beta));
    Tensor lhs = ops::bilinear_resize(g, combo, 8, 9);
    Tensor rhs = ops::add(g, ops::scale(g, ops::bilinear_resize(g, a, 8, 9), alpha),
                          ops::scale(g, ops::bilinear_resize(g, b, 8, 9), beta));
    EXPECT_LT(max_abs_diff(lhs.values(), rhs.values()), 1e-14);
}

TEST(Bilinear, Gradient) {
    const Tensor x = random_tensor({2, 3, 4}, 24);
    auto f = [&](Graph& g, const Tensor& v) { return reduce(g, ops::bilinear_resize(g, v, 6, 7)); };
    EXPECT_LT(grad_check(f, x, 1e-6).max_relative_error, kPrimitiveTol);
}

// --- avg_pool2 ------------------------------------------------------------

TEST(AvgPool, AnalyticCases) {
    Graph g(false);
    Tensor c = ops::avg_pool2(g, Tensor::filled({1, 4, 4}, 0.3));
    for (double v : c.values()) EXPECT_EQ(v, 0.3);
    Tensor w = ops::avg_pool2(g, Tensor({2, 2}, {0, 1, 2, 3}));
    EXPECT_EQ(w[0], 1.5);
    EXPECT_THROW(ops::avg_pool2(g, Tensor::zeros({3, 4})), DimensionError);
}

TEST(AvgPool, MatchesWindowOracle) {
    Graph g(false);
    Tensor x = random_tensor({8, 8}, 25);
    Tensor y = ops::avg_pool2(g, x);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            const double m = (x.at({2 * i, 2 * j}) + x.at({2 * i, 2 * j + 1}) + x.at({2 * i + 1, 2 * j}) +
                              x.at({2 * i + 1, 2 * j + 1})) /
                             4.0;
            EXPECT_EQ(y.at({i, j}), m);
        }
}

TEST(AvgPool, Gradient) {
    const Tensor x = random_tensor({2, 4, 6}, 26);
    auto f = [&](Graph& g, const Tensor& v) { return reduce(g, ops::avg_pool2(g, v)); };
    EXPECT_LT(grad_check(f, x, 1e-6).max_relative_error, kPrimitiveTol);
}

// --- elementwise, structural and loss ops ---------------------------------

TEST(L1Loss, AnalyticCases) {
    Graph g(false);
    Tensor x = random_tensor({4}, 27);
    EXPECT_EQ(ops::l1_loss(g, x, x).item(), 0.0);
    EXPECT_EQ(ops::l1_loss(g, Tensor({2}, {0, 0}), Tensor({2}, {1, 3})).item(), 2.0);
    EXPECT_THROW(ops::l1_loss(g, Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST(Relu, GradientAwayFromKink) {
    Tensor x({6}, {-0.9, -0.4, -0.2, 0.3, 0.5, 1.1});
    auto f = [](Graph& g, const Tensor& v) { return reduce(g, ops::relu(g, v)); };
    EXPECT_LT(grad_check(f, x, 1e-6).max_relative_error, kPrimitiveTol);
    Graph g;
    Tensor leaf = x.detach(true);
    g.backward(ops::sum(g, ops::relu(g, leaf)));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(leaf.grad()[i], x[i] > 0 ? 1.0 : 0.0);
}

TEST(Primitives, ElementwiseAndStructuralGradients) {
    const Tensor a = random_tensor({3, 4}, 28), b = random_tensor({3, 4}, 29);
    const Tensor m = random_tensor({4, 5}, 30);
    const Tensor wl = random_tensor({2, 4}, 31), bl = random_tensor({2}, 32);
    struct Case {
        const char* name;
        ScalarFn fn;
        Tensor at;
    };
    const std::size_t perm[] = {1, 0};
    const std::vector<Case> cases = {
        {"add", [&](Graph& g, const Tensor& v) { return reduce(g, ops::add(g, v, b)); }, a},
        {"sub", [&](Graph& g, const Tensor& v) { return reduce(g, ops::sub(g, b, v)); }, a},
        {"mul", [&](Graph& g, const Tensor& v) { return reduce(g, ops::mul(g, v, b)); }, a},
        {"scale", [&](Graph& g, const Tensor& v) { return reduce(g, ops::scale(g, v, -2.5)); }, a},
        {"matmul.a", [&](Graph& g, const Tensor& v) { return reduce(g, ops::matmul(g, v, m)); }, a},
        {"matmul.b", [&](Graph& g, const Tensor& v) { return reduce(g, ops::matmul(g, a, v)); }, m},
        {"transpose", [&](Graph& g, const Tensor& v) { return reduce(g, ops::transpose(g, v)); }, a},
        {"permute", [&](Graph& g, const Tensor& v) { return reduce(g, ops::permute(g, v, perm)); }, a},
        {"linear.x", [&](Graph& g, const Tensor& v) { return reduce(g, ops::linear(g, v, wl, bl)); }, a},
        {"linear.w", [&](Graph& g, const Tensor& v) { return reduce(g, ops::linear(g, a, v, bl)); }, wl},
        {"linear.b", [&](Graph& g, const Tensor& v) { return reduce(g, ops::linear(g, a, wl, v)); }, bl},
        {"concat", [&](Graph& g, const Tensor& v) {
             const Tensor parts[] = {v, b, v};
             return reduce(g, ops::concat(g, parts, 1));
         }, a},
        {"stack", [&](Graph& g, const Tensor& v) {
             const Tensor parts[] = {b, v};
             return reduce(g, ops::stack(g, parts));
         }, a},
        {"select", [&](Graph& g, const Tensor& v) { return reduce(g, ops::select(g, v, 1, 2)); }, a},
        {"sum_axis", [&](Graph& g, const Tensor& v) { return reduce(g, ops::sum_axis(g, v, 0)); }, a},
        {"mean", [&](Graph& g, const Tensor& v) { return ops::mean(g, ops::mul(g, v, v)); }, a},
        {"reshape", [&](Graph& g, const Tensor& v) { return reduce(g, ops::reshape(g, v, {2, 6})); }, a},
        {"l1_loss", [&](Graph& g, const Tensor& v) { return ops::l1_loss(g, v, ops::scale(g, b, 5.0)); }, a},
        {"pad_reflect", [&](Graph& g, const Tensor& v) { return reduce(g, ops::pad_reflect(g, v, 2, 1, 0, 3)); }, a},
        {"crop2d", [&](Graph& g, const Tensor& v) { return reduce(g, ops::crop2d(g, v, 1, 1, 2, 2)); }, a},
    };
    for (const auto& c : cases) {
        const auto report = grad_check(c.fn, c.at, 1e-6);
        EXPECT_LT(report.max_relative_error, kPrimitiveTol) << c.name;
    }
}

TEST(Primitives, WeightedSumGradient) {
    const Tensor i0 = random_tensor({4, 3}, 33), i1 = random_tensor({4, 3}, 34);
    const Tensor w = random_tensor({2, 4}, 35, 0, 1);
    auto wrt_item = [&](Graph& g, const Tensor& v) {
        const Tensor items[] = {v, i1};
        return reduce(g, ops::weighted_sum(g, items, w));
    };
    auto wrt_weights = [&](Graph& g, const Tensor& v) {
        const Tensor items[] = {i0, i1};
        return reduce(g, ops::weighted_sum(g, items, v));
    };
    EXPECT_LT(grad_check(wrt_item, i0, 1e-6).max_relative_error, kPrimitiveTol);
    EXPECT_LT(grad_check(wrt_weights, w, 1e-6).max_relative_error, kPrimitiveTol);
}

TEST(Primitives, PadReflectMirrorsWithoutEdgeRepeat) {
    Graph g(false);
    Tensor y = ops::pad_reflect(g, Tensor({1, 3}, {1, 2, 3}), 0, 0, 2, 2);
    const std::vector<double> expect = {3, 2, 1, 2, 3, 2, 1};
    ASSERT_EQ(y.numel(), expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_EQ(y[i], expect[i]);
}

TEST(GradCheck, LinearFunctionHasZeroError) {
    auto f = [](Graph& g, const Tensor& v) { return ops::sum(g, v); };
    const auto report = grad_check(f, random_tensor({10}, 36), 1e-4);
    EXPECT_LT(report.max_relative_error, 1e-9);
    EXPECT_EQ(report.coordinates, 10u);
}

TEST(GradCheck, Contracts) {
    auto vec = [](Graph& g, const Tensor& v) { return ops::scale(g, v, 2.0); };
    EXPECT_THROW(grad_check(vec, random_tensor({3}, 37), 1e-5), ContractError);
    auto f = [](Graph& g, const Tensor& v) { return ops::sum(g, v); };
    EXPECT_THROW(grad_check(f, random_tensor({3}, 37), 1e-2), ParameterError);
    EXPECT_THROW(grad_check(f, random_tensor({3}, 37), 1e-8), ParameterError);
}

// --- blocked attention ----------------------------------------------------

namespace {

ops::AttentionResult naive_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
    Tensor s = ops::scale(g, ops::matmul(g, q, ops::transpose(g, k)), scale);
    Tensor a = ops::softmax(g, s, 1);
    return {ops::matmul(g, a, v), ops::sum_axis(g, ops::mul(g, a, s), 1)};
}

}  // namespace

TEST(BlockedAttention, MatchesNaiveForEveryBlockSize) {
    Graph g(false);
    const Tensor q = random_tensor({7, 4}, 40, -2, 2), k = random_tensor({150, 4}, 41, -2, 2);
    const Tensor v = random_tensor({150, 3}, 42);
    const auto ref = naive_attention(g, q, k, v, 0.5);
    for (std::size_t block : {1u, 7u, 64u, 150u, 1000u}) {
        const auto got = ops::blocked_attention(g, q, k, v, 0.5, block);
        EXPECT_LT(max_abs_diff(got.output.values(), ref.output.values()), 1e-12) << block;
        EXPECT_LT(max_abs_diff(got.relation.values(), ref.relation.values()), 1e-12) << block;
    }
}

TEST(BlockedAttention, Gradients) {
    const Tensor q = random_tensor({5, 3}, 43), k = random_tensor({9, 3}, 44), v = random_tensor({9, 2}, 45);
    auto combined = [](Graph& g, const ops::AttentionResult& r) {
        return ops::add(g, reduce(g, r.output, 1), reduce(g, r.relation, 2));
    };
    auto wrt_q = [&](Graph& g, const Tensor& t) { return combined(g, ops::blocked_attention(g, t, k, v, 0.8, 4)); };
    auto wrt_k = [&](Graph& g, const Tensor& t) { return combined(g, ops::blocked_attention(g, q, t, v, 0.8, 4)); };
    auto wrt_v = [&](Graph& g, const Tensor& t) { return combined(g, ops::blocked_attention(g, q, k, t, 0.8, 4)); };
    EXPECT_LT(grad_check(wrt_q, q, 1e-6).max_relative_error, kPrimitiveTol);
    EXPECT_LT(grad_check(wrt_k, k, 1e-6).max_relative_error, kPrimitiveTol);
    EXPECT_LT(grad_check(wrt_v, v, 1e-6).max_relative_error, kPrimitiveTol);
}

TEST(Determinism, RepeatedGraphsAreBitIdentical) {
    auto run = [] {
        Graph g;
        Tensor x = random_tensor({1, 2, 6, 6}, 50, -1, 1, true);
        Tensor w = random_tensor({3, 2, 3, 3}, 51, -1, 1, true);
        Tensor y = ops::relu(g, ops::conv2d(g, x, w, Tensor::zeros({3}), 1));
        Tensor z = ops::softmax(g, ops::reshape(g, y, {3, 36}), 1);
        Tensor loss = reduce(g, ops::bilinear_resize(g, z, 5, 40));
        g.backward(loss);
        std::vector<double> out(loss.values().begin(), loss.values().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    const auto a = run(), b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
}
