#include "acvtt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "acvtt/errors.hpp"

namespace acvtt::ops {
namespace {

bool tracks(const Graph& g, std::initializer_list<const Tensor*> inputs) {
    if (!g.recording()) return false;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

bool tracks(const Graph& g, std::span<const Tensor> inputs) {
    if (!g.recording()) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_to_string(t.shape()));
    }
}

void require_axis(const Tensor& t, std::size_t axis, const char* op) {
    if (axis >= t.rank()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                             shape_to_string(t.shape()));
    }
}

// outer x n x inner decomposition around one axis.
struct AxisView {
    std::size_t outer = 1;
    std::size_t n = 1;
    std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

// Leading extent x (H, W) decomposition of the last two axes.
struct PlaneView {
    std::size_t lead = 1;
    std::size_t h = 1;
    std::size_t w = 1;
};

PlaneView plane_view(const Tensor& x, const char* op) {
    if (x.rank() < 2) throw DimensionError(std::string(op) + ": needs at least two axes");
    const auto& s = x.shape();
    PlaneView v;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) v.lead *= s[i];
    v.h = s[s.size() - 2];
    v.w = s[s.size() - 1];
    return v;
}

Shape with_plane(const Shape& s, std::size_t h, std::size_t w) {
    Shape out = s;
    out[out.size() - 2] = h;
    out[out.size() - 1] = w;
    return out;
}

// --- conv2d kernels -------------------------------------------------------

struct ConvDims {
    std::size_t batch, cin, h, w, cout, k, pad, oh, ow;
};

void conv_forward_direct(const ConvDims& d, const double* in, const double* wt, const double* bias, double* out) {
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            for (std::size_t y = 0; y < d.oh; ++y) {
                for (std::size_t x = 0; x < d.ow; ++x) {
                    double acc = bias[co];
                    for (std::size_t ci = 0; ci < d.cin; ++ci) {
                        const double* plane = in + (b * d.cin + ci) * d.h * d.w;
                        const double* kern = wt + (co * d.cin + ci) * d.k * d.k;
                        for (std::size_t ky = 0; ky < d.k; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(d.pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                            for (std::size_t kx = 0; kx < d.k; ++kx) {
                                const auto ix =
                                    static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(d.pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                                acc += kern[ky * d.k + kx] * plane[iy * d.w + ix];
                            }
                        }
                    }
                    out[((b * d.cout + co) * d.oh + y) * d.ow + x] = acc;
                }
            }
        }
    }
}

// Valid output range [lo, hi) along one axis for kernel tap `t`.
inline void tap_range(std::size_t t, std::size_t pad, std::size_t in_extent, std::size_t out_extent,
                      std::size_t& lo, std::size_t& hi) {
    // out index o reads input o + t - pad, which must lie in [0, in_extent).
    lo = pad > t ? pad - t : 0;
    const std::size_t limit = in_extent + pad - t;  // o < limit
    hi = std::min(out_extent, limit);
    if (hi < lo) hi = lo;
}

// Each output pixel still receives its (ci, ky, kx) contributions in the same
// order as conv_forward_direct, so the two kernels agree bit for bit.
void conv_forward_blocked(const ConvDims& d, const double* in, const double* wt, const double* bias, double* out) {
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            double* oplane = out + (b * d.cout + co) * d.oh * d.ow;
            std::fill(oplane, oplane + d.oh * d.ow, bias[co]);
            for (std::size_t y = 0; y < d.oh; ++y) {
                double* orow = oplane + y * d.ow;
                for (std::size_t ci = 0; ci < d.cin; ++ci) {
                    const double* plane = in + (b * d.cin + ci) * d.h * d.w;
                    const double* kern = wt + (co * d.cin + ci) * d.k * d.k;
                    for (std::size_t ky = 0; ky < d.k; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(d.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                        const double* irow = plane + iy * d.w;
                        for (std::size_t kx = 0; kx < d.k; ++kx) {
                            std::size_t lo, hi;
                            tap_range(kx, d.pad, d.w, d.ow, lo, hi);
                            const double wv = kern[ky * d.k + kx];
                            const double* src = irow + (lo + kx - d.pad);
                            double* dst = orow + lo;
                            for (std::size_t x = 0; x < hi - lo; ++x) dst[x] += wv * src[x];
                        }
                    }
                }
            }
        }
    }
}

void conv_backward(const ConvDims& d, const double* in, const double* wt, const double* gout, double* gin,
                   double* gw, double* gb) {
    if (gb) {
        for (std::size_t b = 0; b < d.batch; ++b) {
            for (std::size_t co = 0; co < d.cout; ++co) {
                const double* g = gout + (b * d.cout + co) * d.oh * d.ow;
                double acc = 0.0;
                for (std::size_t i = 0; i < d.oh * d.ow; ++i) acc += g[i];
                gb[co] += acc;
            }
        }
    }
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            const double* gplane = gout + (b * d.cout + co) * d.oh * d.ow;
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const double* iplane = in + (b * d.cin + ci) * d.h * d.w;
                double* giplane = gin ? gin + (b * d.cin + ci) * d.h * d.w : nullptr;
                const double* kern = wt + (co * d.cin + ci) * d.k * d.k;
                double* gkern = gw ? gw + (co * d.cin + ci) * d.k * d.k : nullptr;
                for (std::size_t ky = 0; ky < d.k; ++ky) {
                    std::size_t ylo, yhi;
                    tap_range(ky, d.pad, d.h, d.oh, ylo, yhi);
                    for (std::size_t kx = 0; kx < d.k; ++kx) {
                        std::size_t xlo, xhi;
                        tap_range(kx, d.pad, d.w, d.ow, xlo, xhi);
                        const double wv = kern[ky * d.k + kx];
                        double acc = 0.0;
                        for (std::size_t y = ylo; y < yhi; ++y) {
                            const double* grow = gplane + y * d.ow;
                            const std::size_t iy = y + ky - d.pad;
                            const std::size_t span = xhi - xlo;
                            const double* gsrc = grow + xlo;
                            const std::size_t ix0 = iy * d.w + (xlo + kx - d.pad);
                            if (gkern) {
                                const double* irow = iplane + ix0;
                                for (std::size_t x = 0; x < span; ++x) acc += gsrc[x] * irow[x];
                            }
                            if (giplane) {
                                double* girow = giplane + ix0;
                                for (std::size_t x = 0; x < span; ++x) girow[x] += wv * gsrc[x];
                            }
                        }
                        if (gkern) gkern[ky * d.k + kx] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding,
              ConvKernel kernel) {
    require_rank(input, 4, "conv2d");
    require_rank(weight, 4, "conv2d");
    require_rank(bias, 1, "conv2d");
    ConvDims d{};
    d.batch = input.dim(0);
    d.cin = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.cout = weight.dim(0);
    d.k = weight.dim(2);
    d.pad = padding;
    if (weight.dim(1) != d.cin) {
        throw DimensionError("conv2d: input has " + std::to_string(d.cin) + " channels but weight expects " +
                             std::to_string(weight.dim(1)));
    }
    if (weight.dim(3) != d.k) throw DimensionError("conv2d: kernel must be square");
    if (d.k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
    if (bias.dim(0) != d.cout) throw DimensionError("conv2d: bias length does not match output channels");
    if (d.h + 2 * d.pad < d.k || d.w + 2 * d.pad < d.k) throw DimensionError("conv2d: kernel larger than padded input");
    d.oh = d.h + 2 * d.pad - d.k + 1;
    d.ow = d.w + 2 * d.pad - d.k + 1;

    std::vector<double> out(d.batch * d.cout * d.oh * d.ow);
    if (kernel == ConvKernel::direct) {
        conv_forward_direct(d, input.values().data(), weight.values().data(), bias.values().data(), out.data());
    } else {
        conv_forward_blocked(d, input.values().data(), weight.values().data(), bias.values().data(), out.data());
    }
    const bool track = tracks(g, {&input, &weight, &bias});
    Tensor result({d.batch, d.cout, d.oh, d.ow}, std::move(out), track);
    if (track) {
        g.record("conv2d", [d, input, weight, bias, result]() mutable {
            if (!result.has_grad()) return;
            double* gin = input.requires_grad() ? input.grad_buffer().data() : nullptr;
            double* gw = weight.requires_grad() ? weight.grad_buffer().data() : nullptr;
            double* gb = bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
            conv_backward(d, input.values().data(), weight.values().data(), result.grad().data(), gin, gw, gb);
        });
    }
    return result;
}

Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    require_rank(bias, 1, "linear");
    const std::size_t rows = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
    if (weight.dim(1) != cin) throw DimensionError("linear: channel mismatch between input and weight");
    if (bias.dim(0) != cout) throw DimensionError("linear: bias length does not match output channels");
    const auto xv = x.values();
    const auto wv = weight.values();
    const auto bv = bias.values();
    std::vector<double> out(rows * cout);
    for (std::size_t p = 0; p < rows; ++p) {
        const double* xr = xv.data() + p * cin;
        for (std::size_t o = 0; o < cout; ++o) {
            const double* wr = wv.data() + o * cin;
            double acc = bv[o];
            for (std::size_t c = 0; c < cin; ++c) acc += wr[c] * xr[c];
            out[p * cout + o] = acc;
        }
    }
    const bool track = tracks(g, {&x, &weight, &bias});
    Tensor result({rows, cout}, std::move(out), track);
    if (track) {
        g.record("linear", [x, weight, bias, result, rows, cin, cout]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            const auto xv = x.values();
            const auto wv = weight.values();
            if (x.requires_grad()) {
                auto gx = x.grad_buffer();
                for (std::size_t p = 0; p < rows; ++p) {
                    for (std::size_t o = 0; o < cout; ++o) {
                        const double gval = go[p * cout + o];
                        for (std::size_t c = 0; c < cin; ++c) gx[p * cin + c] += gval * wv[o * cin + c];
                    }
                }
            }
            if (weight.requires_grad()) {
                auto gw = weight.grad_buffer();
                for (std::size_t p = 0; p < rows; ++p) {
                    for (std::size_t o = 0; o < cout; ++o) {
                        const double gval = go[p * cout + o];
                        for (std::size_t c = 0; c < cin; ++c) gw[o * cin + c] += gval * xv[p * cin + c];
                    }
                }
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad_buffer();
                for (std::size_t p = 0; p < rows; ++p) {
                    for (std::size_t o = 0; o < cout; ++o) gb[o] += go[p * cout + o];
                }
            }
        });
    }
    return result;
}

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner extents differ " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()));
    }
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aval = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }
    const bool track = tracks(g, {&a, &b});
    Tensor result({m, n}, std::move(out), track);
    if (track) {
        g.record("matmul", [a, b, result, m, k, n]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            const auto av = a.values();
            const auto bv = b.values();
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bv[p * n + j];
                        ga[i * k + p] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aval = av[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aval * go[i * n + j];
                    }
                }
            }
        });
    }
    return result;
}

Tensor transpose(Graph& g, const Tensor& a) {
    const std::size_t order[] = {1, 0};
    require_rank(a, 2, "transpose");
    return permute(g, a, order);
}

Tensor softmax(Graph& g, const Tensor& x, std::size_t axis) {
    require_axis(x, axis, "softmax");
    const auto v = axis_view(x.shape(), axis);
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (double value : xv) {
        if (!std::isfinite(value)) throw NumericError("softmax: non-finite input");
    }
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t j = 0; j < v.inner; ++j) {
            const std::size_t base = o * v.n * v.inner + j;
            double mx = xv[base];
            for (std::size_t i = 1; i < v.n; ++i) mx = std::max(mx, xv[base + i * v.inner]);
            double total = 0.0;
            for (std::size_t i = 0; i < v.n; ++i) {
                const double e = std::exp(xv[base + i * v.inner] - mx);
                out[base + i * v.inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < v.n; ++i) out[base + i * v.inner] /= total;
        }
    }
    const bool track = tracks(g, {&x});
    Tensor result(x.shape(), std::move(out), track);
    if (track) {
        g.record("softmax", [x, result, v]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            const auto y = result.values();
            auto gx = x.grad_buffer();
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t j = 0; j < v.inner; ++j) {
                    const std::size_t base = o * v.n * v.inner + j;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < v.n; ++i) dot += y[base + i * v.inner] * go[base + i * v.inner];
                    for (std::size_t i = 0; i < v.n; ++i) {
                        const std::size_t at = base + i * v.inner;
                        gx[at] += y[at] * (go[at] - dot);
                    }
                }
            }
        });
    }
    return result;
}

Tensor layer_norm(Graph& g, const Tensor& x, std::size_t axis, double eps) {
    require_axis(x, axis, "layer_norm");
    if (eps < 0.0) throw ParameterError("layer_norm: eps must be non-negative");
    const auto v = axis_view(x.shape(), axis);
    if (v.n < 2) throw DimensionError("layer_norm: normalised axis must have extent >= 2");
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    std::vector<double> inv_std(v.outer * v.inner);
    const double n = static_cast<double>(v.n);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t j = 0; j < v.inner; ++j) {
            const std::size_t base = o * v.n * v.inner + j;
            double total = 0.0;
            for (std::size_t i = 0; i < v.n; ++i) total += xv[base + i * v.inner];
            const double mu = total / n;
            double sq = 0.0;
            for (std::size_t i = 0; i < v.n; ++i) {
                const double dev = xv[base + i * v.inner] - mu;
                sq += dev * dev;
            }
            const double istd = 1.0 / std::sqrt(sq / n + eps);
            inv_std[o * v.inner + j] = istd;
            for (std::size_t i = 0; i < v.n; ++i) out[base + i * v.inner] = (xv[base + i * v.inner] - mu) * istd;
        }
    }
    const bool track = tracks(g, {&x});
    Tensor result(x.shape(), std::move(out), track);
    if (track) {
        g.record("layer_norm", [x, result, v, inv_std = std::move(inv_std), n]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            const auto xhat = result.values();
            auto gx = x.grad_buffer();
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t j = 0; j < v.inner; ++j) {
                    const std::size_t base = o * v.n * v.inner + j;
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t i = 0; i < v.n; ++i) {
                        const std::size_t at = base + i * v.inner;
                        mean_g += go[at];
                        mean_gx += go[at] * xhat[at];
                    }
                    mean_g /= n;
                    mean_gx /= n;
                    const double istd = inv_std[o * v.inner + j];
                    for (std::size_t i = 0; i < v.n; ++i) {
                        const std::size_t at = base + i * v.inner;
                        gx[at] += istd * (go[at] - mean_g - xhat[at] * mean_gx);
                    }
                }
            }
        });
    }
    return result;
}

namespace {

struct LerpTap {
    std::size_t i0;
    std::size_t i1;
    double frac;
};

std::vector<LerpTap> align_corner_taps(std::size_t in, std::size_t out) {
    std::vector<LerpTap> taps(out);
    for (std::size_t i = 0; i < out; ++i) {
        if (in == 1 || out == 1) {
            taps[i] = {0, 0, 0.0};
            continue;
        }
        const double src = static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
        auto i0 = static_cast<std::size_t>(std::floor(src));
        if (i0 >= in - 1) i0 = in - 2;
        taps[i] = {i0, i0 + 1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace

Tensor bilinear_resize(Graph& g, const Tensor& x, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0) throw ParameterError("bilinear_resize: output extents must be positive");
    const auto pv = plane_view(x, "bilinear_resize");
    const bool track = tracks(g, {&x});
    if (out_h == pv.h && out_w == pv.w) {
        Tensor result(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), track);
        if (track) {
            g.record("bilinear_resize", [x, result]() mutable {
                if (!result.has_grad()) return;
                const auto go = result.grad();
                auto gx = x.grad_buffer();
                for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            });
        }
        return result;
    }
    const auto ty = align_corner_taps(pv.h, out_h);
    const auto tx = align_corner_taps(pv.w, out_w);
    const auto xv = x.values();
    std::vector<double> out(pv.lead * out_h * out_w);
    for (std::size_t l = 0; l < pv.lead; ++l) {
        const double* src = xv.data() + l * pv.h * pv.w;
        double* dst = out.data() + l * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& a = ty[y];
            for (std::size_t xo = 0; xo < out_w; ++xo) {
                const auto& b = tx[xo];
                const double v00 = src[a.i0 * pv.w + b.i0], v01 = src[a.i0 * pv.w + b.i1];
                const double v10 = src[a.i1 * pv.w + b.i0], v11 = src[a.i1 * pv.w + b.i1];
                dst[y * out_w + xo] = (1.0 - a.frac) * ((1.0 - b.frac) * v00 + b.frac * v01) +
                                      a.frac * ((1.0 - b.frac) * v10 + b.frac * v11);
            }
        }
    }
    Tensor result(with_plane(x.shape(), out_h, out_w), std::move(out), track);
    if (track) {
        g.record("bilinear_resize", [x, result, pv, ty, tx, out_h, out_w]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t l = 0; l < pv.lead; ++l) {
                double* gsrc = gx.data() + l * pv.h * pv.w;
                const double* gdst = go.data() + l * out_h * out_w;
                for (std::size_t y = 0; y < out_h; ++y) {
                    const auto& a = ty[y];
                    for (std::size_t xo = 0; xo < out_w; ++xo) {
                        const auto& b = tx[xo];
                        const double gval = gdst[y * out_w + xo];
                        gsrc[a.i0 * pv.w + b.i0] += (1.0 - a.frac) * (1.0 - b.frac) * gval;
                        gsrc[a.i0 * pv.w + b.i1] += (1.0 - a.frac) * b.frac * gval;
                        gsrc[a.i1 * pv.w + b.i0] += a.frac * (1.0 - b.frac) * gval;
                        gsrc[a.i1 * pv.w + b.i1] += a.frac * b.frac * gval;
                    }
                }
            }
        });
    }
    return result;
}

Tensor avg_pool2(Graph& g, const Tensor& x) {
    const auto pv = plane_view(x, "avg_pool2");
    if (pv.h % 2 != 0 || pv.w % 2 != 0) {
        throw DimensionError("avg_pool2: spatial extents must be even, got " + shape_to_string(x.shape()));
    }
    const std::size_t oh = pv.h / 2, ow = pv.w / 2;
    const auto xv = x.values();
    std::vector<double> out(pv.lead * oh * ow);
    for (std::size_t l = 0; l < pv.lead; ++l) {
        const double* src = xv.data() + l * pv.h * pv.w;
        double* dst = out.data() + l * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xo = 0; xo < ow; ++xo) {
                const double* r0 = src + (2 * y) * pv.w + 2 * xo;
                const double* r1 = r0 + pv.w;
                dst[y * ow + xo] = (r0[0] + r0[1] + r1[0] + r1[1]) * 0.25;
            }
        }
    }
    const bool track = tracks(g, {&x});
    Tensor result(with_plane(x.shape(), oh, ow), std::move(out), track);
    if (track) {
        g.record("avg_pool2", [x, result, pv, oh, ow]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t l = 0; l < pv.lead; ++l) {
                double* gsrc = gx.data() + l * pv.h * pv.w;
                const double* gdst = go.data() + l * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        const double q = 0.25 * gdst[y * ow + xo];
                        double* r0 = gsrc + (2 * y) * pv.w + 2 * xo;
                        double* r1 = r0 + pv.w;
                        r0[0] += q;
                        r0[1] += q;
                        r1[0] += q;
                        r1[1] += q;
                    }
                }
            }
        });
    }
    return result;
}

Tensor relu(Graph& g, const Tensor& x) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    const bool track = tracks(g, {&x});
    Tensor result(x.shape(), std::move(out), track);
    if (track) {
        g.record("relu", [x, result]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            const auto xv = x.values();
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) {
                if (xv[i] > 0.0) gx[i] += go[i];
            }
        });
    }
    return result;
}

namespace {

enum class Binary { add, sub, mul };

Tensor binary(Graph& g, const Tensor& a, const Tensor& b, Binary kind, const char* name) {
    require_same_shape(a, b, name);
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        switch (kind) {
            case Binary::add: out[i] = av[i] + bv[i]; break;
            case Binary::sub: out[i] = av[i] - bv[i]; break;
            case Binary::mul: out[i] = av[i] * bv[i]; break;
        }
    }
    const bool track = tracks(g, {&a, &b});
    Tensor result(a.shape(), std::move(out), track);
    if (track) {
        g.record(name, [a, b, result, kind]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                const auto bv = b.values();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += kind == Binary::mul ? go[i] * bv[i] : go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                const auto av = a.values();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    switch (kind) {
                        case Binary::add: gb[i] += go[i]; break;
                        case Binary::sub: gb[i] -= go[i]; break;
                        case Binary::mul: gb[i] += go[i] * av[i]; break;
                    }
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor add(Graph& g, const Tensor& a, const Tensor& b) { return binary(g, a, b, Binary::add, "add"); }
Tensor sub(Graph& g, const Tensor& a, const Tensor& b) { return binary(g, a, b, Binary::sub, "sub"); }
Tensor mul(Graph& g, const Tensor& a, const Tensor& b) { return binary(g, a, b, Binary::mul, "mul"); }

Tensor scale(Graph& g, const Tensor& x, double factor) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
    const bool track = tracks(g, {&x});
    Tensor result(x.shape(), std::move(out), track);
    if (track) {
        g.record("scale", [x, result, factor]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
        });
    }
    return result;
}

Tensor concat(Graph& g, std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    require_axis(parts[0], axis, "concat");
    Shape out_shape = parts[0].shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < out_shape.size(); ++i) {
            if (i != axis && p.dim(i) != out_shape[i]) throw DimensionError("concat: extent mismatch off the concat axis");
        }
        total += p.dim(axis);
    }
    out_shape[axis] = total;
    const auto ov = axis_view(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto pv = p.values();
        const std::size_t chunk = p.dim(axis) * ov.inner;
        for (std::size_t o = 0; o < ov.outer; ++o) {
            std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * ov.n * ov.inner + offset * ov.inner);
        }
        offset += p.dim(axis);
    }
    const bool track = tracks(g, parts);
    Tensor result(out_shape, std::move(out), track);
    if (track) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        g.record("concat", [inputs, result, ov, axis]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            std::size_t offset = 0;
            for (auto& p : inputs) {
                const std::size_t chunk = p.dim(axis) * ov.inner;
                if (p.requires_grad()) {
                    auto gp = p.grad_buffer();
                    for (std::size_t o = 0; o < ov.outer; ++o) {
                        const double* src = go.data() + o * ov.n * ov.inner + offset * ov.inner;
                        for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
                    }
                }
                offset += p.dim(axis);
            }
        });
    }
    return result;
}

Tensor stack(Graph& g, std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("stack: no inputs");
    std::vector<Tensor> lifted;
    lifted.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.shape() != parts[0].shape()) throw DimensionError("stack: all inputs must share a shape");
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        lifted.push_back(reshape(g, p, s));
    }
    return concat(g, lifted, 0);
}

Tensor select(Graph& g, const Tensor& x, std::size_t axis, std::size_t index) {
    require_axis(x, axis, "select");
    if (index >= x.dim(axis)) throw BoundsError("select: index out of range");
    const auto v = axis_view(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    const auto xv = x.values();
    std::vector<double> out(v.outer * v.inner);
    for (std::size_t o = 0; o < v.outer; ++o) {
        std::copy_n(xv.data() + (o * v.n + index) * v.inner, v.inner, out.data() + o * v.inner);
    }
    const bool track = tracks(g, {&x});
    Tensor result(out_shape, std::move(out), track);
    if (track) {
        g.record("select", [x, result, v, index]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t j = 0; j < v.inner; ++j) gx[(o * v.n + index) * v.inner + j] += go[o * v.inner + j];
            }
        });
    }
    return result;
}

Tensor sum_axis(Graph& g, const Tensor& x, std::size_t axis) {
    require_axis(x, axis, "sum_axis");
    const auto v = axis_view(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    const auto xv = x.values();
    std::vector<double> out(v.outer * v.inner);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t j = 0; j < v.inner; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < v.n; ++i) acc += xv[(o * v.n + i) * v.inner + j];
            out[o * v.inner + j] = acc;
        }
    }
    const bool track = tracks(g, {&x});
    Tensor result(out_shape, std::move(out), track);
    if (track) {
        g.record("sum_axis", [x, result, v]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.n; ++i) {
                    for (std::size_t j = 0; j < v.inner; ++j) gx[(o * v.n + i) * v.inner + j] += go[o * v.inner + j];
                }
            }
        });
    }
    return result;
}

Tensor sum(Graph& g, const Tensor& x) {
    const auto xv = x.values();
    double acc = 0.0;
    for (double value : xv) acc += value;
    const bool track = tracks(g, {&x});
    Tensor result({1}, {acc}, track);
    if (track) {
        g.record("sum", [x, result]() mutable {
            if (!result.has_grad()) return;
            const double go = result.grad()[0];
            for (auto& gx : x.grad_buffer()) gx += go;
        });
    }
    return result;
}

Tensor mean(Graph& g, const Tensor& x) {
    return scale(g, sum(g, x), 1.0 / static_cast<double>(x.numel()));
}

Tensor l1_loss(Graph& g, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "l1_loss");
    const auto av = a.values();
    const auto bv = b.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    const bool track = tracks(g, {&a, &b});
    Tensor result({1}, {acc / n}, track);
    if (track) {
        g.record("l1_loss", [a, b, result, n]() mutable {
            if (!result.has_grad()) return;
            const double go = result.grad()[0] / n;
            const auto av = a.values();
            const auto bv = b.values();
            std::span<double> ga, gb;
            if (a.requires_grad()) ga = a.grad_buffer();
            if (b.requires_grad()) gb = b.grad_buffer();
            for (std::size_t i = 0; i < av.size(); ++i) {
                const double d = av[i] - bv[i];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (!ga.empty()) ga[i] += s * go;
                if (!gb.empty()) gb[i] -= s * go;
            }
        });
    }
    return result;
}

Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
    }
    const bool track = tracks(g, {&x});
    Tensor result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()), track);
    if (track) {
        g.record("reshape", [x, result]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return result;
}

Tensor permute(Graph& g, const Tensor& x, std::span<const std::size_t> order) {
    const auto& in_shape = x.shape();
    const std::size_t rank = in_shape.size();
    if (order.size() != rank) throw DimensionError("permute: order length must equal rank");
    std::vector<bool> seen(rank, false);
    for (auto a : order) {
        if (a >= rank || seen[a]) throw DimensionError("permute: order is not a permutation");
        seen[a] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[order[i]];
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
    // Source offset of every destination element, walked in destination order.
    std::vector<std::size_t> src_index(x.numel());
    std::vector<std::size_t> counter(rank, 0);
    for (std::size_t flat = 0; flat < src_index.size(); ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) src += counter[i] * in_strides[order[i]];
        src_index[flat] = src;
        for (std::size_t i = rank; i-- > 0;) {
            if (++counter[i] < out_shape[i]) break;
            counter[i] = 0;
        }
    }
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[src_index[i]];
    const bool track = tracks(g, {&x});
    Tensor result(out_shape, std::move(out), track);
    if (track) {
        g.record("permute", [x, result, src_index = std::move(src_index)]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) gx[src_index[i]] += go[i];
        });
    }
    return result;
}

namespace {

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    const auto len = static_cast<std::ptrdiff_t>(n);
    if (i < 0) i = -i;
    if (i >= len) i = 2 * (len - 1) - i;
    return static_cast<std::size_t>(i);
}

}  // namespace

Tensor pad_reflect(Graph& g, const Tensor& x, std::size_t top, std::size_t bottom, std::size_t left,
                   std::size_t right) {
    const auto pv = plane_view(x, "pad_reflect");
    if (top >= pv.h || bottom >= pv.h || left >= pv.w || right >= pv.w) {
        throw DimensionError("pad_reflect: padding must be smaller than the padded extent");
    }
    const std::size_t oh = pv.h + top + bottom, ow = pv.w + left + right;
    std::vector<std::size_t> rows(oh), cols(ow);
    for (std::size_t y = 0; y < oh; ++y) {
        rows[y] = reflect_index(static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(top), pv.h);
    }
    for (std::size_t c = 0; c < ow; ++c) {
        cols[c] = reflect_index(static_cast<std::ptrdiff_t>(c) - static_cast<std::ptrdiff_t>(left), pv.w);
    }
    const auto xv = x.values();
    std::vector<double> out(pv.lead * oh * ow);
    for (std::size_t l = 0; l < pv.lead; ++l) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t c = 0; c < ow; ++c) {
                out[(l * oh + y) * ow + c] = xv[(l * pv.h + rows[y]) * pv.w + cols[c]];
            }
        }
    }
    const bool track = tracks(g, {&x});
    Tensor result(with_plane(x.shape(), oh, ow), std::move(out), track);
    if (track) {
        g.record("pad_reflect", [x, result, pv, oh, ow, rows, cols]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t l = 0; l < pv.lead; ++l) {
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t c = 0; c < ow; ++c) {
                        gx[(l * pv.h + rows[y]) * pv.w + cols[c]] += go[(l * oh + y) * ow + c];
                    }
                }
            }
        });
    }
    return result;
}

Tensor crop2d(Graph& g, const Tensor& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    const auto pv = plane_view(x, "crop2d");
    if (h == 0 || w == 0 || y0 + h > pv.h || x0 + w > pv.w) throw BoundsError("crop2d: window outside input");
    const auto xv = x.values();
    std::vector<double> out(pv.lead * h * w);
    for (std::size_t l = 0; l < pv.lead; ++l) {
        for (std::size_t y = 0; y < h; ++y) {
            std::copy_n(xv.data() + (l * pv.h + y0 + y) * pv.w + x0, w, out.data() + (l * h + y) * w);
        }
    }
    const bool track = tracks(g, {&x});
    Tensor result(with_plane(x.shape(), h, w), std::move(out), track);
    if (track) {
        g.record("crop2d", [x, result, pv, y0, x0, h, w]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            auto gx = x.grad_buffer();
            for (std::size_t l = 0; l < pv.lead; ++l) {
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t c = 0; c < w; ++c) {
                        gx[(l * pv.h + y0 + y) * pv.w + x0 + c] += go[(l * h + y) * w + c];
                    }
                }
            }
        });
    }
    return result;
}

Tensor weighted_sum(Graph& g, std::span<const Tensor> items, const Tensor& weights) {
    require_rank(weights, 2, "weighted_sum");
    const std::size_t count = weights.dim(0), rows = weights.dim(1);
    if (items.size() != count) throw DimensionError("weighted_sum: weight rows must match the number of items");
    const std::size_t total = items[0].numel();
    if (total % rows != 0) throw DimensionError("weighted_sum: item size is not a multiple of the weight columns");
    const std::size_t cols = total / rows;
    for (const auto& item : items) require_same_shape(item, items[0], "weighted_sum");
    const auto wv = weights.values();
    std::vector<double> out(total, 0.0);
    for (std::size_t l = 0; l < count; ++l) {
        const auto iv = items[l].values();
        for (std::size_t q = 0; q < rows; ++q) {
            const double wq = wv[l * rows + q];
            for (std::size_t c = 0; c < cols; ++c) out[q * cols + c] += wq * iv[q * cols + c];
        }
    }
    std::vector<Tensor> inputs(items.begin(), items.end());
    inputs.push_back(weights);
    const bool track = tracks(g, inputs);
    Tensor result(items[0].shape(), std::move(out), track);
    if (track) {
        g.record("weighted_sum", [inputs, result, count, rows, cols]() mutable {
            if (!result.has_grad()) return;
            const auto go = result.grad();
            Tensor& w = inputs.back();
            const auto wv = w.values();
            std::span<double> gw;
            if (w.requires_grad()) gw = w.grad_buffer();
            for (std::size_t l = 0; l < count; ++l) {
                Tensor& item = inputs[l];
                const auto iv = item.values();
                std::span<double> gi;
                if (item.requires_grad()) gi = item.grad_buffer();
                for (std::size_t q = 0; q < rows; ++q) {
                    const double wq = wv[l * rows + q];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t at = q * cols + c;
                        if (!gi.empty()) gi[at] += wq * go[at];
                        acc += go[at] * iv[at];
                    }
                    if (!gw.empty()) gw[l * rows + q] += acc;
                }
            }
        });
    }
    return result;
}

AttentionResult blocked_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                                  std::size_t key_block) {
    require_rank(q, 2, "blocked_attention");
    require_rank(k, 2, "blocked_attention");
    require_rank(v, 2, "blocked_attention");
    if (key_block == 0) throw ParameterError("blocked_attention: key block must be positive");
    const std::size_t rows = q.dim(0), ch = q.dim(1), keys = k.dim(0), vch = v.dim(1);
    if (k.dim(1) != ch) throw DimensionError("blocked_attention: query and key channel counts differ");
    if (v.dim(0) != keys) throw DimensionError("blocked_attention: key and value counts differ");

    const auto qv = q.values();
    const auto kv = k.values();
    const auto vv = v.values();
    std::vector<double> out(rows * vch, 0.0);
    std::vector<double> relation(rows, 0.0);
    std::vector<double> row_max(rows), row_sum(rows);
    std::vector<double> scores(std::min(key_block, keys));

    for (std::size_t i = 0; i < rows; ++i) {
        const double* qi = qv.data() + i * ch;
        double* oi = out.data() + i * vch;
        double m = -std::numeric_limits<double>::infinity();
        double l = 0.0;
        double weighted_score = 0.0;
        for (std::size_t start = 0; start < keys; start += key_block) {
            const std::size_t stop = std::min(keys, start + key_block);
            double block_max = -std::numeric_limits<double>::infinity();
            for (std::size_t j = start; j < stop; ++j) {
                const double* kj = kv.data() + j * ch;
                double s = 0.0;
                for (std::size_t c = 0; c < ch; ++c) s += qi[c] * kj[c];
                s *= scale;
                if (!std::isfinite(s)) throw NumericError("blocked_attention: non-finite score");
                scores[j - start] = s;
                block_max = std::max(block_max, s);
            }
            const double m_new = std::max(m, block_max);
            const double alpha = std::exp(m - m_new);  // 0 on the first block
            l *= alpha;
            weighted_score *= alpha;
            for (std::size_t c = 0; c < vch; ++c) oi[c] *= alpha;
            for (std::size_t j = start; j < stop; ++j) {
                const double s = scores[j - start];
                const double e = std::exp(s - m_new);
                l += e;
                weighted_score += e * s;
                const double* vj = vv.data() + j * vch;
                for (std::size_t c = 0; c < vch; ++c) oi[c] += e * vj[c];
            }
            m = m_new;
        }
        for (std::size_t c = 0; c < vch; ++c) oi[c] /= l;
        relation[i] = weighted_score / l;
        row_max[i] = m;
        row_sum[i] = l;
    }

    const bool track = tracks(g, {&q, &k, &v});
    AttentionResult result{Tensor({rows, vch}, std::move(out), track), Tensor({rows}, std::move(relation), track)};
    if (track) {
        g.record("blocked_attention", [q, k, v, output = result.output, rel = result.relation, row_max = std::move(row_max),
                                       row_sum = std::move(row_sum), rows, ch, keys, vch, scale, key_block]() mutable {
            const bool has_out = output.has_grad();
            const bool has_rel = rel.has_grad();
            if (!has_out && !has_rel) return;
            const auto qv = q.values();
            const auto kv = k.values();
            const auto vv = v.values();
            const auto ov = output.values();
            const auto rv = rel.values();
            const auto gout = has_out ? output.grad() : std::span<const double>{};
            const auto grel = has_rel ? rel.grad() : std::span<const double>{};
            std::span<double> gq, gk, gv;
            if (q.requires_grad()) gq = q.grad_buffer();
            if (k.requires_grad()) gk = k.grad_buffer();
            if (v.requires_grad()) gv = v.grad_buffer();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* qi = qv.data() + i * ch;
                const double* goi = has_out ? gout.data() + i * vch : nullptr;
                double out_dot = 0.0;
                if (has_out) {
                    for (std::size_t c = 0; c < vch; ++c) out_dot += goi[c] * ov[i * vch + c];
                }
                const double gr = has_rel ? grel[i] : 0.0;
                for (std::size_t start = 0; start < keys; start += key_block) {
                    const std::size_t stop = std::min(keys, start + key_block);
                    for (std::size_t j = start; j < stop; ++j) {
                        const double* kj = kv.data() + j * ch;
                        const double* vj = vv.data() + j * vch;
                        double s = 0.0;
                        for (std::size_t c = 0; c < ch; ++c) s += qi[c] * kj[c];
                        s *= scale;
                        const double a = std::exp(s - row_max[i]) / row_sum[i];
                        double ds = gr * a * (1.0 + s - rv[i]);
                        if (has_out) {
                            double da = 0.0;
                            for (std::size_t c = 0; c < vch; ++c) da += goi[c] * vj[c];
                            ds += a * (da - out_dot);
                            if (!gv.empty()) {
                                for (std::size_t c = 0; c < vch; ++c) gv[j * vch + c] += a * goi[c];
                            }
                        }
                        const double dsc = ds * scale;
                        if (!gq.empty()) {
                            for (std::size_t c = 0; c < ch; ++c) gq[i * ch + c] += dsc * kj[c];
                        }
                        if (!gk.empty()) {
                            for (std::size_t c = 0; c < ch; ++c) gk[j * ch + c] += dsc * qi[c];
                        }
                    }
                }
            }
        });
    }
    return result;
}

}  // namespace acvtt::ops
