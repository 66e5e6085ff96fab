#include "acvtt/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "acvtt/errors.hpp"
#include "acvtt/rng.hpp"

namespace acvtt {

std::string_view to_string(IntensityDomain domain) {
    return domain == IntensityDomain::raw_hu ? "raw_hu" : "normalized";
}

std::string_view to_string(Plane plane) {
    switch (plane) {
        case Plane::axial: return "axial";
        case Plane::coronal: return "coronal";
        case Plane::sagittal: return "sagittal";
    }
    return "axial";
}

IntensityDomain parse_intensity_domain(std::string_view text) {
    if (text == "raw_hu") return IntensityDomain::raw_hu;
    if (text == "normalized") return IntensityDomain::normalized;
    throw ParameterError("unknown intensity domain '" + std::string(text) + "'");
}

Plane parse_plane(std::string_view text) {
    if (text == "axial") return Plane::axial;
    if (text == "coronal") return Plane::coronal;
    if (text == "sagittal") return Plane::sagittal;
    throw ParameterError("unknown plane '" + std::string(text) + "'");
}

ReferenceMode parse_reference_mode(std::string_view text) {
    if (text == "random") return ReferenceMode::random;
    if (text == "uniform") return ReferenceMode::uniform;
    throw ParameterError("unknown reference mode '" + std::string(text) + "'");
}

Volume::Volume(std::size_t depth, std::size_t height, std::size_t width, std::vector<double> voxels, Spacing spacing,
               IntensityDomain domain)
    : depth_(depth), height_(height), width_(width), voxels_(std::move(voxels)), spacing_(spacing), domain_(domain) {
    if (depth_ < 2 || height_ < 1 || width_ < 1) {
        throw DimensionError("volume needs depth >= 2 and positive height/width, got " + std::to_string(depth_) + "x" +
                             std::to_string(height_) + "x" + std::to_string(width_));
    }
    if (voxels_.size() != depth_ * height_ * width_) throw DimensionError("volume voxel count does not match extents");
    if (domain_ == IntensityDomain::normalized) {
        for (double v : voxels_) {
            if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("normalized volume has a voxel outside [0, 1]");
        }
    }
}

Volume Volume::filled(std::size_t depth, std::size_t height, std::size_t width, double value, IntensityDomain domain) {
    return Volume(depth, height, width, std::vector<double>(depth * height * width, value), {}, domain);
}

Volume normalize_hu(const Volume& v, double lo, double hi) {
    if (!(lo < hi)) throw ParameterError("normalize_hu: lo must be below hi");
    std::vector<double> out(v.size());
    const auto in = v.voxels();
    const double range = hi - lo;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (std::clamp(in[i], lo, hi) - lo) / range;
    return Volume(v.depth(), v.height(), v.width(), std::move(out), v.spacing(), IntensityDomain::normalized);
}

std::size_t dense_depth(std::size_t sparse_depth, std::size_t r) { return r * (sparse_depth - 1) + 1; }

Volume downsample_depth(const Volume& v, std::size_t r) {
    if (r == 0) throw ParameterError("downsample_depth: r must be positive");
    if ((v.depth() - 1) % r != 0) {
        throw ProtocolError("downsample_depth: depth - 1 = " + std::to_string(v.depth() - 1) +
                            " is not divisible by r = " + std::to_string(r) + "; crop first");
    }
    const std::size_t d = (v.depth() - 1) / r + 1;
    const std::size_t plane = v.height() * v.width();
    std::vector<double> out(d * plane);
    const auto in = v.voxels();
    for (std::size_t z = 0; z < d; ++z) std::copy_n(in.data() + z * r * plane, plane, out.data() + z * plane);
    Spacing s = v.spacing();
    s.dz *= static_cast<double>(r);
    return Volume(d, v.height(), v.width(), std::move(out), s, v.domain());
}

Volume upsample_depth_linear(const Volume& v, std::size_t r) {
    if (r == 0) throw ParameterError("upsample_depth_linear: r must be positive");
    const std::size_t big = dense_depth(v.depth(), r);
    const std::size_t plane = v.height() * v.width();
    std::vector<double> out(big * plane);
    const auto in = v.voxels();
    for (std::size_t z = 0; z < big; ++z) {
        const std::size_t k = z / r;
        const std::size_t phase = z % r;
        double* dst = out.data() + z * plane;
        const double* a = in.data() + k * plane;
        if (phase == 0) {
            std::copy_n(a, plane, dst);
            continue;
        }
        const double* b = a + plane;
        const double t = static_cast<double>(phase) / static_cast<double>(r);
        for (std::size_t i = 0; i < plane; ++i) dst[i] = (1.0 - t) * a[i] + t * b[i];
    }
    Spacing s = v.spacing();
    s.dz /= static_cast<double>(r);
    return Volume(big, v.height(), v.width(), std::move(out), s, v.domain());
}

std::size_t plane_extent(const Volume& v, Plane plane) {
    switch (plane) {
        case Plane::axial: return v.depth();
        case Plane::coronal: return v.height();
        case Plane::sagittal: return v.width();
    }
    return 0;
}

ViewSlice extract_view(const Volume& v, Plane plane, std::size_t index) {
    if (index >= plane_extent(v, plane)) {
        throw BoundsError("extract_view: " + std::string(to_string(plane)) + " index " + std::to_string(index) +
                          " out of range");
    }
    ViewSlice s{plane, index, {}};
    const auto vox = v.voxels();
    switch (plane) {
        case Plane::axial: {
            s.image.rows = v.height();
            s.image.cols = v.width();
            const auto plane_size = v.height() * v.width();
            s.image.pixels.assign(vox.begin() + static_cast<std::ptrdiff_t>(index * plane_size),
                                  vox.begin() + static_cast<std::ptrdiff_t>((index + 1) * plane_size));
            break;
        }
        case Plane::coronal: {
            s.image.rows = v.depth();
            s.image.cols = v.width();
            s.image.pixels.resize(v.depth() * v.width());
            for (std::size_t z = 0; z < v.depth(); ++z) {
                std::copy_n(vox.data() + v.index(z, index, 0), v.width(), s.image.pixels.data() + z * v.width());
            }
            break;
        }
        case Plane::sagittal: {
            s.image.rows = v.depth();
            s.image.cols = v.height();
            s.image.pixels.resize(v.depth() * v.height());
            for (std::size_t z = 0; z < v.depth(); ++z) {
                for (std::size_t y = 0; y < v.height(); ++y) s.image.pixels[z * v.height() + y] = v.at(z, y, index);
            }
            break;
        }
    }
    return s;
}

Volume stack_views(std::span<const ViewSlice> slices, Spacing spacing, IntensityDomain domain) {
    if (slices.empty()) throw DimensionError("stack_views: no slices");
    const Plane plane = slices[0].plane;
    const std::size_t rows = slices[0].image.rows, cols = slices[0].image.cols, count = slices.size();
    for (std::size_t i = 0; i < count; ++i) {
        if (slices[i].plane != plane || slices[i].index != i || slices[i].image.rows != rows ||
            slices[i].image.cols != cols) {
            throw DimensionError("stack_views: slices must share plane and shape and be ordered 0..n-1");
        }
    }
    std::size_t depth = 0, height = 0, width = 0;
    switch (plane) {
        case Plane::axial: depth = count, height = rows, width = cols; break;
        case Plane::coronal: depth = rows, height = count, width = cols; break;
        case Plane::sagittal: depth = rows, height = cols, width = count; break;
    }
    std::vector<double> out(depth * height * width);
    auto at = [&](std::size_t z, std::size_t y, std::size_t x) -> double& { return out[(z * height + y) * width + x]; };
    for (std::size_t i = 0; i < count; ++i) {
        const auto& img = slices[i].image;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const double value = img.pixels[r * cols + c];
                switch (plane) {
                    case Plane::axial: at(i, r, c) = value; break;
                    case Plane::coronal: at(r, i, c) = value; break;
                    case Plane::sagittal: at(r, c, i) = value; break;
                }
            }
        }
    }
    return Volume(depth, height, width, std::move(out), spacing, domain);
}

Volume crop_volume(const Volume& v, std::size_t z0, std::size_t y0, std::size_t x0, std::size_t depth,
                   std::size_t height, std::size_t width) {
    if (z0 + depth > v.depth() || y0 + height > v.height() || x0 + width > v.width()) {
        throw BoundsError("crop_volume: window exceeds volume");
    }
    std::vector<double> out(depth * height * width);
    for (std::size_t z = 0; z < depth; ++z) {
        for (std::size_t y = 0; y < height; ++y) {
            std::copy_n(v.voxels().data() + v.index(z0 + z, y0 + y, x0), width,
                        out.data() + (z * height + y) * width);
        }
    }
    return Volume(depth, height, width, std::move(out), v.spacing(), v.domain());
}

ForegroundSelection foreground_mask(const Volume& v, double tau) {
    std::vector<double> row_sum(v.height(), 0.0), col_sum(v.width(), 0.0);
    for (std::size_t z = 0; z < v.depth(); ++z) {
        for (std::size_t y = 0; y < v.height(); ++y) {
            for (std::size_t x = 0; x < v.width(); ++x) {
                const double value = v.at(z, y, x);
                row_sum[y] += value;
                col_sum[x] += value;
            }
        }
    }
    ForegroundSelection sel;
    const double row_count = static_cast<double>(v.depth() * v.width());
    const double col_count = static_cast<double>(v.depth() * v.height());
    for (std::size_t y = 0; y < v.height(); ++y) {
        if (row_sum[y] / row_count > tau) sel.coronal.push_back(y);
    }
    for (std::size_t x = 0; x < v.width(); ++x) {
        if (col_sum[x] / col_count > tau) sel.sagittal.push_back(x);
    }
    return sel;
}

std::vector<std::size_t> sample_reference_indices(std::size_t depth, std::size_t count, ReferenceMode mode, Rng& rng) {
    if (count < 1) throw ParameterError("sample_reference_indices: need at least one reference");
    if (count > depth) {
        throw ParameterError("sample_reference_indices: N = " + std::to_string(count) + " exceeds depth " +
                             std::to_string(depth));
    }
    std::vector<std::size_t> indices;
    if (mode == ReferenceMode::uniform) {
        if (count == 1) return {depth / 2};
        const std::size_t span = depth - 1, gaps = count - 1;
        for (std::size_t k = 0; k < count; ++k) indices.push_back((2 * k * span + gaps) / (2 * gaps));
    } else {
        indices = rng.sample_without_replacement(depth, count);
        std::sort(indices.begin(), indices.end());
    }
    return indices;
}

ReferenceSet make_reference_set(const Volume& v, std::vector<std::size_t> indices) {
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= v.depth()) throw BoundsError("reference index outside the volume");
        if (i > 0 && indices[i] <= indices[i - 1]) throw ParameterError("reference indices must be strictly increasing");
    }
    ReferenceSet set;
    set.indices = std::move(indices);
    for (auto z : set.indices) set.slices.push_back(extract_view(v, Plane::axial, z));
    return set;
}

PhantomKind parse_phantom_kind(std::string_view text) {
    if (text == "spheres") return PhantomKind::spheres;
    if (text == "bands") return PhantomKind::bands;
    if (text == "checker") return PhantomKind::checker;
    throw ParameterError("unknown phantom kind '" + std::string(text) + "'");
}

std::string_view to_string(PhantomKind kind) {
    switch (kind) {
        case PhantomKind::spheres: return "spheres";
        case PhantomKind::bands: return "bands";
        case PhantomKind::checker: return "checker";
    }
    return "spheres";
}

namespace {

constexpr double two_pi = 2.0 * std::numbers::pi;

struct Ellipsoid {
    double cz, cy, cx;     // centre, normalised coordinates
    double rz, ry, rx;     // radii
    double level;          // base intensity
    double gz, gy, gx;     // linear intensity gradient
    double fz, fy, fx, ph; // internal texture wave
};

void fill_spheres(std::vector<double>& out, std::size_t D, std::size_t H, std::size_t W, Rng& rng) {
    std::vector<Ellipsoid> blobs(7);
    for (auto& e : blobs) {
        e.cz = rng.uniform(0.2, 0.8);
        e.cy = rng.uniform(0.2, 0.8);
        e.cx = rng.uniform(0.2, 0.8);
        e.rz = rng.uniform(0.15, 0.4);
        e.ry = rng.uniform(0.12, 0.35);
        e.rx = rng.uniform(0.12, 0.35);
        e.level = rng.uniform(0.35, 0.75);
        e.gz = rng.uniform(-0.3, 0.3);
        e.gy = rng.uniform(-0.3, 0.3);
        e.gx = rng.uniform(-0.3, 0.3);
        e.fz = rng.uniform(1.5, 4.0);
        e.fy = rng.uniform(1.5, 4.0);
        e.fx = rng.uniform(1.5, 4.0);
        e.ph = rng.uniform(0.0, two_pi);
    }
    for (std::size_t z = 0; z < D; ++z) {
        const double pz = (static_cast<double>(z) + 0.5) / static_cast<double>(D);
        for (std::size_t y = 0; y < H; ++y) {
            const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
            for (std::size_t x = 0; x < W; ++x) {
                const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
                double value = 0.08;
                for (const auto& e : blobs) {
                    const double dz = (pz - e.cz) / e.rz, dy = (py - e.cy) / e.ry, dx = (px - e.cx) / e.rx;
                    const double rho2 = dz * dz + dy * dy + dx * dx;
                    // Smooth boundary: logistic falloff around rho = 1.
                    const double inside = 1.0 / (1.0 + std::exp(12.0 * (rho2 - 1.0)));
                    const double texture =
                        0.12 * std::sin(two_pi * (e.fz * pz + e.fy * py + e.fx * px) + e.ph);
                    const double body = e.level + e.gz * dz * e.rz + e.gy * dy * e.ry + e.gx * dx * e.rx + texture;
                    value = std::max(value, inside * body + (1.0 - inside) * value);
                }
                out[(z * H + y) * W + x] = std::clamp(value, 0.0, 1.0);
            }
        }
    }
}

void fill_bands(std::vector<double>& out, std::size_t D, std::size_t H, std::size_t W, Rng& rng) {
    struct Wave {
        double kz, ky, kx, phase, amp;
    };
    std::vector<Wave> waves(3);
    for (std::size_t i = 0; i < waves.size(); ++i) {
        auto& w = waves[i];
        const double freq = rng.uniform(1.5, 3.5) * static_cast<double>(i + 1);
        // Oblique direction with a non-trivial depth component.
        const double theta = rng.uniform(0.3, 1.2);
        const double phi = rng.uniform(0.0, two_pi);
        w.kz = freq * std::cos(theta);
        w.ky = freq * std::sin(theta) * std::cos(phi);
        w.kx = freq * std::sin(theta) * std::sin(phi);
        w.phase = rng.uniform(0.0, two_pi);
        w.amp = 0.3 / static_cast<double>(i + 1);
    }
    for (std::size_t z = 0; z < D; ++z) {
        const double pz = static_cast<double>(z) / static_cast<double>(D);
        for (std::size_t y = 0; y < H; ++y) {
            const double py = static_cast<double>(y) / static_cast<double>(H);
            for (std::size_t x = 0; x < W; ++x) {
                const double px = static_cast<double>(x) / static_cast<double>(W);
                double value = 0.5;
                for (const auto& w : waves) value += w.amp * std::sin(two_pi * (w.kz * pz + w.ky * py + w.kx * px) + w.phase);
                out[(z * H + y) * W + x] = std::clamp(value, 0.0, 1.0);
            }
        }
    }
}

void fill_checker(std::vector<double>& out, std::size_t D, std::size_t H, std::size_t W, Rng& rng) {
    const double pz = rng.uniform(3.0, 6.0), py = rng.uniform(3.0, 6.0), px = rng.uniform(3.0, 6.0);
    const double oz = rng.uniform(0.0, two_pi), oy = rng.uniform(0.0, two_pi), ox = rng.uniform(0.0, two_pi);
    const double sharp = rng.uniform(2.0, 4.0);
    for (std::size_t z = 0; z < D; ++z) {
        const double cz = std::tanh(sharp * std::sin(two_pi * static_cast<double>(z) / pz + oz));
        for (std::size_t y = 0; y < H; ++y) {
            const double cy = std::tanh(sharp * std::sin(two_pi * static_cast<double>(y) / py + oy));
            for (std::size_t x = 0; x < W; ++x) {
                const double cx = std::tanh(sharp * std::sin(two_pi * static_cast<double>(x) / px + ox));
                out[(z * H + y) * W + x] = std::clamp(0.5 + 0.4 * cz * cy * cx, 0.0, 1.0);
            }
        }
    }
}

}  // namespace

Volume generate_phantom(PhantomKind kind, std::size_t depth, std::size_t height, std::size_t width, std::uint64_t seed) {
    if (depth < 8 || height < 8 || width < 8) throw ParameterError("generate_phantom: every extent must be >= 8");
    Rng rng({seed, static_cast<std::uint64_t>(kind)});
    std::vector<double> out(depth * height * width);
    switch (kind) {
        case PhantomKind::spheres: fill_spheres(out, depth, height, width, rng); break;
        case PhantomKind::bands: fill_bands(out, depth, height, width, rng); break;
        case PhantomKind::checker: fill_checker(out, depth, height, width, rng); break;
    }
    return Volume(depth, height, width, std::move(out), {}, IntensityDomain::normalized);
}

}  // namespace acvtt
