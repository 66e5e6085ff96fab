#include "acvtt/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "acvtt/binary_io.hpp"
#include "acvtt/errors.hpp"

namespace acvtt {

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;

std::array<double, kWindow> gaussian_taps() {
    std::array<double, kWindow> w{};
    double total = 0.0;
    for (std::size_t i = 0; i < kWindow; ++i) {
        const double d = static_cast<double>(i) - 5.0;
        w[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
}

/// Valid-mode separable Gaussian filter: rows first, then columns.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t rows, std::size_t cols) {
    static const auto taps = gaussian_taps();
    const std::size_t orow = rows - kWindow + 1, ocol = cols - kWindow + 1;
    std::vector<double> tmp(rows * ocol, 0.0);
    for (std::size_t y = 0; y < rows; ++y)
        for (std::size_t x = 0; x < ocol; ++x) {
            double acc = 0.0;
            for (std::size_t k = 0; k < kWindow; ++k) acc += taps[k] * img[y * cols + x + k];
            tmp[y * ocol + x] = acc;
        }
    std::vector<double> out(orow * ocol, 0.0);
    for (std::size_t y = 0; y < orow; ++y)
        for (std::size_t x = 0; x < ocol; ++x) {
            double acc = 0.0;
            for (std::size_t k = 0; k < kWindow; ++k) acc += taps[k] * tmp[(y + k) * ocol + x];
            out[y * ocol + x] = acc;
        }
    return out;
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_number(const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw IoError("report: malformed number '" + s + "'");
        return v;
    } catch (const std::logic_error&) {
        throw IoError("report: malformed number '" + s + "'");
    }
}

std::size_t parse_count(const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
        throw IoError("report: malformed integer '" + s + "'");
    }
    return static_cast<std::size_t>(std::stoull(s));
}

void require_same(const Volume& a, const Volume& b, const char* what) {
    if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": volume shapes differ");
}

double squared_error_sum(const Volume& ref, const Volume& test, const std::vector<std::size_t>& zs,
                         const std::vector<std::size_t>& ys, const std::vector<std::size_t>& xs, std::size_t& count) {
    double acc = 0.0;
    count = 0;
    for (auto z : zs)
        for (auto y : ys)
            for (auto x : xs) {
                const double d = ref.at(z, y, x) - test.at(z, y, x);
                acc += d * d;
                ++count;
            }
    return acc;
}

std::vector<std::size_t> iota_n(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

PsnrResult psnr_from_mse(double m, double data_range) {
    if (m == 0.0) return {std::numeric_limits<double>::infinity(), true};
    return {10.0 * std::log10(data_range * data_range / m), false};
}

}  // namespace

double mse(const Volume& ref, const Volume& test) {
    require_same(ref, test, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = ref.voxels()[i] - test.voxels()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(ref.size());
}

PsnrResult psnr(const Volume& ref, const Volume& test, double data_range) {
    if (!(data_range > 0.0)) throw ParameterError("psnr: data range must be positive");
    return psnr_from_mse(mse(ref, test), data_range);
}

double ssim_image(const Image& a, const Image& b, double data_range) {
    if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("ssim: image shapes differ");
    if (a.rows < kWindow || a.cols < kWindow) {
        throw ParameterError("ssim: images must be at least 11x11, got " + std::to_string(a.rows) + "x" +
                             std::to_string(a.cols));
    }
    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    const std::size_t n = a.pixels.size();
    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = a.pixels[i] * a.pixels[i];
        yy[i] = b.pixels[i] * b.pixels[i];
        xy[i] = a.pixels[i] * b.pixels[i];
    }
    const auto mx = filter_valid(a.pixels, a.rows, a.cols);
    const auto my = filter_valid(b.pixels, a.rows, a.cols);
    const auto exx = filter_valid(xx, a.rows, a.cols);
    const auto eyy = filter_valid(yy, a.rows, a.cols);
    const auto exy = filter_valid(xy, a.rows, a.cols);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double sxx = exx[i] - mx[i] * mx[i];
        const double syy = eyy[i] - my[i] * my[i];
        const double sxy = exy[i] - mx[i] * my[i];
        const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * sxy + c2);
        const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (sxx + syy + c2);
        total += num / den;
    }
    return total / static_cast<double>(mx.size());
}

double ssim_view(const Volume& ref, const Volume& test, Plane plane, double data_range,
                 const std::vector<std::size_t>& indices) {
    require_same(ref, test, "ssim_view");
    const auto chosen = indices.empty() ? iota_n(plane_extent(ref, plane)) : indices;
    double total = 0.0;
    for (auto i : chosen) {
        total += ssim_image(extract_view(ref, plane, i).image, extract_view(test, plane, i).image, data_range);
    }
    return total / static_cast<double>(chosen.size());
}

InterpKind parse_interp_kind(std::string_view text) {
    if (text == "nearest") return InterpKind::nearest;
    if (text == "linear") return InterpKind::linear;
    if (text == "cubic") return InterpKind::cubic;
    throw ParameterError("unknown interpolation kind '" + std::string(text) + "'");
}

std::string_view to_string(InterpKind kind) {
    switch (kind) {
        case InterpKind::nearest: return "nearest";
        case InterpKind::linear: return "linear";
        case InterpKind::cubic: return "cubic";
    }
    return "?";
}

Volume baseline_interpolate(const Volume& v_lr, std::size_t r, InterpKind kind) {
    if (r == 0) throw ParameterError("baseline_interpolate: r must be positive");
    if (kind == InterpKind::linear) return upsample_depth_linear(v_lr, r);
    const std::size_t d = v_lr.depth(), H = v_lr.height(), W = v_lr.width(), D = dense_depth(d, r);
    const std::size_t plane = H * W;
    const auto src = v_lr.voxels();
    std::vector<double> out(D * plane);
    for (std::size_t z = 0; z < D; ++z) {
        const std::size_t k = std::min(z / r, d - 1);
        const std::size_t rem = z - k * r;
        double* dst = out.data() + z * plane;
        const double* s1 = src.data() + k * plane;
        if (rem == 0) {
            std::copy(s1, s1 + plane, dst);
            continue;
        }
        if (kind == InterpKind::nearest) {
            const double* pick = 2 * rem <= r ? s1 : s1 + plane;
            std::copy(pick, pick + plane, dst);
            continue;
        }
        const double t = static_cast<double>(rem) / static_cast<double>(r);
        const double* s0 = src.data() + (k == 0 ? 0 : k - 1) * plane;
        const double* s2 = s1 + plane;
        const double* s3 = src.data() + std::min(k + 2, d - 1) * plane;
        const double t2 = t * t, t3 = t2 * t;
        for (std::size_t i = 0; i < plane; ++i) {
            const double p0 = s0[i], p1 = s1[i], p2 = s2[i], p3 = s3[i];
            double v = 0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                              (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3);
            if (v_lr.domain() == IntensityDomain::normalized) v = std::clamp(v, 0.0, 1.0);
            dst[i] = v;
        }
    }
    Spacing sp = v_lr.spacing();
    sp.dz /= static_cast<double>(r);
    return Volume(D, H, W, std::move(out), sp, v_lr.domain());
}

MetricRow evaluate(const Volume& gt, const Volume& test, const EvalOptions& options) {
    require_same(gt, test, "evaluate");
    if (options.exclude_retained && options.r == 0) throw ParameterError("evaluate: r must be positive");
    std::vector<std::size_t> zs, ys = iota_n(gt.height()), xs = iota_n(gt.width());
    for (std::size_t z = 0; z < gt.depth(); ++z) {
        if (options.exclude_retained && z % options.r == 0) continue;
        zs.push_back(z);
    }
    if (zs.empty()) throw ParameterError("evaluate: no slices left after excluding retained ones");
    if (options.foreground) {
        auto fg = foreground_mask(gt, options.tau);
        ys = fg.coronal;
        xs = fg.sagittal;
    }
    MetricRow row;
    std::size_t count = 0;
    const double sum = squared_error_sum(gt, test, zs, ys, xs, count);
    if (count == 0) {
        row.psnr_db = std::numeric_limits<double>::quiet_NaN();
    } else {
        const auto p = psnr_from_mse(sum / static_cast<double>(count), 1.0);
        row.psnr_db = p.db;
        row.psnr_infinite = p.infinite;
    }
    row.ssim_a = ssim_view(gt, test, Plane::axial, 1.0, options.exclude_retained ? zs : std::vector<std::size_t>{});
    const bool trim = options.foreground;
    row.ssim_c = trim && ys.empty() ? std::numeric_limits<double>::quiet_NaN()
                                    : ssim_view(gt, test, Plane::coronal, 1.0, trim ? ys : std::vector<std::size_t>{});
    row.ssim_s = trim && xs.empty() ? std::numeric_limits<double>::quiet_NaN()
                                    : ssim_view(gt, test, Plane::sagittal, 1.0, trim ? xs : std::vector<std::size_t>{});
    return row;
}

std::string format_report(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << kReportHeader << '\n';
    for (const auto& r : rows) {
        if (r.method.find(',') != std::string::npos || r.volume_id.find(',') != std::string::npos) {
            throw ParameterError("report: method and volume id must not contain commas");
        }
        os << r.method << ',' << r.volume_id << ',' << r.r << ',' << r.n_refs << ','
           << fmt(r.psnr_infinite ? std::numeric_limits<double>::infinity() : r.psnr_db) << ',' << fmt(r.ssim_a) << ','
           << fmt(r.ssim_c) << ',' << fmt(r.ssim_s) << ',' << fmt(r.wall_time_s) << ',' << r.config_hash << '\n';
    }
    return os.str();
}

std::vector<MetricRow> parse_report(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader) throw IoError("report: missing or unexpected header");
    std::vector<MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != 10) throw IoError("report: expected 10 columns, got " + std::to_string(f.size()));
        MetricRow r;
        r.method = f[0];
        r.volume_id = f[1];
        r.r = parse_count(f[2]);
        r.n_refs = parse_count(f[3]);
        r.psnr_db = parse_number(f[4]);
        r.psnr_infinite = std::isinf(r.psnr_db);
        r.ssim_a = parse_number(f[5]);
        r.ssim_c = parse_number(f[6]);
        r.ssim_s = parse_number(f[7]);
        r.wall_time_s = parse_number(f[8]);
        r.config_hash = f[9];
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_report(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    write_text(path, format_report(rows));
}

std::vector<MetricRow> read_report(const std::filesystem::path& path) { return parse_report(read_text(path)); }

}  // namespace acvtt
