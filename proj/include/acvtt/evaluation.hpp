#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "acvtt/volume.hpp"

namespace acvtt {

struct PsnrResult {
    double db = 0.0;  // +inf when the volumes are identical
    bool infinite = false;
};

double mse(const Volume& ref, const Volume& test);
/// 10 log10(range^2 / MSE); symmetric in its arguments.
PsnrResult psnr(const Volume& ref, const Volume& test, double data_range = 1.0);

/// Mean SSIM over all valid 11x11 windows (Gaussian weights, sigma 1.5).
/// Both extents must be at least 11.
double ssim_image(const Image& a, const Image& b, double data_range = 1.0);

/// Mean 2D SSIM over the slices of `plane` (all slices when `indices` is empty).
double ssim_view(const Volume& ref, const Volume& test, Plane plane, double data_range = 1.0,
                 const std::vector<std::size_t>& indices = {});

enum class InterpKind { nearest, linear, cubic };
InterpKind parse_interp_kind(std::string_view text);
std::string_view to_string(InterpKind kind);

/// Depth-only interpolation of each (y, x) column to D = r (d - 1) + 1 slices.
/// nearest: ties go to the lower slice; cubic: Catmull-Rom with clamped
/// boundary samples. Retained slices are copied exactly; normalized outputs
/// are clamped to [0, 1].
Volume baseline_interpolate(const Volume& v_lr, std::size_t r, InterpKind kind);

struct EvalOptions {
    bool foreground = false;  // restrict through-plane slices to foreground_mask
    double tau = 0.05;
    bool exclude_retained = false;  // drop z in r*Z from PSNR and axial SSIM
    std::size_t r = 1;
};

struct MetricRow {
    std::string method;
    std::string volume_id;
    std::size_t r = 0;
    std::size_t n_refs = 0;
    double psnr_db = 0.0;
    bool psnr_infinite = false;
    double ssim_a = 0.0;
    double ssim_c = 0.0;
    double ssim_s = 0.0;
    double wall_time_s = 0.0;
    std::string config_hash;
};

/// PSNR and the three view SSIMs of `test` against `ground_truth`.
MetricRow evaluate(const Volume& ground_truth, const Volume& test, const EvalOptions& options = {});

inline constexpr std::string_view kReportHeader = "method,volume_id,r,N,psnr_db,ssim_a,ssim_c,ssim_s,wall_time_s,config_hash";

std::string format_report(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_report(const std::string& text);
void write_report(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_report(const std::filesystem::path& path);

}  // namespace acvtt
