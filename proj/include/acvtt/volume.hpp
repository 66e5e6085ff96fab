#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace acvtt {

class Rng;

enum class IntensityDomain { raw_hu, normalized };
enum class Plane { axial, coronal, sagittal };

std::string_view to_string(IntensityDomain domain);
std::string_view to_string(Plane plane);
IntensityDomain parse_intensity_domain(std::string_view text);
Plane parse_plane(std::string_view text);

/// Voxel spacing in millimetres.
struct Spacing {
    double dz = 1.0;
    double dy = 1.0;
    double dx = 1.0;

    bool operator==(const Spacing&) const = default;
};

/// Dense scalar grid indexed (z, y, x), x fastest. Depth counts axial slices.
///
/// Normalized volumes hold values in [0, 1]; the constructor rejects anything
/// else so downstream metrics can assume a unit data range.
class Volume {
  public:
    Volume(std::size_t depth, std::size_t height, std::size_t width, std::vector<double> voxels, Spacing spacing = {},
           IntensityDomain domain = IntensityDomain::normalized);

    static Volume filled(std::size_t depth, std::size_t height, std::size_t width, double value,
                         IntensityDomain domain = IntensityDomain::normalized);

    std::size_t depth() const noexcept { return depth_; }
    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return voxels_.size(); }
    const Spacing& spacing() const noexcept { return spacing_; }
    IntensityDomain domain() const noexcept { return domain_; }

    double at(std::size_t z, std::size_t y, std::size_t x) const { return voxels_[index(z, y, x)]; }
    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept {
        return (z * height_ + y) * width_ + x;
    }

    std::span<const double> voxels() const noexcept { return voxels_; }

    bool same_shape(const Volume& other) const noexcept {
        return depth_ == other.depth_ && height_ == other.height_ && width_ == other.width_;
    }
    bool operator==(const Volume& other) const = default;

  private:
    std::size_t depth_;
    std::size_t height_;
    std::size_t width_;
    std::vector<double> voxels_;
    Spacing spacing_;
    IntensityDomain domain_;
};

/// Row-major 2D image.
struct Image {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> pixels;

    double at(std::size_t r, std::size_t c) const { return pixels[r * cols + c]; }
    bool operator==(const Image&) const = default;
};

/// One 2D cut through a volume. Axial slices are height x width, coronal
/// depth x width, sagittal depth x height.
struct ViewSlice {
    Plane plane = Plane::axial;
    std::size_t index = 0;
    Image image;
};

/// Axial slices chosen as texture references. Indices are strictly increasing.
struct ReferenceSet {
    std::vector<std::size_t> indices;
    std::vector<ViewSlice> slices;

    std::size_t size() const noexcept { return indices.size(); }
};

enum class ReferenceMode { random, uniform };
ReferenceMode parse_reference_mode(std::string_view text);

/// Clips to [lo, hi] and maps affinely onto [0, 1].
Volume normalize_hu(const Volume& v, double lo = -1024.0, double hi = 3071.0);

/// Keeps slices 0, r, 2r, ..., D-1. Requires (D - 1) % r == 0.
Volume downsample_depth(const Volume& v, std::size_t r);

/// Linear interpolation along depth to D = r (d - 1) + 1 slices; retained
/// slices are copied exactly.
Volume upsample_depth_linear(const Volume& v, std::size_t r);

/// Slice count for the depth relation D = r (d - 1) + 1.
std::size_t dense_depth(std::size_t sparse_depth, std::size_t r);

/// Number of slices along `plane`'s stacking axis.
std::size_t plane_extent(const Volume& v, Plane plane);
ViewSlice extract_view(const Volume& v, Plane plane, std::size_t index);
/// Inverse of extract_view over a full set of slices ordered by index.
Volume stack_views(std::span<const ViewSlice> slices, Spacing spacing = {},
                   IntensityDomain domain = IntensityDomain::normalized);

Volume crop_volume(const Volume& v, std::size_t z0, std::size_t y0, std::size_t x0, std::size_t depth,
                   std::size_t height, std::size_t width);

/// Through-plane slices whose mean intensity exceeds tau (air exclusion).
struct ForegroundSelection {
    std::vector<std::size_t> coronal;   // y indices
    std::vector<std::size_t> sagittal;  // x indices
};
ForegroundSelection foreground_mask(const Volume& v, double tau = 0.05);

/// Uniform mode: round(k (d - 1) / (N - 1)), k = 0..N-1 (N = 1 gives d / 2).
/// Random mode: N distinct indices drawn from `rng`. Result is sorted.
std::vector<std::size_t> sample_reference_indices(std::size_t depth, std::size_t count, ReferenceMode mode, Rng& rng);
ReferenceSet make_reference_set(const Volume& v, std::vector<std::size_t> indices);

enum class PhantomKind { spheres, bands, checker };
PhantomKind parse_phantom_kind(std::string_view text);
std::string_view to_string(PhantomKind kind);

/// Deterministic synthetic volume in [0, 1] with structure that varies across
/// all three axes. Every extent must be at least 8.
Volume generate_phantom(PhantomKind kind, std::size_t depth, std::size_t height, std::size_t width,
                        std::uint64_t seed);

}  // namespace acvtt
