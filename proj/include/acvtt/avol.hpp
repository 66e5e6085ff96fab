#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "acvtt/volume.hpp"

// AVOL: raw little-endian f64 samples in z-major order (x fastest) plus a JSON
// sidecar named "<raw path>.json":
//   {depth, height, width, spacing:[dz,dy,dx], intensity_domain,
//    dtype:"f64", byte_order:"little", data_file, [config_hash], [metadata]}
namespace acvtt {

struct AvolHeader {
    std::size_t depth = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    Spacing spacing;
    IntensityDomain domain = IntensityDomain::normalized;
    std::string config_hash;
    nlohmann::json metadata = nlohmann::json::object();
};

struct AvolData {
    AvolHeader header;
    std::vector<double> values;
};

std::filesystem::path avol_sidecar(const std::filesystem::path& raw_path);

/// Generic grid writer; depth may be 1 (used for tensor dumps).
void write_avol(const std::filesystem::path& raw_path, const AvolHeader& header, std::span<const double> values);
/// Accepts either the raw path or its sidecar.
AvolData read_avol(const std::filesystem::path& path);

void save_volume(const Volume& v, const std::filesystem::path& raw_path, const std::string& config_hash = {});
Volume load_volume(const std::filesystem::path& path);

}  // namespace acvtt
