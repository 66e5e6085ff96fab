#include "acvtt/avol.hpp"

#include "acvtt/binary_io.hpp"
#include "acvtt/errors.hpp"

namespace acvtt {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path avol_sidecar(const fs::path& raw_path) {
    fs::path p = raw_path;
    p += ".json";
    return p;
}

namespace {

fs::path raw_from_any(const fs::path& path) {
    if (path.extension() == ".json") {
        fs::path raw = path;
        raw.replace_extension();
        return raw;
    }
    return path;
}

}  // namespace

void write_avol(const fs::path& raw_path, const AvolHeader& header, std::span<const double> values) {
    if (header.depth * header.height * header.width != values.size()) {
        throw DimensionError("write_avol: header extents do not match the sample count");
    }
    json side;
    side["format"] = "AVOL";
    side["depth"] = header.depth;
    side["height"] = header.height;
    side["width"] = header.width;
    side["spacing"] = {header.spacing.dz, header.spacing.dy, header.spacing.dx};
    side["intensity_domain"] = std::string(to_string(header.domain));
    side["dtype"] = "f64";
    side["byte_order"] = "little";
    side["data_file"] = raw_path.filename().string();
    if (!header.config_hash.empty()) side["config_hash"] = header.config_hash;
    if (!header.metadata.empty()) side["metadata"] = header.metadata;
    write_f64_le(raw_path, values);
    write_text(avol_sidecar(raw_path), side.dump(2) + "\n");
}

AvolData read_avol(const fs::path& path) {
    const fs::path raw = raw_from_any(path);
    json side;
    try {
        side = json::parse(read_text(avol_sidecar(raw)));
    } catch (const json::parse_error& e) {
        throw IoError("malformed AVOL sidecar for '" + raw.string() + "': " + e.what());
    }
    try {
        if (side.at("dtype").get<std::string>() != "f64") throw IoError("AVOL dtype must be f64");
        if (side.at("byte_order").get<std::string>() != "little") throw IoError("AVOL byte_order must be little");
        AvolData data;
        auto& h = data.header;
        h.depth = side.at("depth").get<std::size_t>();
        h.height = side.at("height").get<std::size_t>();
        h.width = side.at("width").get<std::size_t>();
        const auto& sp = side.at("spacing");
        h.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
        h.domain = parse_intensity_domain(side.at("intensity_domain").get<std::string>());
        if (side.contains("config_hash")) h.config_hash = side["config_hash"].get<std::string>();
        if (side.contains("metadata")) h.metadata = side["metadata"];
        data.values = read_f64_le(raw, h.depth * h.height * h.width);
        return data;
    } catch (const json::exception& e) {
        throw IoError("invalid AVOL sidecar for '" + raw.string() + "': " + e.what());
    }
}

void save_volume(const Volume& v, const fs::path& raw_path, const std::string& config_hash) {
    AvolHeader h;
    h.depth = v.depth();
    h.height = v.height();
    h.width = v.width();
    h.spacing = v.spacing();
    h.domain = v.domain();
    h.config_hash = config_hash;
    write_avol(raw_path, h, v.voxels());
}

Volume load_volume(const fs::path& path) {
    auto data = read_avol(path);
    const auto& h = data.header;
    return Volume(h.depth, h.height, h.width, std::move(data.values), h.spacing, h.domain);
}

}  // namespace acvtt
