#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "haicomm/common.hpp"

namespace haicomm {

// 3-d scalar grid with voxel spacing and a signed axis-permutation code
// relative to RAS. Storage is row-major over (axis0, axis1, axis2) with the
// last axis fastest, matching the .vol on-disk layout.
struct Volume {
    std::array<std::size_t, 3> extents{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string orientation = "RAS";
    std::array<std::int64_t, 3> center{0, 0, 0};  // reference voxel for cropping
    std::vector<float> data;

    std::size_t numel() const { return extents[0] * extents[1] * extents[2]; }

    std::size_t index(std::size_t i0, std::size_t i1, std::size_t i2) const {
        return (i0 * extents[1] + i1) * extents[2] + i2;
    }

    float& at(std::size_t i0, std::size_t i1, std::size_t i2) { return data[index(i0, i1, i2)]; }
    float at(std::size_t i0, std::size_t i1, std::size_t i2) const { return data[index(i0, i1, i2)]; }

    static Volume make(std::array<std::size_t, 3> extents, std::array<double, 3> spacing,
                       std::string orientation = "RAS") {
        if (extents[0] < 1 || extents[1] < 1 || extents[2] < 1)
            throw ConfigError("volume extents must all be >= 1");
        if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
            throw ConfigError("volume spacing must be positive");
        Volume v;
        v.extents = extents;
        v.spacing = spacing;
        v.orientation = std::move(orientation);
        v.data.assign(v.numel(), 0.0f);
        return v;
    }
};

// <name>.vol holds little-endian raw float32; <name>.vol.json carries the
// geometry sidecar.
inline void save_volume(const Volume& v, const std::filesystem::path& path) {
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write volume: " + path.string());
        out.write(reinterpret_cast<const char*>(v.data.data()),
                  static_cast<std::streamsize>(v.data.size() * sizeof(float)));
        if (!out) throw IoError("short write on volume: " + path.string());
    }
    nlohmann::ordered_json side = {{"shape", v.extents},
                                   {"spacing_mm", v.spacing},
                                   {"orientation", v.orientation},
                                   {"center_voxel", v.center}};
    std::ofstream meta(path.string() + ".json", std::ios::trunc);
    if (!meta) throw IoError("cannot write volume sidecar: " + path.string() + ".json");
    meta << side.dump(2) << '\n';
}

inline Volume load_volume(const std::filesystem::path& path) {
    const std::filesystem::path side_path = path.string() + ".json";
    std::ifstream meta(side_path);
    if (!meta) throw IoError("cannot open volume sidecar: " + side_path.string());
    nlohmann::json side;
    try {
        meta >> side;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("volume sidecar is not valid JSON (" + side_path.string() + "): " + e.what());
    }
    Volume v;
    try {
        v.extents = side.at("shape").get<std::array<std::size_t, 3>>();
        v.spacing = side.at("spacing_mm").get<std::array<double, 3>>();
        v.orientation = side.at("orientation").get<std::string>();
        v.center = side.at("center_voxel").get<std::array<std::int64_t, 3>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("volume sidecar missing fields (" + side_path.string() + "): " + e.what());
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open volume: " + path.string());
    v.data.resize(v.extents[0] * v.extents[1] * v.extents[2]);
    in.read(reinterpret_cast<char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    if (!in || in.gcount() != static_cast<std::streamsize>(v.data.size() * sizeof(float)))
        throw FormatError("volume data size does not match sidecar shape: " + path.string());
    return v;
}

}  // namespace haicomm
