#pragma once

// VolumeScan: one MRI series as a dense S x H x W voxel grid plus the
// acquisition metadata the pipeline consumes. Persisted as MVOL: a
// single-line UTF-8 JSON header terminated by '\n', followed by exactly
// S*H*W little-endian float32 values in slice-major order.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slicewise/common.hpp"

namespace slicewise {

struct VolumeScan {
    std::int64_t slices = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> voxels;  // slice-major: [s][h][w]

    View view = View::sagittal;
    SequenceType sequence_type = SequenceType::T2;
    bool fat_sat = false;
    Modality modality = Modality::standard;
    std::string series_id;
    std::string study_id;
    Side side = Side::right;

    std::int64_t numel() const { return slices * height * width; }

    float& at(std::int64_t s, std::int64_t h, std::int64_t w) {
        return voxels[(s * height + h) * width + w];
    }
    float at(std::int64_t s, std::int64_t h, std::int64_t w) const {
        return voxels[(s * height + h) * width + w];
    }

    // Throws ValidationError unless S,H,W >= 1, the payload matches the
    // dims, and every voxel is finite.
    void validate() const {
        if (slices < 1 || height < 1 || width < 1)
            throw ValidationError("volume dims must be at least 1x1x1, got " +
                                  std::to_string(slices) + "x" + std::to_string(height) +
                                  "x" + std::to_string(width));
        if (static_cast<std::int64_t>(voxels.size()) != numel())
            throw ValidationError("voxel count " + std::to_string(voxels.size()) +
                                  " does not match dims " + std::to_string(numel()));
        for (float v : voxels)
            if (!std::isfinite(v))
                throw ValidationError("volume '" + series_id + "' contains non-finite voxels");
    }
};

inline VolumeScan make_volume(std::int64_t s, std::int64_t h, std::int64_t w,
                              float fill = 0.0f) {
    VolumeScan v;
    v.slices = s;
    v.height = h;
    v.width = w;
    v.voxels.assign(static_cast<std::size_t>(s * h * w), fill);
    return v;
}

// ---------------------------------------------------------------------------
// MVOL container
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json mvol_header(const VolumeScan& scan) {
    nlohmann::json j;
    j["dims"] = {scan.slices, scan.height, scan.width};
    j["dtype"] = "f32le";
    j["view"] = to_string(scan.view);
    j["sequence_type"] = to_string(scan.sequence_type);
    j["fat_sat"] = scan.fat_sat;
    j["modality"] = to_string(scan.modality);
    j["series_id"] = scan.series_id;
    j["study_id"] = scan.study_id;
    j["side"] = to_string(scan.side);
    return j;
}

template <typename T>
T header_field(const nlohmann::json& j, const char* name, const std::string& path) {
    if (!j.contains(name))
        throw FormatError("MVOL header in '" + path + "' is missing field '" + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw FormatError("MVOL header in '" + path + "' has invalid field '" + name + "'");
    }
}

}  // namespace detail

inline void write_volume(const VolumeScan& scan, const std::filesystem::path& path) {
    scan.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open '" + path.string() + "' for writing");
    // nlohmann serializes object keys sorted, so identical scans produce
    // identical header bytes.
    const std::string header = detail::mvol_header(scan).dump();
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.put('\n');
    out.write(reinterpret_cast<const char*>(scan.voxels.data()),
              static_cast<std::streamsize>(scan.voxels.size() * sizeof(float)));
    if (!out)
        throw IoError("write failed for '" + path.string() + "'");
}

inline VolumeScan read_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open '" + path.string() + "' for reading");

    std::string header_line;
    if (!std::getline(in, header_line))
        throw FormatError("'" + path.string() + "' has no MVOL header line");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "' has a malformed MVOL header: " + e.what());
    }
    if (!j.is_object())
        throw FormatError("'" + path.string() + "' MVOL header is not a JSON object");

    const std::string p = path.string();
    const auto dims = detail::header_field<std::vector<std::int64_t>>(j, "dims", p);
    if (dims.size() != 3 || dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw FormatError("MVOL header in '" + p + "' has invalid field 'dims'");
    const auto dtype = detail::header_field<std::string>(j, "dtype", p);
    if (dtype != "f32le")
        throw FormatError("MVOL header in '" + p + "' has invalid field 'dtype' (" + dtype + ")");

    VolumeScan scan;
    scan.slices = dims[0];
    scan.height = dims[1];
    scan.width = dims[2];
    scan.view = parse_view(detail::header_field<std::string>(j, "view", p));
    scan.sequence_type = parse_sequence_type(detail::header_field<std::string>(j, "sequence_type", p));
    scan.fat_sat = detail::header_field<bool>(j, "fat_sat", p);
    scan.modality = parse_modality(detail::header_field<std::string>(j, "modality", p));
    scan.series_id = detail::header_field<std::string>(j, "series_id", p);
    scan.study_id = detail::header_field<std::string>(j, "study_id", p);
    scan.side = parse_side(detail::header_field<std::string>(j, "side", p));

    const std::int64_t n = scan.numel();
    scan.voxels.resize(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(scan.voxels.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
        throw TruncationError("'" + p + "' payload holds " +
                              std::to_string(in.gcount() / static_cast<std::streamsize>(sizeof(float))) +
                              " voxels but header declares " + std::to_string(n));
    // trailing bytes mean the header lied about dims
    char extra;
    if (in.read(&extra, 1))
        throw TruncationError("'" + p + "' payload is longer than the declared " +
                              std::to_string(n) + " voxels");

    scan.validate();
    return scan;
}

inline bool bitwise_equal(const VolumeScan& a, const VolumeScan& b) {
    if (a.slices != b.slices || a.height != b.height || a.width != b.width) return false;
    if (a.view != b.view || a.sequence_type != b.sequence_type || a.fat_sat != b.fat_sat ||
        a.modality != b.modality || a.series_id != b.series_id || a.study_id != b.study_id ||
        a.side != b.side)
        return false;
    return std::memcmp(a.voxels.data(), b.voxels.data(),
                       a.voxels.size() * sizeof(float)) == 0;
}

}  // namespace slicewise
