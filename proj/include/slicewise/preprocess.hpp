#pragma once

// Preprocessing chain: in-plane resize to 400x400 with a 224x224 center
// crop, per-(sequence type, fat saturation) standardization fitted on the
// training split only, [0,1] scaling, and training-time augmentation.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/manifest.hpp"
#include "slicewise/volume.hpp"

namespace slicewise {

inline constexpr std::int64_t kResizeTo = 400;
inline constexpr std::int64_t kCropTo = 224;
inline constexpr std::int64_t kCropOffset = (kResizeTo - kCropTo) / 2;  // 88

// ---------------------------------------------------------------------------
// Resize + crop
// ---------------------------------------------------------------------------

namespace detail {

// bilinear sample with edge clamping; src coordinate convention maps pixel
// centers, dst center i -> (i + 0.5) * scale - 0.5
inline float bilinear_at(const float* plane, std::int64_t H, std::int64_t W, double y, double x) {
    const double yc = clampd(y, 0.0, static_cast<double>(H - 1));
    const double xc = clampd(x, 0.0, static_cast<double>(W - 1));
    const std::int64_t y0 = static_cast<std::int64_t>(yc);
    const std::int64_t x0 = static_cast<std::int64_t>(xc);
    const std::int64_t y1 = std::min(y0 + 1, H - 1);
    const std::int64_t x1 = std::min(x0 + 1, W - 1);
    const double fy = yc - static_cast<double>(y0);
    const double fx = xc - static_cast<double>(x0);
    const double a = plane[y0 * W + x0], b = plane[y0 * W + x1];
    const double c = plane[y1 * W + x0], d = plane[y1 * W + x1];
    const double top = a + (b - a) * fx;
    const double bot = c + (d - c) * fx;
    return static_cast<float>(top + (bot - top) * fy);
}

}  // namespace detail

// Resizes each slice to 400x400 and center-crops to 224x224 in one pass:
// only the cropped region is ever sampled, which is bit-identical to
// resizing fully and then cropping.
inline VolumeScan resize_and_crop(const VolumeScan& scan) {
    scan.validate();
    VolumeScan out = make_volume(scan.slices, kCropTo, kCropTo);
    out.view = scan.view;
    out.sequence_type = scan.sequence_type;
    out.fat_sat = scan.fat_sat;
    out.modality = scan.modality;
    out.series_id = scan.series_id;
    out.study_id = scan.study_id;
    out.side = scan.side;
    const double sy = static_cast<double>(scan.height) / static_cast<double>(kResizeTo);
    const double sx = static_cast<double>(scan.width) / static_cast<double>(kResizeTo);
    for (std::int64_t s = 0; s < scan.slices; ++s) {
        const float* src = scan.voxels.data() + s * scan.height * scan.width;
        float* dst = out.voxels.data() + s * kCropTo * kCropTo;
        for (std::int64_t r = 0; r < kCropTo; ++r) {
            const double y = (static_cast<double>(r + kCropOffset) + 0.5) * sy - 0.5;
            for (std::int64_t c = 0; c < kCropTo; ++c) {
                const double x = (static_cast<double>(c + kCropOffset) + 0.5) * sx - 0.5;
                dst[r * kCropTo + c] = detail::bilinear_at(src, scan.height, scan.width, y, x);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Intensity statistics
// ---------------------------------------------------------------------------

struct IntensityStats {
    struct KeyStats {
        double mean = 0.0;
        double std = 1.0;
        std::int64_t n = 0;
    };
    std::map<std::string, KeyStats> by_key;

    static std::string key_for(SequenceType seq, bool fat_sat) {
        return to_string(seq) + "|fs=" + (fat_sat ? "true" : "false");
    }

    const KeyStats& at_key(const std::string& key) const {
        auto it = by_key.find(key);
        if (it == by_key.end())
            throw MissingStatsError("no intensity statistics for key \"" + key +
                                    "\" (was it absent from the training split?)");
        return it->second;
    }
};

using ScanSource = std::function<VolumeScan(const StudyRecord&, const SeriesRef&)>;

// Population mean/std per key over training-split voxels only. Kahan
// compensation keeps the result independent of accumulation order well
// below the 1e-9 contract.
inline IntensityStats fit_intensity_stats(const DatasetManifest& manifest, const ScanSource& source,
                                          std::vector<std::string>* warnings = nullptr) {
    struct Acc {
        KahanSum sum, sumsq;
        std::int64_t n = 0;
    };
    std::map<std::string, Acc> acc;
    std::map<std::string, bool> seen_anywhere;
    for (const auto& rec : manifest.records)
        for (const auto& series : rec.series)
            seen_anywhere[IntensityStats::key_for(series.sequence_type, series.fat_sat)] = true;

    for (const auto& rec : manifest.records) {
        if (rec.split != Split::train) continue;
        for (const auto& series : rec.series) {
            const VolumeScan scan = source(rec, series);
            Acc& a = acc[IntensityStats::key_for(series.sequence_type, series.fat_sat)];
            for (const float v : scan.voxels) {
                const double d = static_cast<double>(v);
                a.sum.add(d);
                a.sumsq.add(d * d);
            }
            a.n += scan.numel();
        }
    }

    IntensityStats stats;
    for (const auto& [key, present] : seen_anywhere) {
        auto it = acc.find(key);
        if (it == acc.end() || it->second.n == 0)
            throw MissingStatsError("intensity key \"" + key +
                                    "\" appears in the manifest but has no training voxels");
        const Acc& a = it->second;
        const double mean = a.sum.value() / static_cast<double>(a.n);
        const double var =
            std::max(0.0, a.sumsq.value() / static_cast<double>(a.n) - mean * mean);
        double sd = std::sqrt(var);
        if (!(sd > 0.0)) {
            if (warnings)
                warnings->push_back("intensity key \"" + key +
                                    "\" has zero variance in the training split; using std = 1");
            sd = 1.0;
        }
        stats.by_key[key] = IntensityStats::KeyStats{mean, sd, a.n};
    }
    return stats;
}

// z-score with the key's training statistics, clamp to +-4, map to [0,1]
inline VolumeScan standardize_and_scale(const VolumeScan& scan, const IntensityStats& stats) {
    const auto& ks = stats.at_key(IntensityStats::key_for(scan.sequence_type, scan.fat_sat));
    VolumeScan out = scan;
    for (auto& v : out.voxels) {
        const double z = clampd((static_cast<double>(v) - ks.mean) / ks.std, -4.0, 4.0);
        v = static_cast<float>((z + 4.0) / 8.0);
    }
    return out;
}

inline nlohmann::json stats_to_json(const IntensityStats& stats) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, ks] : stats.by_key) {
        j[key] = {{"mean", ks.mean}, {"std", ks.std}, {"n", ks.n}};
    }
    return j;
}

inline IntensityStats stats_from_json(const nlohmann::json& j) {
    IntensityStats stats;
    if (!j.is_object()) throw FormatError("intensity statistics JSON must be an object");
    for (const auto& [key, v] : j.items()) {
        IntensityStats::KeyStats ks;
        ks.mean = v.at("mean").get<double>();
        ks.std = v.at("std").get<double>();
        ks.n = v.at("n").get<std::int64_t>();
        if (!(ks.std > 0)) throw FormatError("intensity key \"" + key + "\" has non-positive std");
        stats.by_key[key] = ks;
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

enum class AugmentScope { PositiveOnly, All };

inline std::string to_string(AugmentScope s) {
    return s == AugmentScope::PositiveOnly ? "positive_only" : "all";
}

inline AugmentScope parse_augment_scope(const std::string& s) {
    if (s == "positive_only") return AugmentScope::PositiveOnly;
    if (s == "all") return AugmentScope::All;
    throw FormatError("unknown augmentation scope: \"" + s + "\"");
}

struct AugmentationConfig {
    int copies_per_scan = 10;
    double rotation_limit = 15.0;     // degrees
    double translation_limit = 0.1;   // fraction of height/width
    double scale_low = 0.9;
    double scale_high = 1.1;
    double flip_probability = 0.5;    // horizontal only
    double noise_sigma = 0.01;        // in normalized intensity units
    AugmentScope scope = AugmentScope::PositiveOnly;
    std::uint64_t seed = 0;

    void validate() const {
        if (copies_per_scan < 0) throw ConfigError("copies_per_scan must be >= 0");
        if (rotation_limit < 0) throw ConfigError("rotation_limit must be >= 0");
        if (translation_limit < 0) throw ConfigError("translation_limit must be >= 0");
        if (!(scale_low > 0) || !(scale_high > 0) || scale_low > scale_high)
            throw ConfigError("scale range must satisfy 0 < low <= high");
        if (flip_probability < 0 || flip_probability > 1)
            throw ConfigError("flip_probability must be in [0,1]");
        if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
    }
};

namespace detail {

struct SliceTransform {
    double cos_t = 1.0, sin_t = 0.0;
    double inv_scale = 1.0;
    double tx = 0.0, ty = 0.0;
    bool flip = false;
};

// inverse-map bilinear warp with zero fill outside the source
inline void warp_slice(const float* src, float* dst, std::int64_t H, std::int64_t W,
                       const SliceTransform& t) {
    const double cy = static_cast<double>(H - 1) / 2.0;
    const double cx = static_cast<double>(W - 1) / 2.0;
    for (std::int64_t r = 0; r < H; ++r) {
        const double yr = static_cast<double>(r) - cy - t.ty;
        for (std::int64_t c = 0; c < W; ++c) {
            const double xr = static_cast<double>(c) - cx - t.tx;
            // undo rotation and scale about the center
            double sxr = (xr * t.cos_t + yr * t.sin_t) * t.inv_scale;
            const double syr = (-xr * t.sin_t + yr * t.cos_t) * t.inv_scale;
            if (t.flip) sxr = -sxr;
            const double sy = cy + syr;
            const double sx = cx + sxr;
            float v = 0.0f;
            if (sy >= 0.0 && sy <= static_cast<double>(H - 1) && sx >= 0.0 &&
                sx <= static_cast<double>(W - 1)) {
                v = bilinear_at(src, H, W, sy, sx);
            }
            dst[r * W + c] = v;
        }
    }
}

}  // namespace detail

// Sampled copies of a preprocessed scan. The geometric transform is drawn
// once per copy and shared by every slice; noise is drawn per voxel. Copy k
// of a given series is reproducible in isolation from (seed, series_id, k).
inline std::vector<VolumeScan> augment(const VolumeScan& scan, const AugmentationConfig& cfg) {
    cfg.validate();
    scan.validate();
    if (scan.height != kCropTo || scan.width != kCropTo)
        throw ValidationError("augment expects preprocessed " + std::to_string(kCropTo) + "x" +
                              std::to_string(kCropTo) + " slices, got scan " + scan.series_id);
    std::vector<VolumeScan> copies;
    copies.reserve(static_cast<std::size_t>(cfg.copies_per_scan));
    const std::uint64_t scan_seed = mix_seed(cfg.seed, scan.series_id);
    for (int k = 0; k < cfg.copies_per_scan; ++k) {
        Rng rng(mix_seed(scan_seed, static_cast<std::uint64_t>(k)));
        detail::SliceTransform t;
        const double theta = rng.uniform(-cfg.rotation_limit, cfg.rotation_limit) * M_PI / 180.0;
        t.cos_t = std::cos(theta);
        t.sin_t = std::sin(theta);
        t.tx = rng.uniform(-cfg.translation_limit, cfg.translation_limit) *
               static_cast<double>(scan.width);
        t.ty = rng.uniform(-cfg.translation_limit, cfg.translation_limit) *
               static_cast<double>(scan.height);
        t.inv_scale = 1.0 / rng.uniform(cfg.scale_low, cfg.scale_high);
        t.flip = rng.bernoulli(cfg.flip_probability);

        VolumeScan copy = scan;
        copy.series_id = scan.series_id + "-aug" + std::to_string(k);
        const std::int64_t plane = scan.height * scan.width;
        for (std::int64_t s = 0; s < scan.slices; ++s)
            detail::warp_slice(scan.voxels.data() + s * plane, copy.voxels.data() + s * plane,
                               scan.height, scan.width, t);
        if (cfg.noise_sigma > 0) {
            for (auto& v : copy.voxels)
                v = static_cast<float>(static_cast<double>(v) + rng.normal() * cfg.noise_sigma);
        }
        for (auto& v : copy.voxels) v = static_cast<float>(clampd(v, 0.0, 1.0));
        copies.push_back(std::move(copy));
    }
    return copies;
}

}  // namespace slicewise
