#pragma once

// Synthetic labeled volumes: a bright ring (proxy for the labrum) on a dark
// background, with positives carrying a darker notch on the ring's
// anterior-inferior arc, consistent across a study's views. Arthrogram
// studies double the ring/background contrast. Everything derives from the
// config seed, and a provenance file records enough to re-render any study
// byte for byte.
//
// Image convention: rows grow inferior (down), columns grow anterior (left
// is anterior). The notch angle is drawn from the lower-left quadrant.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/manifest.hpp"
#include "slicewise/volume.hpp"

namespace slicewise {

struct PhantomConfig {
    std::int64_t n_studies = 20;
    double positive_fraction = 0.5;
    std::int64_t slices = 8;
    std::int64_t height = 64;
    std::int64_t width = 64;
    std::vector<View> views_per_study = {View::sagittal, View::axial, View::coronal};
    std::int64_t sequences_per_view = 1;
    double defect_size = 3.0;      // notch radius, voxels
    double defect_contrast = 0.3;  // intensity removed inside the notch
    double noise_sigma = 0.02;
    double modality_mix = 0.0;  // fraction of studies rendered as arthrogram
    std::uint64_t seed = 0;

    std::int64_t positive_count() const {
        return static_cast<std::int64_t>(
            std::llround(positive_fraction * static_cast<double>(n_studies)));
    }

    void validate() const {
        if (n_studies < 2) throw ConfigError("n_studies must be >= 2");
        if (!(positive_fraction > 0.0 && positive_fraction < 1.0))
            throw ConfigError("positive_fraction must lie in (0,1)");
        const std::int64_t pos = positive_count();
        if (pos < 1 || pos > n_studies - 1)
            throw ConfigError("positive_fraction " + std::to_string(positive_fraction) + " of " +
                              std::to_string(n_studies) +
                              " studies rounds to a single-class dataset");
        if (slices < 1) throw ConfigError("slices must be >= 1");
        if (height < 16 || width < 16)
            throw ConfigError("height and width must be >= 16 to fit the ring");
        if (views_per_study.empty()) throw ConfigError("views_per_study must be non-empty");
        for (std::size_t i = 0; i < views_per_study.size(); ++i)
            for (std::size_t j = i + 1; j < views_per_study.size(); ++j)
                if (views_per_study[i] == views_per_study[j])
                    throw ConfigError("views_per_study contains " +
                                      to_string(views_per_study[i]) + " twice");
        if (sequences_per_view < 1) throw ConfigError("sequences_per_view must be >= 1");
        if (!(defect_size >= 1.0)) throw ConfigError("defect_size must be >= 1 voxel");
        if (defect_contrast < 0.0) throw ConfigError("defect_contrast must be >= 0");
        if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
        if (modality_mix < 0.0 || modality_mix > 1.0)
            throw ConfigError("modality_mix must lie in [0,1]");
    }
};

// Everything study-specific needed to reproduce its voxels exactly.
struct PhantomStudyParams {
    std::string study_id;
    int label = 0;
    Modality modality = Modality::standard;
    Side side = Side::right;
    double center_r = 0.0;  // ring center, voxel coordinates
    double center_c = 0.0;
    double radius = 0.0;     // ring radius, voxels
    double thickness = 0.0;  // radial band width, voxels
    double notch_theta = 0.0;
    std::uint64_t noise_seed = 0;
};

namespace detail {

constexpr double kBackground = 0.2;
constexpr double kRingContrast = 0.2;  // arthrogram doubles this

inline double ring_contrast_for(Modality m) {
    return m == Modality::arthrogram ? 2.0 * kRingContrast : kRingContrast;
}

}  // namespace detail

// Deterministic voxel renderer for one series of a study. The ring shrinks
// toward the first and last slices (spherical profile); the notch tracks it.
inline VolumeScan render_phantom_series(const PhantomConfig& cfg,
                                        const PhantomStudyParams& params, View view,
                                        std::int64_t sequence_index) {
    VolumeScan v = make_volume(cfg.slices, cfg.height, cfg.width);
    v.study_id = params.study_id;
    v.series_id = params.study_id + "-" + to_string(view) + "-" +
                  std::to_string(sequence_index);
    v.view = view;
    v.sequence_type = sequence_index % 2 == 0 ? SequenceType::T2 : SequenceType::PD;
    v.fat_sat = sequence_index % 2 != 0;
    v.modality = params.modality;
    v.side = params.side;

    const double ring = detail::kBackground + detail::ring_contrast_for(params.modality);
    Rng noise(mix_seed(params.noise_seed,
                       to_string(view) + ":" + std::to_string(sequence_index)));
    const double half_span = static_cast<double>(cfg.slices - 1) / 2.0;
    for (std::int64_t s = 0; s < cfg.slices; ++s) {
        const double z = cfg.slices == 1
                             ? 0.0
                             : (static_cast<double>(s) - half_span) / (half_span + 1.0);
        const double slice_radius = params.radius * std::sqrt(1.0 - z * z);
        const double notch_r = params.center_r + slice_radius * std::sin(params.notch_theta);
        const double notch_c = params.center_c + slice_radius * std::cos(params.notch_theta);
        for (std::int64_t h = 0; h < cfg.height; ++h)
            for (std::int64_t w = 0; w < cfg.width; ++w) {
                const double dr = static_cast<double>(h) - params.center_r;
                const double dc = static_cast<double>(w) - params.center_c;
                const double dist = std::sqrt(dr * dr + dc * dc);
                double value = detail::kBackground;
                if (std::abs(dist - slice_radius) <= params.thickness / 2.0) value = ring;
                if (params.label == 1) {
                    const double nr = static_cast<double>(h) - notch_r;
                    const double nc = static_cast<double>(w) - notch_c;
                    if (std::sqrt(nr * nr + nc * nc) <= cfg.defect_size)
                        value -= cfg.defect_contrast;
                }
                value += noise.normal(0.0, cfg.noise_sigma);
                v.at(s, h, w) = static_cast<float>(clampd(value, 0.0, 1.0));
            }
    }
    return v;
}

inline std::vector<PhantomStudyParams> plan_phantom_studies(const PhantomConfig& cfg) {
    cfg.validate();
    const std::int64_t n_pos = cfg.positive_count();
    std::vector<int> labels(static_cast<std::size_t>(cfg.n_studies), 0);
    for (std::int64_t i = 0; i < n_pos; ++i) labels[static_cast<std::size_t>(i)] = 1;
    Rng label_rng(mix_seed(cfg.seed, "labels"));
    label_rng.shuffle(labels);

    const std::int64_t n_arth = static_cast<std::int64_t>(
        std::llround(cfg.modality_mix * static_cast<double>(cfg.n_studies)));
    std::vector<int> arth(static_cast<std::size_t>(cfg.n_studies), 0);
    for (std::int64_t i = 0; i < n_arth; ++i) arth[static_cast<std::size_t>(i)] = 1;
    Rng arth_rng(mix_seed(cfg.seed, "modality"));
    arth_rng.shuffle(arth);

    std::vector<PhantomStudyParams> out;
    out.reserve(static_cast<std::size_t>(cfg.n_studies));
    // radius + jitter + thickness stays inside the central 56% of the frame,
    // the region the preprocessing crop retains
    const double base_radius = 0.19 * static_cast<double>(std::min(cfg.height, cfg.width));
    for (std::int64_t i = 0; i < cfg.n_studies; ++i) {
        PhantomStudyParams p;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "ph%04lld", static_cast<long long>(i));
        p.study_id = buf;
        p.label = labels[static_cast<std::size_t>(i)];
        p.modality = arth[static_cast<std::size_t>(i)] ? Modality::arthrogram : Modality::standard;
        Rng rng(mix_seed(cfg.seed, "study:" + p.study_id));
        p.side = rng.bernoulli(0.5) ? Side::left : Side::right;
        p.center_r = (static_cast<double>(cfg.height) - 1.0) / 2.0 + rng.uniform(-2.0, 2.0);
        p.center_c = (static_cast<double>(cfg.width) - 1.0) / 2.0 + rng.uniform(-2.0, 2.0);
        p.radius = base_radius * rng.uniform(0.92, 1.08);
        p.thickness = 0.06 * static_cast<double>(std::min(cfg.height, cfg.width)) *
                      rng.uniform(0.85, 1.15);
        // lower-left arc: sin > 0 (inferior), cos < 0 (anterior)
        p.notch_theta = rng.uniform(0.58 * M_PI, 0.92 * M_PI);
        p.noise_seed = mix_seed(cfg.seed, "noise:" + p.study_id);
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Provenance
// ---------------------------------------------------------------------------

inline nlohmann::json phantom_config_to_json(const PhantomConfig& cfg) {
    nlohmann::json j;
    j["n_studies"] = cfg.n_studies;
    j["positive_fraction"] = cfg.positive_fraction;
    j["dims"] = {cfg.slices, cfg.height, cfg.width};
    nlohmann::json views = nlohmann::json::array();
    for (View v : cfg.views_per_study) views.push_back(to_string(v));
    j["views_per_study"] = views;
    j["sequences_per_view"] = cfg.sequences_per_view;
    j["defect_size"] = cfg.defect_size;
    j["defect_contrast"] = cfg.defect_contrast;
    j["noise_sigma"] = cfg.noise_sigma;
    j["modality_mix"] = cfg.modality_mix;
    j["seed"] = cfg.seed;
    return j;
}

inline PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
    PhantomConfig cfg;
    try {
        cfg.n_studies = j.at("n_studies").get<std::int64_t>();
        cfg.positive_fraction = j.at("positive_fraction").get<double>();
        const auto dims = j.at("dims").get<std::vector<std::int64_t>>();
        if (dims.size() != 3) throw FormatError("phantom dims must be [S,H,W]");
        cfg.slices = dims[0];
        cfg.height = dims[1];
        cfg.width = dims[2];
        cfg.views_per_study.clear();
        for (const auto& v : j.at("views_per_study"))
            cfg.views_per_study.push_back(parse_view(v.get<std::string>()));
        cfg.sequences_per_view = j.at("sequences_per_view").get<std::int64_t>();
        cfg.defect_size = j.at("defect_size").get<double>();
        cfg.defect_contrast = j.at("defect_contrast").get<double>();
        cfg.noise_sigma = j.at("noise_sigma").get<double>();
        cfg.modality_mix = j.at("modality_mix").get<double>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed phantom config JSON: ") + e.what());
    }
    return cfg;
}

inline nlohmann::json phantom_study_to_json(const PhantomStudyParams& p) {
    nlohmann::json j;
    j["study_id"] = p.study_id;
    j["label"] = p.label;
    j["modality"] = to_string(p.modality);
    j["side"] = to_string(p.side);
    j["center_r"] = p.center_r;
    j["center_c"] = p.center_c;
    j["radius"] = p.radius;
    j["thickness"] = p.thickness;
    j["notch_theta"] = p.notch_theta;
    j["noise_seed"] = p.noise_seed;
    return j;
}

inline PhantomStudyParams phantom_study_from_json(const nlohmann::json& j) {
    PhantomStudyParams p;
    try {
        p.study_id = j.at("study_id").get<std::string>();
        p.label = j.at("label").get<int>();
        p.modality = parse_modality(j.at("modality").get<std::string>());
        p.side = parse_side(j.at("side").get<std::string>());
        p.center_r = j.at("center_r").get<double>();
        p.center_c = j.at("center_c").get<double>();
        p.radius = j.at("radius").get<double>();
        p.thickness = j.at("thickness").get<double>();
        p.notch_theta = j.at("notch_theta").get<double>();
        p.noise_seed = j.at("noise_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed phantom study JSON: ") + e.what());
    }
    return p;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct PhantomSet {
    DatasetManifest manifest;
    std::vector<PhantomStudyParams> studies;
};

// Writes MVOL files under out_dir/<study_id>/, a manifest.csv, and
// provenance.json. Paths in the manifest are relative to out_dir.
inline PhantomSet generate_phantoms(const PhantomConfig& cfg,
                                    const std::filesystem::path& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    PhantomSet set;
    set.studies = plan_phantom_studies(cfg);
    for (const auto& p : set.studies) {
        StudyRecord rec;
        rec.study_id = p.study_id;
        rec.patient_id = "pat-" + p.study_id;
        rec.label = p.label == 1 ? Label::tear : Label::no_tear;
        rec.modality = p.modality;
        rec.split = Split::unassigned;
        std::filesystem::create_directories(out_dir / p.study_id);
        for (View view : cfg.views_per_study)
            for (std::int64_t k = 0; k < cfg.sequences_per_view; ++k) {
                const VolumeScan scan = render_phantom_series(cfg, p, view, k);
                const std::string rel = p.study_id + "/" + scan.series_id + ".mvol";
                write_volume(scan, out_dir / rel);
                SeriesRef ref;
                ref.path = rel;
                ref.series_id = scan.series_id;
                ref.view = view;
                ref.sequence_type = scan.sequence_type;
                ref.fat_sat = scan.fat_sat;
                rec.series.push_back(ref);
            }
        set.manifest.records.push_back(rec);
    }
    set.manifest.validate();
    write_manifest(set.manifest, out_dir / "manifest.csv");

    nlohmann::json prov;
    prov["config"] = phantom_config_to_json(cfg);
    nlohmann::json studies = nlohmann::json::array();
    for (const auto& p : set.studies) studies.push_back(phantom_study_to_json(p));
    prov["studies"] = studies;
    std::ofstream out(out_dir / "provenance.json", std::ios::trunc);
    if (!out) throw IoError("cannot open provenance file for writing");
    out << prov.dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("short write on provenance file");
    return set;
}

}  // namespace slicewise
