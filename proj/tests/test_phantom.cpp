#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "slicewise/phantom.hpp"
#include "test_util.hpp"

using namespace slicewise;

namespace {

PhantomConfig base_config() {
    PhantomConfig cfg;
    cfg.n_studies = 10;
    cfg.positive_fraction = 0.3;
    cfg.slices = 4;
    cfg.height = 48;
    cfg.width = 48;
    cfg.sequences_per_view = 2;
    cfg.modality_mix = 0.4;
    cfg.seed = 21;
    return cfg;
}

}  // namespace

TEST_CASE("generated set has exact class counts and files that load back") {
    testutil::TempDir tmp("phantom");
    const PhantomConfig cfg = base_config();
    const PhantomSet set = generate_phantoms(cfg, tmp.path);

    int pos = 0, arth = 0;
    for (const auto& r : set.manifest.records) {
        if (r.label == Label::tear) ++pos;
        if (r.modality == Modality::arthrogram) ++arth;
    }
    CHECK(pos == 3);
    CHECK(arth == 4);
    CHECK(set.manifest.records.size() == 10);
    CHECK(set.manifest.series_count() == 10 * 3 * 2);

    for (const auto& r : set.manifest.records)
        for (const auto& s : r.series) {
            const VolumeScan v = read_volume(tmp.path / s.path);
            CHECK(v.series_id == s.series_id);
            CHECK(v.view == s.view);
            CHECK(v.modality == r.modality);
            CHECK((v.slices == 4 && v.height == 48 && v.width == 48));
        }
}

TEST_CASE("generation is byte-deterministic across directories") {
    testutil::TempDir a("phantom-a");
    testutil::TempDir b("phantom-b");
    const PhantomConfig cfg = base_config();
    const PhantomSet set = generate_phantoms(cfg, a.path);
    generate_phantoms(cfg, b.path);
    for (const auto& r : set.manifest.records)
        for (const auto& s : r.series)
            CHECK(bitwise_equal(read_volume(a.path / s.path), read_volume(b.path / s.path)));
}

TEST_CASE("provenance file re-renders every stored series exactly") {
    testutil::TempDir tmp("phantom-prov");
    const PhantomConfig cfg = base_config();
    generate_phantoms(cfg, tmp.path);

    std::ifstream in(tmp / "provenance.json");
    REQUIRE(in.good());
    nlohmann::json prov;
    in >> prov;
    const PhantomConfig rcfg = phantom_config_from_json(prov.at("config"));
    for (const auto& js : prov.at("studies")) {
        const PhantomStudyParams p = phantom_study_from_json(js);
        for (View view : rcfg.views_per_study)
            for (std::int64_t k = 0; k < rcfg.sequences_per_view; ++k) {
                const VolumeScan rendered = render_phantom_series(rcfg, p, view, k);
                const VolumeScan stored =
                    read_volume(tmp.path / (p.study_id + "/" + rendered.series_id + ".mvol"));
                CHECK(bitwise_equal(rendered, stored));
            }
    }
}

TEST_CASE("arthrogram ring carries twice the standard contrast") {
    PhantomConfig quiet = base_config();
    quiet.noise_sigma = 0.0;
    quiet.modality_mix = 0.5;
    const auto studies = plan_phantom_studies(quiet);
    const PhantomStudyParams* std_p = nullptr;
    const PhantomStudyParams* arth_p = nullptr;
    for (const auto& p : studies) {
        if (p.modality == Modality::standard && !std_p) std_p = &p;
        if (p.modality == Modality::arthrogram && !arth_p) arth_p = &p;
    }
    REQUIRE((std_p && arth_p));
    auto ring_max = [&](const PhantomStudyParams& p) {
        const VolumeScan v = render_phantom_series(quiet, p, View::axial, 0);
        float mx = 0;
        for (float x : v.voxels) mx = std::max(mx, x);
        return mx;
    };
    CHECK(std::abs(ring_max(*std_p) - 0.4f) < 1e-6f);
    CHECK(std::abs(ring_max(*arth_p) - 0.6f) < 1e-6f);
}

TEST_CASE("notch darkens the lower-left quadrant for positives") {
    PhantomConfig quiet = base_config();
    quiet.noise_sigma = 0.0;
    quiet.modality_mix = 0.0;
    quiet.defect_contrast = 0.3;
    const auto studies = plan_phantom_studies(quiet);
    double pos_mean = 0, neg_mean = 0;
    int np = 0, nn = 0;
    for (const auto& p : studies) {
        const VolumeScan v = render_phantom_series(quiet, p, View::axial, 0);
        KahanSum s;
        std::int64_t cnt = 0;
        for (std::int64_t sl = 0; sl < v.slices; ++sl)
            for (std::int64_t h = v.height / 2; h < v.height; ++h)
                for (std::int64_t w = 0; w < v.width / 2; ++w) {
                    s.add(v.at(sl, h, w));
                    ++cnt;
                }
        const double m = s.value() / static_cast<double>(cnt);
        if (p.label == 1) {
            pos_mean += m;
            ++np;
        } else {
            neg_mean += m;
            ++nn;
        }
    }
    REQUIRE(np > 0);
    REQUIRE(nn > 0);
    CHECK(pos_mean / np < neg_mean / nn - 0.001);
}

TEST_CASE("zero contrast renders label-blind volumes") {
    PhantomConfig null_cfg = base_config();
    null_cfg.noise_sigma = 0.0;
    null_cfg.defect_contrast = 0.0;
    for (const auto& p : plan_phantom_studies(null_cfg)) {
        PhantomStudyParams flipped = p;
        flipped.label = 1 - p.label;
        const VolumeScan a = render_phantom_series(null_cfg, p, View::axial, 0);
        const VolumeScan b = render_phantom_series(null_cfg, flipped, View::axial, 0);
        CHECK(a.voxels == b.voxels);
    }
}

TEST_CASE("config validation rejects degenerate setups") {
    PhantomConfig bad = base_config();
    bad.n_studies = 2;
    bad.positive_fraction = 0.1;  // rounds to zero positives
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = base_config();
    bad.height = 8;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = base_config();
    bad.modality_mix = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = base_config();
    bad.defect_contrast = -0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = base_config();
    bad.views_per_study = {};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
