#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "slicewise/preprocess.hpp"
#include "test_util.hpp"

using namespace slicewise;

TEST_CASE("geometry constants") {
    CHECK(kResizeTo == 400);
    CHECK(kCropTo == 224);
    CHECK(kCropOffset == 88);
}

TEST_CASE("resize_and_crop emits the fixed spatial extent") {
    for (auto [h, w] : std::vector<std::pair<std::int64_t, std::int64_t>>{
             {96, 80}, {400, 400}, {224, 224}, {512, 300}}) {
        VolumeScan v = make_volume(2, h, w, 0.3f);
        v.series_id = "s";
        VolumeScan out = resize_and_crop(v);
        CHECK(out.slices == 2);
        CHECK(out.height == kCropTo);
        CHECK(out.width == kCropTo);
        CHECK(out.series_id == "s");
    }
}

TEST_CASE("resize_and_crop is exact on constant and linear fields") {
    SECTION("constant field") {
        VolumeScan v = make_volume(1, 61, 87, 0.42f);
        VolumeScan out = resize_and_crop(v);
        for (float x : out.voxels) CHECK(x == Catch::Approx(0.42).margin(1e-6));
    }
    SECTION("linear ramp survives bilinear resampling") {
        // v(r, c) = a + b r + c c is reproduced exactly by bilinear
        // interpolation at interior sample points
        const std::int64_t H = 120, W = 150;
        VolumeScan v = make_volume(1, H, W);
        auto field = [](double r, double c) { return 0.2 + 0.003 * r + 0.001 * c; };
        for (std::int64_t r = 0; r < H; ++r)
            for (std::int64_t c = 0; c < W; ++c)
                v.voxels[static_cast<std::size_t>(r * W + c)] =
                    static_cast<float>(field(double(r), double(c)));
        VolumeScan out = resize_and_crop(v);
        const double sy = double(H) / double(kResizeTo), sx = double(W) / double(kResizeTo);
        for (std::int64_t r = 40; r < kCropTo - 40; r += 13)
            for (std::int64_t c = 40; c < kCropTo - 40; c += 17) {
                const double y = (double(r + kCropOffset) + 0.5) * sy - 0.5;
                const double x = (double(c + kCropOffset) + 0.5) * sx - 0.5;
                CHECK(out.at(0, r, c) == Catch::Approx(field(y, x)).margin(2e-5));
            }
    }
}

TEST_CASE("resize_and_crop keeps the central window") {
    // bright frame on the border, dark center: the crop sees only center
    VolumeScan v = make_volume(1, 100, 100, 1.0f);
    for (std::int64_t r = 25; r < 75; ++r)
        for (std::int64_t c = 25; c < 75; ++c) v.voxels[static_cast<std::size_t>(r * 100 + c)] = 0.0f;
    VolumeScan out = resize_and_crop(v);
    // the retained window spans the central 56% of the source: fully inside
    // the dark square, away from the blended edge
    for (std::int64_t r = 30; r < kCropTo - 30; ++r)
        for (std::int64_t c = 30; c < kCropTo - 30; ++c)
            CHECK(out.at(0, r, c) == 0.0f);
}

namespace {

DatasetManifest stats_manifest() {
    DatasetManifest m;
    auto add = [&m](const std::string& id, Split split, SequenceType seq, bool fs) {
        StudyRecord r;
        r.study_id = id;
        r.patient_id = "p-" + id;
        r.split = split;
        SeriesRef s;
        s.path = id + "/a.mvol";
        s.series_id = id + "-a";
        s.view = View::axial;
        s.sequence_type = seq;
        s.fat_sat = fs;
        r.series.push_back(s);
        m.records.push_back(r);
    };
    add("s1", Split::train, SequenceType::T2, false);
    add("s2", Split::train, SequenceType::T2, false);
    add("s3", Split::train, SequenceType::PD, true);
    add("s4", Split::val, SequenceType::T2, false);  // excluded from fitting
    return m;
}

ScanSource fixed_source(std::map<std::string, double> fills) {
    return [fills](const StudyRecord& r, const SeriesRef& s) {
        VolumeScan v = make_volume(1, 2, 2, static_cast<float>(fills.at(r.study_id)));
        v.study_id = r.study_id;
        v.series_id = s.series_id;
        v.sequence_type = s.sequence_type;
        v.fat_sat = s.fat_sat;
        return v;
    };
}

}  // namespace

TEST_CASE("intensity stats come from the training split only") {
    DatasetManifest m = stats_manifest();
    // T2 train voxels: four 1.0 and four 5.0 -> mean 3, population std 2
    auto src = fixed_source({{"s1", 1.0}, {"s2", 5.0}, {"s3", 7.0}, {"s4", 100.0}});
    std::vector<std::string> warnings;
    IntensityStats stats = fit_intensity_stats(m, src, &warnings);

    const auto& t2 = stats.at_key("T2|fs=false");
    CHECK(t2.mean == Catch::Approx(3.0).margin(1e-12));
    CHECK(t2.std == Catch::Approx(2.0).margin(1e-12));
    CHECK(t2.n == 8);

    // constant PD series degenerates; std falls back to 1 with a warning
    const auto& pd = stats.at_key("PD|fs=true");
    CHECK(pd.mean == Catch::Approx(7.0).margin(1e-12));
    CHECK(pd.std == 1.0);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("PD|fs=true") != std::string::npos);

    // a key with no voxels in train cannot be fitted at all
    DatasetManifest wider = m;
    auto& held_out = wider.records[3];
    held_out.series[0].sequence_type = SequenceType::STIR;
    CHECK_THROWS_AS(fit_intensity_stats(wider, src, nullptr), MissingStatsError);
}

TEST_CASE("stats json round trips") {
    IntensityStats s;
    s.by_key["T2|fs=false"] = {3.25, 1.5, 400};
    s.by_key["PD|fs=true"] = {-0.5, 2.0, 80};
    IntensityStats r = stats_from_json(stats_to_json(s));
    CHECK(r.by_key.size() == 2);
    CHECK(r.at_key("T2|fs=false").mean == 3.25);
    CHECK(r.at_key("T2|fs=false").std == 1.5);
    CHECK(r.at_key("PD|fs=true").n == 80);

    CHECK_THROWS_AS(stats_from_json(nlohmann::json::array()), FormatError);
    nlohmann::json bad = stats_to_json(s);
    bad["T2|fs=false"]["std"] = 0.0;
    CHECK_THROWS_AS(stats_from_json(bad), FormatError);
}

TEST_CASE("standardize_and_scale maps z-scores onto the unit interval") {
    IntensityStats stats;
    stats.by_key["T2|fs=false"] = {10.0, 2.0, 100};
    VolumeScan v = make_volume(1, 1, 5);
    v.sequence_type = SequenceType::T2;
    v.fat_sat = false;
    // z = -6 (clamps), -4, 0, +4, +6 (clamps)
    v.voxels = {-2.0f, 2.0f, 10.0f, 18.0f, 22.0f};
    VolumeScan out = standardize_and_scale(v, stats);
    CHECK(out.voxels[0] == 0.0f);
    CHECK(out.voxels[1] == 0.0f);
    CHECK(out.voxels[2] == 0.5f);
    CHECK(out.voxels[3] == 1.0f);
    CHECK(out.voxels[4] == 1.0f);

    VolumeScan other = v;
    other.sequence_type = SequenceType::MERGE;
    CHECK_THROWS_AS(standardize_and_scale(other, stats), MissingStatsError);
}

namespace {

VolumeScan preprocessed_scan(std::uint64_t seed) {
    VolumeScan v = make_volume(2, kCropTo, kCropTo);
    Rng rng(seed);
    for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
    v.series_id = "se-base";
    v.study_id = "st-base";
    return v;
}

AugmentationConfig identity_augment(int copies) {
    AugmentationConfig ac;
    ac.copies_per_scan = copies;
    ac.rotation_limit = 0.0;
    ac.translation_limit = 0.0;
    ac.scale_low = ac.scale_high = 1.0;
    ac.flip_probability = 0.0;
    ac.noise_sigma = 0.0;
    return ac;
}

}  // namespace

TEST_CASE("identity augmentation reproduces the voxels") {
    VolumeScan v = preprocessed_scan(3);
    auto copies = augment(v, identity_augment(2));
    REQUIRE(copies.size() == 2);
    CHECK(copies[0].series_id == "se-base-aug0");
    CHECK(copies[1].series_id == "se-base-aug1");
    for (const auto& c : copies) {
        CHECK(c.slices == v.slices);
        CHECK(c.height == v.height);
        CHECK(c.width == v.width);
        CHECK(c.voxels == v.voxels);
        CHECK(c.study_id == v.study_id);
    }
}

TEST_CASE("augmentation is deterministic under the seed and varies across copies") {
    VolumeScan v = preprocessed_scan(4);
    AugmentationConfig ac;  // defaults: rotation, translation, scale, flip, noise
    ac.copies_per_scan = 3;
    ac.seed = 99;
    auto a = augment(v, ac);
    auto b = augment(v, ac);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].voxels == b[i].voxels);
    CHECK(a[0].voxels != a[1].voxels);
    CHECK(a[0].voxels != v.voxels);

    ac.seed = 100;
    auto c = augment(v, ac);
    CHECK(c[0].voxels != a[0].voxels);
}

TEST_CASE("pure horizontal flip mirrors columns") {
    VolumeScan v = preprocessed_scan(5);
    AugmentationConfig ac = identity_augment(1);
    ac.flip_probability = 1.0;
    auto flipped = augment(v, ac);
    REQUIRE(flipped.size() == 1);
    const auto& f = flipped[0];
    for (std::int64_t s = 0; s < v.slices; ++s)
        for (std::int64_t r = 0; r < v.height; ++r)
            for (std::int64_t c = 0; c < v.width; c += 37)
                CHECK(f.at(s, r, c) == v.at(s, r, v.width - 1 - c));
}

TEST_CASE("augmentation validates its inputs") {
    CHECK_THROWS_AS(augment(make_volume(2, 64, 64), identity_augment(1)), ValidationError);

    AugmentationConfig bad = identity_augment(1);
    bad.scale_low = 1.2;
    bad.scale_high = 0.9;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = identity_augment(-1);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = identity_augment(1);
    bad.flip_probability = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("augment scope strings") {
    CHECK(to_string(AugmentScope::PositiveOnly) == "positive_only");
    CHECK(to_string(AugmentScope::All) == "all");
    CHECK(parse_augment_scope("positive_only") == AugmentScope::PositiveOnly);
    CHECK(parse_augment_scope("all") == AugmentScope::All);
    CHECK_THROWS_AS(parse_augment_scope("none"), FormatError);
}
