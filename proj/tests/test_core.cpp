#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "slicewise/common.hpp"
#include "slicewise/manifest.hpp"
#include "slicewise/split.hpp"
#include "slicewise/volume.hpp"
#include "test_util.hpp"

using namespace slicewise;

TEST_CASE("error hierarchy carries exit codes") {
    CHECK(ValidationError("x").exit_code() == 1);
    CHECK(ConfigError("x").exit_code() == 1);
    CHECK(IoError("x").exit_code() == 2);
    CHECK(std::string(FormatError("bad frame").what()) == "bad frame");
}

TEST_CASE("enum string round trips") {
    for (View v : {View::sagittal, View::axial, View::coronal})
        CHECK(parse_view(to_string(v)) == v);
    for (SequenceType s :
         {SequenceType::T1, SequenceType::T2, SequenceType::PD, SequenceType::MERGE,
          SequenceType::STIR})
        CHECK(parse_sequence_type(to_string(s)) == s);
    for (Modality m : {Modality::standard, Modality::arthrogram})
        CHECK(parse_modality(to_string(m)) == m);
    for (Side s : {Side::left, Side::right}) CHECK(parse_side(to_string(s)) == s);
    for (Label l : {Label::no_tear, Label::tear}) CHECK(parse_label(to_string(l)) == l);
    for (Split s : {Split::train, Split::val, Split::test, Split::unassigned})
        CHECK(parse_split(to_string(s)) == s);

    CHECK(to_string(View::sagittal) == "sagittal");
    CHECK(to_string(Modality::arthrogram) == "arthrogram");
    CHECK(to_string(Label::no_tear) == "no_tear");

    CHECK_THROWS_AS(parse_view("oblique"), FormatError);
    CHECK_THROWS_AS(parse_label("maybe"), FormatError);
    CHECK_THROWS_AS(parse_bool("2"), FormatError);
    CHECK(parse_bool("true"));
    CHECK(!parse_bool("false"));
}

TEST_CASE("mix_seed separates streams") {
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));
    CHECK(mix_seed(7, "alpha") != mix_seed(7, "beta"));
    CHECK(mix_seed(7, "alpha") == mix_seed(7, "alpha"));
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(mix_seed(42, i));
    CHECK(seen.size() == 1000);
}

TEST_CASE("rng is deterministic and in range") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(9);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double v = r.uniform(-2.0, 3.0);
        CHECK(v >= -2.0);
        CHECK(v < 3.0);
        CHECK(r.below(17) < 17);
    }
    CHECK_THROWS_AS(r.below(0), ValidationError);

    // normal(): mean and variance sanity on a fixed stream
    Rng g(31);
    KahanSum s, s2;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = g.normal();
        s.add(x);
        s2.add(x * x);
    }
    const double mean = s.value() / n;
    const double var = s2.value() / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);

    // shuffle: permutation of the input, deterministic under the seed
    std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, v2 = v1;
    Rng p1(5), p2(5);
    p1.shuffle(v1);
    p2.shuffle(v2);
    CHECK(v1 == v2);
    std::set<int> elems(v1.begin(), v1.end());
    CHECK(elems.size() == 10);
}

TEST_CASE("kahan summation compensates tiny increments") {
    KahanSum s;
    s.add(1.0);
    double naive = 1.0;
    for (int i = 0; i < 1000000; ++i) {
        s.add(1e-16);
        naive += 1e-16;
    }
    CHECK(naive == 1.0);  // plain accumulation drops every increment
    CHECK(std::abs(s.value() - (1.0 + 1e-10)) < 1e-14);
}

static VolumeScan sample_volume() {
    VolumeScan v = make_volume(3, 5, 4, 0.0f);
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        v.voxels[i] = static_cast<float>(std::sin(0.37 * static_cast<double>(i)));
    v.series_id = "se-1";
    v.study_id = "st-1";
    v.view = View::coronal;
    v.sequence_type = SequenceType::PD;
    v.fat_sat = true;
    v.modality = Modality::arthrogram;
    v.side = Side::left;
    return v;
}

TEST_CASE("volume construction and validation") {
    VolumeScan v = make_volume(2, 3, 4, 0.5f);
    CHECK(v.numel() == 24);
    CHECK(v.at(1, 2, 3) == 0.5f);
    CHECK_NOTHROW(v.validate());

    CHECK_THROWS_AS(make_volume(0, 3, 4).validate(), ValidationError);
    VolumeScan short_payload = v;
    short_payload.voxels.pop_back();
    CHECK_THROWS_AS(short_payload.validate(), ValidationError);
    VolumeScan inf_voxel = v;
    inf_voxel.voxels[3] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(inf_voxel.validate(), ValidationError);
}

TEST_CASE("mvol round trip is bitwise") {
    testutil::TempDir dir("mvol");
    const auto path = dir / "scan.mvol";
    const VolumeScan v = sample_volume();
    write_volume(v, path);
    const VolumeScan r = read_volume(path);
    CHECK(bitwise_equal(r, v));
    CHECK(r.view == View::coronal);
    CHECK(r.fat_sat);
    CHECK(r.side == Side::left);

    VolumeScan renamed = v;
    renamed.series_id = "se-2";
    CHECK(!bitwise_equal(renamed, v));
    VolumeScan bumped = v;
    bumped.voxels[7] += 1e-6f;
    CHECK(!bitwise_equal(bumped, v));
}

TEST_CASE("mvol read rejects damaged files") {
    testutil::TempDir dir("mvolbad");
    const auto path = dir / "scan.mvol";
    write_volume(sample_volume(), path);

    SECTION("truncated payload") {
        const auto full = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, full - 10);
        CHECK_THROWS_AS(read_volume(path), TruncationError);
    }
    SECTION("garbage header") {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "not a header\n1234";
        out.close();
        CHECK_THROWS_AS(read_volume(path), FormatError);
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(read_volume(dir / "absent.mvol"), IoError);
    }
}

static DatasetManifest two_study_manifest() {
    DatasetManifest m;
    StudyRecord a;
    a.study_id = "s-002";
    a.patient_id = "p-2";
    a.label = Label::tear;
    a.modality = Modality::standard;
    a.split = Split::train;
    SeriesRef ar;
    ar.path = "s-002/ax.mvol";
    ar.series_id = "s-002-ax";
    ar.view = View::axial;
    ar.sequence_type = SequenceType::T2;
    ar.fat_sat = false;
    a.series.push_back(ar);

    StudyRecord b;
    b.study_id = "s-001";
    b.patient_id = "p-1";
    b.label = Label::no_tear;
    b.modality = Modality::arthrogram;
    b.split = Split::val;
    SeriesRef br = ar;
    br.path = "s-001/co.mvol";
    br.series_id = "s-001-co";
    br.view = View::coronal;
    br.sequence_type = SequenceType::PD;
    br.fat_sat = true;
    b.series.push_back(br);

    m.records.push_back(a);
    m.records.push_back(b);
    return m;
}

TEST_CASE("manifest csv round trips and sorts") {
    testutil::TempDir dir("manifest");
    const auto path = dir / "manifest.csv";
    DatasetManifest m = two_study_manifest();
    write_manifest(m, path);

    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "study_id,patient_id,modality,label,split,series_path,view,sequence_type,fat_sat");
    std::string first_row;
    std::getline(in, first_row);
    CHECK(first_row.rfind("s-001,", 0) == 0);

    const DatasetManifest r = read_manifest(path);
    REQUIRE(r.records.size() == 2);
    CHECK(r.records[0].study_id == "s-001");
    CHECK(r.records[1].study_id == "s-002");
    CHECK(r.records[0].series[0].fat_sat);
    CHECK(r.records[1].label == Label::tear);
    CHECK(r.records[0].split == Split::val);
    CHECK(r.find("s-002") != nullptr);
    CHECK(r.find("nope") == nullptr);
    CHECK(r.series_count() == 2);
}

TEST_CASE("manifest validation rejects duplicates and gaps") {
    DatasetManifest m = two_study_manifest();
    SECTION("duplicate study id") {
        m.records.push_back(m.records[0]);
        CHECK_THROWS_AS(m.validate(), ValidationError);
    }
    SECTION("study without series") {
        m.records[0].series.clear();
        CHECK_THROWS_AS(m.validate(), ValidationError);
    }
    SECTION("empty study id") {
        m.records[0].study_id.clear();
        CHECK_THROWS_AS(m.validate(), ValidationError);
    }
}

TEST_CASE("manifest read rejects malformed input") {
    testutil::TempDir dir("manifestbad");
    const auto path = dir / "broken.csv";
    SECTION("wrong header") {
        std::ofstream(path) << "study,oops\n";
        CHECK_THROWS_AS(read_manifest(path), FormatError);
    }
    SECTION("short row") {
        std::ofstream(path)
            << "study_id,patient_id,modality,label,split,series_path,view,sequence_type,fat_sat\n"
            << "a,b,standard\n";
        CHECK_THROWS_AS(read_manifest(path), FormatError);
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(read_manifest(dir / "none.csv"), IoError);
    }
}

TEST_CASE("series paths resolve relative to the manifest") {
    const auto abs = resolve_series_path("/data/m.csv", "/elsewhere/x.mvol");
    CHECK(abs == std::filesystem::path("/elsewhere/x.mvol"));
    const auto rel = resolve_series_path("/data/m.csv", "s1/x.mvol");
    CHECK(rel == std::filesystem::path("/data/s1/x.mvol"));
}

TEST_CASE("validate_manifest_files checks metadata against disk") {
    testutil::TempDir dir("manifestfiles");
    DatasetManifest m = two_study_manifest();
    for (auto& r : m.records) {
        std::filesystem::create_directories(dir.path / r.study_id);
        for (auto& s : r.series) {
            VolumeScan v = make_volume(2, 4, 4, 0.1f);
            v.study_id = r.study_id;
            v.series_id = s.series_id;
            v.view = s.view;
            v.sequence_type = s.sequence_type;
            v.fat_sat = s.fat_sat;
            v.modality = r.modality;
            write_volume(v, dir.path / s.path);
        }
    }
    const auto mpath = dir / "manifest.csv";
    write_manifest(m, mpath);
    CHECK_NOTHROW(validate_manifest_files(m, mpath));

    std::filesystem::remove(dir.path / m.records[0].series[0].path);
    CHECK_THROWS_AS(validate_manifest_files(m, mpath), IoError);
}

static DatasetManifest stratified_fixture(int n_pos_std, int n_neg_std, int n_pos_arth,
                                          int n_neg_arth) {
    DatasetManifest m;
    int k = 0;
    auto add = [&](Label lab, Modality mod) {
        StudyRecord r;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "s-%04d", k++);
        r.study_id = buf;
        r.patient_id = "p" + std::to_string(k);
        r.label = lab;
        r.modality = mod;
        r.split = Split::unassigned;
        SeriesRef s;
        s.path = r.study_id + "/a.mvol";
        s.series_id = r.study_id + "-a";
        s.view = View::axial;
        s.sequence_type = SequenceType::T2;
        r.series.push_back(s);
        m.records.push_back(r);
    };
    for (int i = 0; i < n_pos_std; ++i) add(Label::tear, Modality::standard);
    for (int i = 0; i < n_neg_std; ++i) add(Label::no_tear, Modality::standard);
    for (int i = 0; i < n_pos_arth; ++i) add(Label::tear, Modality::arthrogram);
    for (int i = 0; i < n_neg_arth; ++i) add(Label::no_tear, Modality::arthrogram);
    return m;
}

TEST_CASE("stratified split allocates by largest remainder per stratum") {
    DatasetManifest m = stratified_fixture(29, 29, 0, 0);
    SplitFractions f{20.0 / 29.0, 3.0 / 29.0, 6.0 / 29.0};
    DatasetManifest s = stratified_split(m, f, 17);
    std::map<Label, std::map<Split, int>> counts;
    for (const auto& r : s.records) counts[r.label][r.split]++;
    for (Label lab : {Label::tear, Label::no_tear}) {
        CHECK(counts[lab][Split::train] == 20);
        CHECK(counts[lab][Split::val] == 3);
        CHECK(counts[lab][Split::test] == 6);
    }
}

TEST_CASE("stratified split is deterministic and seed sensitive") {
    DatasetManifest m = stratified_fixture(20, 20, 10, 10);
    SplitFractions f;
    DatasetManifest a = stratified_split(m, f, 5);
    DatasetManifest b = stratified_split(m, f, 5);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i)
        CHECK(a.records[i].split == b.records[i].split);

    DatasetManifest c = stratified_split(m, f, 6);
    int moved = 0;
    for (std::size_t i = 0; i < a.records.size(); ++i)
        moved += a.records[i].split != c.records[i].split;
    CHECK(moved > 0);

    // only the split column changes
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].study_id == m.records[i].study_id);
        CHECK(a.records[i].label == m.records[i].label);
    }
}

TEST_CASE("stratified split rejects impossible requests") {
    SECTION("bad fractions") {
        DatasetManifest m = stratified_fixture(5, 5, 0, 0);
        CHECK_THROWS_AS(stratified_split(m, SplitFractions{0.9, 0.2, 0.2}, 1), ValidationError);
        CHECK_THROWS_AS(stratified_split(m, SplitFractions{1.0, 0.0, 0.0}, 1), ValidationError);
    }
    SECTION("single class cannot fill every split") {
        DatasetManifest m = stratified_fixture(0, 12, 0, 0);
        CHECK_THROWS_AS(stratified_split(m, SplitFractions{}, 1), StratificationError);
    }
}

TEST_CASE("largest remainder hits exact integer targets") {
    const auto alloc = detail::largest_remainder(29, SplitFractions{20.0 / 29.0, 3.0 / 29.0, 6.0 / 29.0});
    CHECK(alloc[0] == 20);
    CHECK(alloc[1] == 3);
    CHECK(alloc[2] == 6);
    for (std::int64_t n : {1, 2, 3, 10, 97}) {
        const auto a = detail::largest_remainder(n, SplitFractions{});
        CHECK(a[0] + a[1] + a[2] == n);
    }
}

TEST_CASE("studies of one patient land in one split") {
    DatasetManifest m = stratified_fixture(12, 12, 0, 0);
    // pair up studies under shared patients, including a mixed-label pair
    m.records[0].patient_id = m.records[1].patient_id = "shared-a";
    m.records[2].patient_id = m.records[13].patient_id = "shared-b";
    DatasetManifest s = stratified_split(m, SplitFractions{}, 3);
    CHECK(s.records[0].split == s.records[1].split);
    CHECK(s.records[2].split == s.records[13].split);
    for (const auto& r : s.records) CHECK(r.split != Split::unassigned);
}
