#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "slicewise/calibration.hpp"
#include "test_util.hpp"

using namespace slicewise;

namespace {

ScanPrediction sp(const std::string& study, const std::string& series, View v, double p) {
    ScanPrediction s;
    s.study_id = study;
    s.series_id = series;
    s.view = v;
    s.probability = p;
    return s;
}

EnsemblePrediction ep(double p) {
    EnsemblePrediction e;
    e.study_id = "x";
    e.per_view_probability[View::axial] = p;
    e.ensemble_probability = p;
    return e;
}

}  // namespace

TEST_CASE("view ensembling averages views, not series") {
    SECTION("three views, one series each") {
        const auto e = ensemble_views({sp("s", "a", View::sagittal, 0.6),
                                       sp("s", "b", View::axial, 0.9),
                                       sp("s", "c", View::coronal, 0.9)});
        CHECK(e.ensemble_probability == Catch::Approx(0.8).margin(1e-15));
        CHECK(e.per_view_probability.size() == 3);
    }
    SECTION("two sequences of one view average first") {
        const auto e =
            ensemble_views({sp("s", "a", View::axial, 0.4), sp("s", "b", View::axial, 0.6)});
        CHECK(e.per_view_probability.at(View::axial) == Catch::Approx(0.5).margin(1e-15));
        CHECK(e.ensemble_probability == Catch::Approx(0.5).margin(1e-15));
    }
    SECTION("single view passes through") {
        CHECK(ensemble_views({sp("s", "a", View::coronal, 0.37)}).ensemble_probability == 0.37);
    }
    SECTION("nested mean differs from pooling all series") {
        // sagittal {0.2, 0.4}, axial {0.9}: (0.3 + 0.9) / 2, not the flat mean 0.5
        const auto e = ensemble_views({sp("s", "a", View::sagittal, 0.2),
                                       sp("s", "b", View::sagittal, 0.4),
                                       sp("s", "c", View::axial, 0.9)});
        CHECK(e.ensemble_probability == Catch::Approx(0.6).margin(1e-15));
    }
}

TEST_CASE("ensembling is bitwise order invariant") {
    std::vector<ScanPrediction> preds;
    std::mt19937_64 g(5);
    for (int i = 0; i < 20; ++i)
        preds.push_back(sp("s", "se" + std::to_string(i), static_cast<View>(i % 3),
                           std::uniform_real_distribution<>(0, 1)(g)));
    const auto base = ensemble_views(preds);
    for (int trial = 0; trial < 50; ++trial) {
        std::shuffle(preds.begin(), preds.end(), g);
        const auto e = ensemble_views(preds);
        CHECK(e.ensemble_probability == base.ensemble_probability);
        for (const auto& [v, p] : base.per_view_probability)
            CHECK(e.per_view_probability.at(v) == p);
    }
}

TEST_CASE("ensembling rejects empty and mixed-study input") {
    CHECK_THROWS_AS(ensemble_views({}), ValidationError);
    CHECK_THROWS_AS(ensemble_views({sp("s1", "a", View::axial, 0.5),
                                    sp("s2", "b", View::axial, 0.5)}),
                    ValidationError);
}

TEST_CASE("ensemble_by_study groups series and orders by study") {
    const auto by_study = ensemble_by_study(
        {sp("s2", "b", View::axial, 0.9), sp("s1", "a", View::axial, 0.2),
         sp("s1", "c", View::coronal, 0.4)});
    REQUIRE(by_study.size() == 2);
    CHECK(by_study[0].study_id == "s1");
    CHECK(by_study[0].ensemble_probability == Catch::Approx(0.3).margin(1e-15));
    CHECK(by_study[1].study_id == "s2");
    CHECK(by_study[1].ensemble_probability == 0.9);
}

TEST_CASE("threshold calibration balances sensitivity and specificity") {
    SECTION("separable set t gets the zero-gap midpoint") {
        const std::vector<std::pair<EnsemblePrediction, int>> val = {
            {ep(0.9), 1}, {ep(0.8), 1}, {ep(0.1), 0}, {ep(0.2), 0}};
        const auto t = calibrate_threshold(val, Modality::standard);
        CHECK(t.value == Catch::Approx(0.5).margin(1e-15));
        CHECK(t.sens_at_threshold == 1.0);
        CHECK(t.spec_at_threshold == 1.0);
        CHECK(t.modality == Modality::standard);
    }
    SECTION("inverted scores still find the zero-gap point") {
        const std::vector<std::pair<EnsemblePrediction, int>> val = {{ep(0.3), 1}, {ep(0.7), 0}};
        const auto t = calibrate_threshold(val, Modality::standard);
        CHECK(t.value == Catch::Approx(0.5).margin(1e-15));
        CHECK(t.sens_at_threshold == 0.0);
        CHECK(t.spec_at_threshold == 0.0);
    }
    SECTION("single-class validation data is rejected") {
        CHECK_THROWS_AS(calibrate_threshold({{ep(0.5), 1}}, Modality::standard),
                        CalibrationError);
        CHECK_THROWS_AS(calibrate_threshold({}, Modality::standard), CalibrationError);
    }
}

TEST_CASE("no fine-grid threshold beats the calibrated one") {
    std::mt19937_64 g(7);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::pair<EnsemblePrediction, int>> val;
        const int n = 2 + static_cast<int>(g() % 30);
        for (int i = 0; i < n; ++i) {
            const int label = (i == 0) ? 1 : (i == 1) ? 0 : static_cast<int>(g() % 2);
            val.push_back({ep(std::uniform_real_distribution<>(0, 1)(g)), label});
        }
        const auto t = calibrate_threshold(val, Modality::standard);
        auto rates = [&](double th) {
            int tp = 0, fn = 0, tn = 0, fp = 0;
            for (const auto& [e, lab] : val)
                if (lab)
                    (e.ensemble_probability >= th ? tp : fn)++;
                else
                    (e.ensemble_probability >= th ? fp : tn)++;
            return std::pair<double, double>{double(tp) / (tp + fn), double(tn) / (tn + fp)};
        };
        const double got_gap = std::abs(t.sens_at_threshold - t.spec_at_threshold);
        for (int k = 0; k <= 2000; ++k) {
            const auto [s, p] = rates(k / 2000.0);
            CHECK(std::abs(s - p) >= got_gap - 1e-12);
        }
    }
}

TEST_CASE("decision rule is greater-or-equal") {
    CalibratedThreshold t;
    t.value = 0.71;
    CHECK(apply_threshold(ep(0.72), t) == Label::tear);
    CHECK(apply_threshold(ep(0.71), t) == Label::tear);
    CHECK(apply_threshold(ep(0.70), t) == Label::no_tear);
    t.value = 0.19;
    CHECK(apply_threshold(ep(0.19), t) == Label::tear);
    CHECK(apply_threshold(ep(0.0), t) == Label::no_tear);
}

TEST_CASE("threshold json round trips") {
    testutil::TempDir dir("thr");
    CalibratedThreshold t;
    t.value = 0.71;
    t.modality = Modality::arthrogram;
    t.sens_at_threshold = 0.9;
    t.spec_at_threshold = 0.88;
    t.calibrated_on = "abc123";
    const auto path = (dir / "threshold.json").string();
    write_threshold(t, path);
    const auto r = read_threshold(path);
    CHECK(r.value == t.value);
    CHECK(r.modality == Modality::arthrogram);
    CHECK(r.sens_at_threshold == t.sens_at_threshold);
    CHECK(r.spec_at_threshold == t.spec_at_threshold);
    CHECK(r.calibrated_on == "abc123");

    const auto j = threshold_to_json(t);
    CHECK(j.at("method").get<std::string>() == std::string(CalibratedThreshold::kMethod));
}

TEST_CASE("predictions csv carries per-series rows with study decisions") {
    testutil::TempDir dir("predcsv");
    CalibratedThreshold t;
    t.value = 0.5;
    const auto path = (dir / "predictions.csv").string();
    write_predictions_csv({sp("s1", "a", View::axial, 0.8), sp("s1", "b", View::coronal, 0.4),
                           sp("s2", "c", View::axial, 0.3)},
                          t, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "study_id,view,series_id,probability,ensemble_probability,decision");
    int rows = 0, s1_tear = 0;
    while (std::getline(in, line)) {
        ++rows;
        if (line.rfind("s1,", 0) == 0 && line.find(",tear") != std::string::npos) ++s1_tear;
    }
    CHECK(rows == 3);
    CHECK(s1_tear == 2);  // s1 ensemble 0.6 >= 0.5, decision shared across its rows
}
