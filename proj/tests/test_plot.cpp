#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "slicewise/plot.hpp"
#include "test_util.hpp"

using namespace slicewise;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<RocCurveSeries> sample_curves() {
    std::vector<std::pair<double, int>> good = {
        {0.9, 1}, {0.8, 1}, {0.7, 0}, {0.6, 1}, {0.3, 0}, {0.2, 0}};
    std::vector<std::pair<double, int>> weak = {
        {0.6, 1}, {0.55, 0}, {0.5, 1}, {0.45, 0}, {0.4, 1}, {0.35, 0}};
    return {{"ensemble (AUC 0.89)", roc_curve(good), ""},
            {"axial", roc_curve(weak), "#c2452d"}};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("svg document structure") {
    const std::string svg = roc_plot_svg("Standard MRI test set", sample_curves());
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK_THAT(svg, ContainsSubstring("</svg>"));
    CHECK_THAT(svg, ContainsSubstring("Standard MRI test set"));
    CHECK_THAT(svg, ContainsSubstring("False positive rate"));
    CHECK_THAT(svg, ContainsSubstring("True positive rate"));
    // one polyline per curve plus legend entries by name
    std::size_t n_polylines = 0;
    for (std::size_t pos = svg.find("<polyline"); pos != std::string::npos;
         pos = svg.find("<polyline", pos + 1))
        ++n_polylines;
    CHECK(n_polylines == 2);
    CHECK_THAT(svg, ContainsSubstring("ensemble (AUC 0.89)"));
    CHECK_THAT(svg, ContainsSubstring("axial"));
    CHECK_THAT(svg, ContainsSubstring("#c2452d"));
}

TEST_CASE("band renders as a polygon only when provided") {
    const auto curves = sample_curves();
    CHECK(roc_plot_svg("t", curves).find("<polygon") == std::string::npos);

    RocBand band;
    band.fpr = {0.0, 0.5, 1.0};
    band.tpr_low = {0.0, 0.4, 1.0};
    band.tpr_high = {0.0, 0.9, 1.0};
    const std::string svg = roc_plot_svg("t", curves, &band);
    CHECK_THAT(svg, ContainsSubstring("<polygon"));
    CHECK_THAT(svg, ContainsSubstring("fill-opacity"));
}

TEST_CASE("plot bytes are deterministic") {
    const auto curves = sample_curves();
    RocBand band;
    band.fpr = {0.0, 1.0};
    band.tpr_low = {0.0, 1.0};
    band.tpr_high = {0.0, 1.0};
    CHECK(roc_plot_svg("same", curves, &band) == roc_plot_svg("same", curves, &band));
    CHECK(roc_plot_svg("one", curves) != roc_plot_svg("two", curves));
}

TEST_CASE("write_roc_plot creates the file with identical bytes") {
    testutil::TempDir tmp("plot");
    const auto path = tmp / "roc.svg";
    const auto curves = sample_curves();
    write_roc_plot("saved", curves, nullptr, path.string());
    REQUIRE(std::filesystem::exists(path));
    CHECK(slurp(path) == roc_plot_svg("saved", curves));
}

TEST_CASE("plot rejects degenerate input") {
    CHECK_THROWS_AS(roc_plot_svg("t", {}), ValidationError);
    std::vector<RocCurveSeries> empty_curve = {{"x", {}, ""}};
    CHECK_THROWS_AS(roc_plot_svg("t", empty_curve), ValidationError);
    CHECK_THROWS_AS(write_roc_plot("t", sample_curves(), nullptr, "/nonexistent-dir/x.svg"),
                    IoError);
}
