#pragma once

// Self-contained SVG rendering of ROC curves with a shaded confidence band.
// Output is plain deterministic text so plots diff cleanly across runs.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/metrics.hpp"

namespace slicewise {

struct RocCurveSeries {
    std::string name;  // legend text, e.g. "ensemble (AUC 0.93)"
    std::vector<RocPoint> points;
    std::string color;  // any SVG color; empty picks from the default palette
};

namespace detail {

inline std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace detail

inline std::string roc_plot_svg(const std::string& title,
                                const std::vector<RocCurveSeries>& curves,
                                const RocBand* band = nullptr) {
    if (curves.empty()) throw ValidationError("roc_plot_svg: no curves");
    constexpr double kW = 560.0, kH = 560.0, kMl = 70.0, kMt = 50.0, kMr = 30.0, kMb = 70.0;
    const double total_w = kMl + kW + kMr, total_h = kMt + kH + kMb;
    auto px = [&](double fpr) { return kMl + fpr * kW; };
    auto py = [&](double tpr) { return kMt + (1.0 - tpr) * kH; };
    static const char* kPalette[] = {"#1f6fb2", "#c2452d", "#3a8f5d", "#8059a7", "#b28f1f"};

    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt2(total_w) +
         "\" height=\"" + detail::fmt2(total_h) + "\" viewBox=\"0 0 " + detail::fmt2(total_w) +
         " " + detail::fmt2(total_h) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + detail::fmt2(kMl + kW / 2) +
         "\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"18\">" +
         title + "</text>\n";

    // grid and axis labels every 0.25
    for (int i = 0; i <= 4; ++i) {
        const double v = i / 4.0;
        s += "<line x1=\"" + detail::fmt2(px(v)) + "\" y1=\"" + detail::fmt2(py(0)) + "\" x2=\"" +
             detail::fmt2(px(v)) + "\" y2=\"" + detail::fmt2(py(1)) +
             "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        s += "<line x1=\"" + detail::fmt2(px(0)) + "\" y1=\"" + detail::fmt2(py(v)) + "\" x2=\"" +
             detail::fmt2(px(1)) + "\" y2=\"" + detail::fmt2(py(v)) +
             "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        s += "<text x=\"" + detail::fmt2(px(v)) + "\" y=\"" + detail::fmt2(py(0) + 22) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
             detail::fmt2(v) + "</text>\n";
        s += "<text x=\"" + detail::fmt2(px(0) - 10) + "\" y=\"" + detail::fmt2(py(v) + 4) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" +
             detail::fmt2(v) + "</text>\n";
    }
    s += "<text x=\"" + detail::fmt2(kMl + kW / 2) + "\" y=\"" + detail::fmt2(total_h - 18) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
         "False positive rate</text>\n";
    s += "<text x=\"20\" y=\"" + detail::fmt2(kMt + kH / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" "
         "transform=\"rotate(-90 20 " +
         detail::fmt2(kMt + kH / 2) + ")\">True positive rate</text>\n";

    // confidence band under everything else
    if (band && !band->fpr.empty()) {
        std::string pts;
        for (std::size_t i = 0; i < band->fpr.size(); ++i)
            pts += detail::fmt2(px(band->fpr[i])) + "," + detail::fmt2(py(band->tpr_high[i])) + " ";
        for (std::size_t i = band->fpr.size(); i-- > 0;)
            pts += detail::fmt2(px(band->fpr[i])) + "," + detail::fmt2(py(band->tpr_low[i])) + " ";
        s += "<polygon points=\"" + pts + "\" fill=\"#1f6fb2\" fill-opacity=\"0.15\" "
             "stroke=\"none\"/>\n";
    }

    // chance diagonal
    s += "<line x1=\"" + detail::fmt2(px(0)) + "\" y1=\"" + detail::fmt2(py(0)) + "\" x2=\"" +
         detail::fmt2(px(1)) + "\" y2=\"" + detail::fmt2(py(1)) +
         "\" stroke=\"#999999\" stroke-width=\"1\" stroke-dasharray=\"6 4\"/>\n";

    for (std::size_t c = 0; c < curves.size(); ++c) {
        const auto& curve = curves[c];
        if (curve.points.empty()) throw ValidationError("roc_plot_svg: empty curve");
        const std::string color =
            curve.color.empty() ? kPalette[c % (sizeof(kPalette) / sizeof(kPalette[0]))]
                                : curve.color;
        std::string pts;
        for (const auto& p : curve.points)
            pts += detail::fmt2(px(p.fpr)) + "," + detail::fmt2(py(p.tpr)) + " ";
        s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
             "\" stroke-width=\"2\"/>\n";
        const double ly = kMt + 16.0 + 20.0 * static_cast<double>(c);
        s += "<line x1=\"" + detail::fmt2(px(1) - 170) + "\" y1=\"" + detail::fmt2(ly - 4) +
             "\" x2=\"" + detail::fmt2(px(1) - 144) + "\" y2=\"" + detail::fmt2(ly - 4) +
             "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        s += "<text x=\"" + detail::fmt2(px(1) - 138) + "\" y=\"" + detail::fmt2(ly) +
             "\" font-family=\"sans-serif\" font-size=\"12\">" + curve.name + "</text>\n";
    }
    s += "</svg>\n";
    return s;
}

inline void write_roc_plot(const std::string& title, const std::vector<RocCurveSeries>& curves,
                           const RocBand* band, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open plot for writing: " + path);
    out << roc_plot_svg(title, curves, band);
    out.flush();
    if (!out) throw IoError("short write on plot: " + path);
}

}  // namespace slicewise
