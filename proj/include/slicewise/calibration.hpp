#pragma once

// Multi-view ensembling and operating-point calibration. Per-study series
// probabilities are averaged within each view first, then across views, so a
// view with many sequences cannot dominate. The decision threshold is the
// grid point where validation sensitivity and specificity are closest.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "slicewise/common.hpp"
#include "slicewise/model.hpp"

namespace slicewise {

struct EnsemblePrediction {
    std::string study_id;
    std::map<View, double> per_view_probability;  // mean over that view's series
    double ensemble_probability = 0.0;
};

// Nested mean for one study. Bitwise order-invariant: each view's
// probabilities are sorted before summation.
inline EnsemblePrediction ensemble_views(const std::vector<ScanPrediction>& predictions) {
    if (predictions.empty()) throw ValidationError("ensemble_views: no predictions");
    EnsemblePrediction out;
    out.study_id = predictions.front().study_id;
    std::map<View, std::vector<double>> by_view;
    for (const auto& p : predictions) {
        if (p.study_id != out.study_id)
            throw ValidationError("ensemble_views: mixed studies \"" + out.study_id + "\" and \"" +
                                  p.study_id + "\"");
        by_view[p.view].push_back(p.probability);
    }
    KahanSum across;
    for (auto& [view, probs] : by_view) {
        std::sort(probs.begin(), probs.end());
        KahanSum within;
        for (double p : probs) within.add(p);
        const double mean = within.value() / static_cast<double>(probs.size());
        out.per_view_probability[view] = mean;
        across.add(mean);
    }
    out.ensemble_probability =
        across.value() / static_cast<double>(out.per_view_probability.size());
    return out;
}

// Groups a flat prediction list by study and ensembles each group.
inline std::vector<EnsemblePrediction> ensemble_by_study(
    const std::vector<ScanPrediction>& predictions) {
    std::map<std::string, std::vector<ScanPrediction>> groups;
    for (const auto& p : predictions) groups[p.study_id].push_back(p);
    std::vector<EnsemblePrediction> out;
    out.reserve(groups.size());
    for (const auto& [id, preds] : groups) out.push_back(ensemble_views(preds));
    return out;
}

struct CalibratedThreshold {
    double value = 0.5;
    Modality modality = Modality::standard;
    double sens_at_threshold = 0.0;
    double spec_at_threshold = 0.0;
    std::string calibrated_on;  // hash of the manifest the validation set came from

    static constexpr const char* kMethod = "sens-eq-spec-on-validation";
};

namespace detail {

struct SensSpec {
    double sens = 0.0;
    double spec = 0.0;
};

inline SensSpec rates_at(const std::vector<std::pair<double, int>>& scored, double threshold) {
    std::int64_t tp = 0, fn = 0, tn = 0, fp = 0;
    for (const auto& [p, label] : scored) {
        const bool decided_positive = p >= threshold;
        if (label == 1)
            (decided_positive ? tp : fn)++;
        else
            (decided_positive ? fp : tn)++;
    }
    SensSpec r;
    r.sens = static_cast<double>(tp) / static_cast<double>(tp + fn);
    r.spec = static_cast<double>(tn) / static_cast<double>(tn + fp);
    return r;
}

// candidate operating points: midpoints between consecutive distinct
// probabilities, plus both endpoints of [0,1]
inline std::vector<double> threshold_grid(const std::vector<std::pair<double, int>>& scored) {
    std::vector<double> probs;
    probs.reserve(scored.size());
    for (const auto& [p, label] : scored) probs.push_back(p);
    std::sort(probs.begin(), probs.end());
    probs.erase(std::unique(probs.begin(), probs.end()), probs.end());
    std::vector<double> grid;
    grid.push_back(0.0);
    for (std::size_t i = 0; i + 1 < probs.size(); ++i)
        grid.push_back(0.5 * (probs[i] + probs[i + 1]));
    grid.push_back(1.0);
    return grid;
}

}  // namespace detail

inline CalibratedThreshold calibrate_threshold(
    const std::vector<std::pair<EnsemblePrediction, int>>& val_predictions, Modality modality,
    const std::string& calibrated_on = "") {
    std::vector<std::pair<double, int>> scored;
    scored.reserve(val_predictions.size());
    std::int64_t pos = 0, neg = 0;
    for (const auto& [pred, label] : val_predictions) {
        if (label != 0 && label != 1)
            throw ValidationError("calibrate_threshold: label must be 0 or 1");
        scored.emplace_back(pred.ensemble_probability, label);
        (label == 1 ? pos : neg)++;
    }
    if (pos == 0 || neg == 0)
        throw CalibrationError("calibration needs both classes; validation set has " +
                               std::to_string(pos) + " positive and " + std::to_string(neg) +
                               " negative studies");

    bool have_best = false;
    double best_t = 0.0, best_gap = 0.0, best_sum = 0.0;
    detail::SensSpec best_rates;
    for (double t : detail::threshold_grid(scored)) {
        const detail::SensSpec r = detail::rates_at(scored, t);
        const double gap = std::abs(r.sens - r.spec);
        const double sum = r.sens + r.spec;
        const bool better = !have_best || gap < best_gap ||
                            (gap == best_gap && (sum > best_sum ||
                                                 (sum == best_sum && t < best_t)));
        if (better) {
            have_best = true;
            best_t = t;
            best_gap = gap;
            best_sum = sum;
            best_rates = r;
        }
    }

    CalibratedThreshold out;
    out.value = best_t;
    out.modality = modality;
    out.sens_at_threshold = best_rates.sens;
    out.spec_at_threshold = best_rates.spec;
    out.calibrated_on = calibrated_on;
    return out;
}

// tear iff the ensemble probability reaches the threshold
inline Label apply_threshold(const EnsemblePrediction& pred, const CalibratedThreshold& threshold) {
    return pred.ensemble_probability >= threshold.value ? Label::tear : Label::no_tear;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline nlohmann::json threshold_to_json(const CalibratedThreshold& t) {
    nlohmann::json j;
    j["value"] = t.value;
    j["modality"] = to_string(t.modality);
    j["sens"] = t.sens_at_threshold;
    j["spec"] = t.spec_at_threshold;
    j["method"] = CalibratedThreshold::kMethod;
    j["calibrated_on"] = t.calibrated_on;
    return j;
}

inline CalibratedThreshold threshold_from_json(const nlohmann::json& j) {
    CalibratedThreshold t;
    try {
        t.value = j.at("value").get<double>();
        t.modality = parse_modality(j.at("modality").get<std::string>());
        t.sens_at_threshold = j.at("sens").get<double>();
        t.spec_at_threshold = j.at("spec").get<double>();
        const auto method = j.at("method").get<std::string>();
        if (method != CalibratedThreshold::kMethod)
            throw FormatError("unknown threshold method \"" + method + "\"");
        t.calibrated_on = j.value("calibrated_on", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed threshold JSON: ") + e.what());
    }
    if (!(t.value >= 0.0 && t.value <= 1.0))
        throw ValidationError("threshold value must lie in [0,1]");
    return t;
}

inline void write_threshold(const CalibratedThreshold& t, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open threshold file for writing: " + path);
    out << threshold_to_json(t).dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("short write on threshold file: " + path);
}

inline CalibratedThreshold read_threshold(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open threshold file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed threshold JSON in ") + path + ": " + e.what());
    }
    return threshold_from_json(j);
}

// One row per series, carrying its study's ensemble probability and decision.
inline void write_predictions_csv(const std::vector<ScanPrediction>& predictions,
                                  const CalibratedThreshold& threshold,
                                  const std::string& path) {
    std::map<std::string, std::vector<ScanPrediction>> groups;
    for (const auto& p : predictions) groups[p.study_id].push_back(p);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open predictions CSV for writing: " + path);
    out << "study_id,view,series_id,probability,ensemble_probability,decision\n";
    out.precision(17);
    for (const auto& [study_id, preds] : groups) {
        const EnsemblePrediction ens = ensemble_views(preds);
        const std::string decision = to_string(apply_threshold(ens, threshold));
        for (const auto& p : preds)
            out << p.study_id << ',' << to_string(p.view) << ',' << p.series_id << ','
                << p.probability << ',' << ens.ensemble_probability << ',' << decision << '\n';
    }
    out.flush();
    if (!out) throw IoError("short write on predictions CSV: " + path);
}

}  // namespace slicewise
