#pragma once

// Study-level evaluation statistics: confusion rates, rank-based AUC,
// bootstrap confidence intervals, inter-rater agreement, and the two cohort
// comparison tests. Everything is deterministic given its seed.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "slicewise/calibration.hpp"
#include "slicewise/common.hpp"

namespace slicewise {

// ---------------------------------------------------------------------------
// Confusion rates
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::int64_t total() const { return tp + fp + tn + fn; }
};

struct ConfusionRates {
    double accuracy = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
};

inline ConfusionRates confusion_metrics(const ConfusionCounts& c) {
    if (c.tp < 0 || c.fp < 0 || c.tn < 0 || c.fn < 0)
        throw ValidationError("confusion counts must be non-negative");
    if (c.total() < 1) throw UndefinedRateError("accuracy undefined: no observations");
    if (c.tp + c.fn == 0) throw UndefinedRateError("sensitivity undefined: no positive cases");
    if (c.tn + c.fp == 0) throw UndefinedRateError("specificity undefined: no negative cases");
    ConfusionRates r;
    r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    r.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    r.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    return r;
}

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

// Mann-Whitney form: (concordant pairs + half the ties) / (P*N), computed
// through average ranks. Numerators are exact multiples of 1/2, so this
// matches the brute-force pair count bit for bit.
inline double roc_auc(const std::vector<std::pair<double, int>>& scores) {
    std::int64_t P = 0, N = 0;
    for (const auto& [s, label] : scores) {
        if (label != 0 && label != 1) throw ValidationError("roc_auc: label must be 0 or 1");
        if (!std::isfinite(s)) throw ValidationError("roc_auc: non-finite score");
        (label == 1 ? P : N)++;
    }
    if (P == 0 || N == 0)
        throw ValidationError("roc_auc needs both classes, got " + std::to_string(P) +
                              " positive and " + std::to_string(N) + " negative");
    std::vector<std::pair<double, int>> sorted = scores;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j].first == sorted[i].first) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (sorted[k].second == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double U = rank_sum_pos - 0.5 * static_cast<double>(P) * static_cast<double>(P + 1);
    return U / (static_cast<double>(P) * static_cast<double>(N));
}

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

// Operating points at thresholds {1} ∪ {unique scores} ∪ {0}, descending,
// under the "positive iff score >= threshold" rule. Probabilities live in
// (0,1), so the endpoints pin (0,0) and (1,1).
inline std::vector<RocPoint> roc_curve(const std::vector<std::pair<double, int>>& scores) {
    std::int64_t P = 0, N = 0;
    for (const auto& [s, label] : scores) {
        if (label != 0 && label != 1) throw ValidationError("roc_curve: label must be 0 or 1");
        (label == 1 ? P : N)++;
    }
    if (P == 0 || N == 0) throw ValidationError("roc_curve needs both classes");
    std::vector<double> grid;
    grid.reserve(scores.size() + 2);
    grid.push_back(1.0);
    for (const auto& [s, label] : scores) grid.push_back(s);
    grid.push_back(0.0);
    std::sort(grid.begin(), grid.end(), std::greater<>());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    std::vector<RocPoint> out;
    out.reserve(grid.size());
    for (double t : grid) {
        std::int64_t tp = 0, fp = 0;
        for (const auto& [s, label] : scores)
            if (s >= t) (label == 1 ? tp : fp)++;
        RocPoint pt;
        pt.threshold = t;
        pt.fpr = static_cast<double>(fp) / static_cast<double>(N);
        pt.tpr = static_cast<double>(tp) / static_cast<double>(P);
        out.push_back(pt);
    }
    return out;
}

inline void write_roc_csv(const std::vector<RocPoint>& curve, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open ROC CSV for writing: " + path);
    out << "threshold,fpr,tpr\n";
    out.precision(17);
    for (const auto& p : curve) out << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
    out.flush();
    if (!out) throw IoError("short write on ROC CSV: " + path);
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

struct BootstrapCi {
    double low = 0.0;
    double high = 0.0;
    std::int64_t used_iterations = 0;  // resamples that contained both classes
};

namespace detail {

// linear interpolation between order statistics (index q*(m-1))
inline double percentile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

// Resamples whole cases with replacement; single-class resamples are skipped
// rather than redrawn. Each iteration draws from its own (seed, index) stream,
// so results are independent of evaluation order.
inline BootstrapCi bootstrap_auc_ci(const std::vector<std::pair<double, int>>& scores,
                                    std::int64_t iterations, std::uint64_t seed) {
    if (iterations < 2) throw ValidationError("bootstrap needs at least 2 iterations");
    roc_auc(scores);  // validates labels and class presence
    const std::size_t n = scores.size();
    std::vector<double> aucs;
    aucs.reserve(static_cast<std::size_t>(iterations));
    std::vector<std::pair<double, int>> resample(n);
    for (std::int64_t it = 0; it < iterations; ++it) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(it)));
        std::int64_t pos = 0;
        for (std::size_t k = 0; k < n; ++k) {
            resample[k] = scores[static_cast<std::size_t>(rng.below(n))];
            pos += resample[k].second;
        }
        if (pos == 0 || pos == static_cast<std::int64_t>(n)) continue;
        aucs.push_back(roc_auc(resample));
    }
    if (aucs.empty()) throw BootstrapError("every bootstrap resample was single-class");
    std::sort(aucs.begin(), aucs.end());
    BootstrapCi ci;
    ci.low = detail::percentile(aucs, 0.025);
    ci.high = detail::percentile(aucs, 0.975);
    ci.used_iterations = static_cast<std::int64_t>(aucs.size());
    return ci;
}

// Vertical bootstrap band for the ROC plot: TPR percentiles at fixed FPR
// positions, same resampling scheme as the AUC interval.
struct RocBand {
    std::vector<double> fpr;
    std::vector<double> tpr_low;
    std::vector<double> tpr_high;
};

namespace detail {

inline double tpr_at_fpr(const std::vector<RocPoint>& curve, double f) {
    double best = 0.0;
    for (const auto& p : curve)
        if (p.fpr <= f) best = std::max(best, p.tpr);
    return best;
}

}  // namespace detail

inline RocBand bootstrap_roc_band(const std::vector<std::pair<double, int>>& scores,
                                  std::int64_t iterations, std::uint64_t seed,
                                  std::int64_t grid_points = 101) {
    if (grid_points < 2) throw ValidationError("roc band needs at least 2 grid points");
    if (iterations < 2) throw ValidationError("bootstrap needs at least 2 iterations");
    roc_auc(scores);
    const std::size_t n = scores.size();
    RocBand band;
    band.fpr.resize(static_cast<std::size_t>(grid_points));
    for (std::int64_t g = 0; g < grid_points; ++g)
        band.fpr[static_cast<std::size_t>(g)] =
            static_cast<double>(g) / static_cast<double>(grid_points - 1);
    std::vector<std::vector<double>> tprs(band.fpr.size());
    std::vector<std::pair<double, int>> resample(n);
    for (std::int64_t it = 0; it < iterations; ++it) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(it)));
        std::int64_t pos = 0;
        for (std::size_t k = 0; k < n; ++k) {
            resample[k] = scores[static_cast<std::size_t>(rng.below(n))];
            pos += resample[k].second;
        }
        if (pos == 0 || pos == static_cast<std::int64_t>(n)) continue;
        const auto curve = roc_curve(resample);
        for (std::size_t g = 0; g < band.fpr.size(); ++g)
            tprs[g].push_back(detail::tpr_at_fpr(curve, band.fpr[g]));
    }
    if (tprs.front().empty()) throw BootstrapError("every bootstrap resample was single-class");
    band.tpr_low.resize(band.fpr.size());
    band.tpr_high.resize(band.fpr.size());
    for (std::size_t g = 0; g < band.fpr.size(); ++g) {
        std::sort(tprs[g].begin(), tprs[g].end());
        band.tpr_low[g] = detail::percentile(tprs[g], 0.025);
        band.tpr_high[g] = detail::percentile(tprs[g], 0.975);
    }
    return band;
}

// ---------------------------------------------------------------------------
// Inter-rater agreement
// ---------------------------------------------------------------------------

// ratings[item][rater] = category id; any hashable int categories
inline double fleiss_kappa(const std::vector<std::vector<int>>& ratings) {
    if (ratings.empty()) throw ValidationError("fleiss_kappa: no items");
    const std::size_t raters = ratings.front().size();
    if (raters < 2) throw ValidationError("fleiss_kappa: need at least 2 raters");
    for (const auto& row : ratings)
        if (row.size() != raters)
            throw ValidationError("fleiss_kappa: ragged rating matrix");

    std::map<int, std::int64_t> totals;
    KahanSum p_bar_sum;
    const double n = static_cast<double>(raters);
    for (const auto& row : ratings) {
        std::map<int, std::int64_t> counts;
        for (int c : row) counts[c]++;
        double sum_sq = 0.0;
        for (const auto& [cat, cnt] : counts) {
            sum_sq += static_cast<double>(cnt) * static_cast<double>(cnt);
            totals[cat] += cnt;
        }
        p_bar_sum.add((sum_sq - n) / (n * (n - 1.0)));
    }
    const double P_bar = p_bar_sum.value() / static_cast<double>(ratings.size());
    const double grand = n * static_cast<double>(ratings.size());
    double Pe_bar = 0.0;
    for (const auto& [cat, cnt] : totals) {
        const double pj = static_cast<double>(cnt) / grand;
        Pe_bar += pj * pj;
    }
    if (Pe_bar >= 1.0) {
        if (P_bar >= 1.0) return 1.0;  // unanimous single category
        throw UndefinedKappaError("expected agreement is 1 but observed agreement is " +
                                  std::to_string(P_bar) + "; kappa undefined");
    }
    return (P_bar - Pe_bar) / (1.0 - Pe_bar);
}

// ---------------------------------------------------------------------------
// Cohort comparison tests
// ---------------------------------------------------------------------------

struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

// Pearson chi-squared on a 2x2 table, no continuity correction; df = 1.
inline TestResult chi_squared_test(std::int64_t a, std::int64_t b, std::int64_t c,
                                   std::int64_t d) {
    if (a < 0 || b < 0 || c < 0 || d < 0)
        throw ValidationError("chi_squared_test: counts must be non-negative");
    const double n = static_cast<double>(a + b + c + d);
    const double r1 = static_cast<double>(a + b), r2 = static_cast<double>(c + d);
    const double c1 = static_cast<double>(a + c), c2 = static_cast<double>(b + d);
    if (r1 <= 0 || r2 <= 0 || c1 <= 0 || c2 <= 0)
        throw AssumptionError("chi-squared expected counts are zero (empty row or column)");
    const double det = static_cast<double>(a) * static_cast<double>(d) -
                       static_cast<double>(b) * static_cast<double>(c);
    TestResult r;
    r.statistic = n * det * det / (r1 * r2 * c1 * c2);
    r.p_value = std::erfc(std::sqrt(r.statistic / 2.0));  // chi-squared(1) upper tail
    return r;
}

namespace detail {

// Regularized incomplete beta I_x(a,b) by Lentz's continued fraction.
inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

inline double ibeta_reg(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// Unpaired two-tailed Student t with pooled variance; df = na+nb-2.
inline TestResult pooled_t_test(const std::vector<double>& group_a,
                                const std::vector<double>& group_b) {
    const std::size_t na = group_a.size(), nb = group_b.size();
    if (na < 2 || nb < 2) throw AssumptionError("t-test needs at least 2 values per group");
    auto mean_of = [](const std::vector<double>& v) {
        KahanSum s;
        for (double x : v) s.add(x);
        return s.value() / static_cast<double>(v.size());
    };
    const double ma = mean_of(group_a), mb = mean_of(group_b);
    KahanSum ssa, ssb;
    for (double x : group_a) ssa.add((x - ma) * (x - ma));
    for (double x : group_b) ssb.add((x - mb) * (x - mb));
    const double df = static_cast<double>(na + nb - 2);
    const double sp2 = (ssa.value() + ssb.value()) / df;
    if (!(sp2 > 0)) throw AssumptionError("t-test pooled variance is zero");
    const double se = std::sqrt(sp2 * (1.0 / static_cast<double>(na) +
                                       1.0 / static_cast<double>(nb)));
    TestResult r;
    r.statistic = (ma - mb) / se;
    const double x = df / (df + r.statistic * r.statistic);
    // x reaches 1 exactly when t = 0; the tail is then all of the mass
    r.p_value = x >= 1.0 ? 1.0 : detail::ibeta_reg(df / 2.0, 0.5, x);
    return r;
}

// ---------------------------------------------------------------------------
// Full evaluation report
// ---------------------------------------------------------------------------

struct EvalReport {
    Modality modality = Modality::standard;
    std::int64_t n = 0;
    ConfusionCounts confusion;
    ConfusionRates rates;
    double auc = 0.0;
    BootstrapCi auc_ci_95;
    std::map<View, double> per_view_auc;
    std::int64_t bootstrap_iterations = 0;  // non-degenerate resample count
    std::uint64_t seed = 0;
    double threshold = 0.0;
};

inline EvalReport evaluate(const std::vector<std::pair<EnsemblePrediction, int>>& test_predictions,
                           const CalibratedThreshold& threshold, std::int64_t iterations,
                           std::uint64_t seed) {
    if (test_predictions.empty()) throw ValidationError("evaluate: no test predictions");
    EvalReport rep;
    rep.modality = threshold.modality;
    rep.n = static_cast<std::int64_t>(test_predictions.size());
    rep.seed = seed;
    rep.threshold = threshold.value;

    std::vector<std::pair<double, int>> ensemble_scores;
    std::map<View, std::vector<std::pair<double, int>>> view_scores;
    for (const auto& [pred, label] : test_predictions) {
        if (label != 0 && label != 1) throw ValidationError("evaluate: label must be 0 or 1");
        const bool decided_tear = apply_threshold(pred, threshold) == Label::tear;
        if (label == 1)
            (decided_tear ? rep.confusion.tp : rep.confusion.fn)++;
        else
            (decided_tear ? rep.confusion.fp : rep.confusion.tn)++;
        ensemble_scores.emplace_back(pred.ensemble_probability, label);
        for (const auto& [view, p] : pred.per_view_probability)
            view_scores[view].emplace_back(p, label);
    }
    rep.rates = confusion_metrics(rep.confusion);
    rep.auc = roc_auc(ensemble_scores);
    rep.auc_ci_95 = bootstrap_auc_ci(ensemble_scores, iterations, seed);
    rep.bootstrap_iterations = rep.auc_ci_95.used_iterations;
    for (const auto& [view, scores] : view_scores) rep.per_view_auc[view] = roc_auc(scores);
    return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["modality"] = to_string(r.modality);
    j["n"] = r.n;
    j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp},
                      {"tn", r.confusion.tn}, {"fn", r.confusion.fn}};
    j["accuracy"] = r.rates.accuracy;
    j["sensitivity"] = r.rates.sensitivity;
    j["specificity"] = r.rates.specificity;
    j["auc"] = r.auc;
    j["auc_ci_95"] = {r.auc_ci_95.low, r.auc_ci_95.high};
    nlohmann::json pv = nlohmann::json::object();
    for (const auto& [view, auc] : r.per_view_auc) pv[to_string(view)] = auc;
    j["per_view_auc"] = pv;
    j["bootstrap_iterations"] = r.bootstrap_iterations;
    j["seed"] = r.seed;
    j["threshold"] = r.threshold;
    return j;
}

// canonical bytes: nlohmann orders keys, dump(2) fixes layout
inline void write_report(const EvalReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open report for writing: " + path);
    out << report_to_json(r).dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("short write on report: " + path);
}

}  // namespace slicewise
