#include <catch2/catch_amalgamated.hpp>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <random>

#include "slicewise/metrics.hpp"

using namespace slicewise;

namespace {

double round4(double v) { return std::round(v * 1e4) / 1e4; }

double brute_auc(const std::vector<std::pair<double, int>>& s) {
    double num = 0.0;
    std::int64_t P = 0, N = 0;
    for (const auto& [sp, lp] : s) (lp ? P : N)++;
    for (const auto& [sp, lp] : s)
        if (lp == 1)
            for (const auto& [sn, ln] : s)
                if (ln == 0) num += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
    return num / (double(P) * double(N));
}

EnsemblePrediction ep(double p) {
    EnsemblePrediction e;
    e.study_id = "x";
    e.per_view_probability[View::axial] = p;
    e.ensemble_probability = p;
    return e;
}

}  // namespace

TEST_CASE("confusion rates to four decimal places") {
    // full tables so every rate stays defined
    ConfusionCounts c;
    c.tp = 61;
    c.fn = 10;
    c.tn = 56;
    c.fp = 9;
    CHECK(round4(confusion_metrics(c).sensitivity) == 0.8592);
    CHECK(round4(confusion_metrics(c).specificity) == 0.8615);
    CHECK(c.total() == 136);

    c = ConfusionCounts{};
    c.tp = 5;
    c.fn = 1;
    c.tn = 1;
    CHECK(round4(confusion_metrics(c).sensitivity) == 0.8333);

    c = ConfusionCounts{};
    c.tp = 14;
    c.fn = 3;
    c.tn = 25;
    c.fp = 4;
    CHECK(round4(confusion_metrics(c).accuracy) == 0.8478);
    CHECK(round4(confusion_metrics(c).sensitivity) == 0.8235);
    CHECK(round4(confusion_metrics(c).specificity) == 0.8621);
    CHECK(c.total() == 46);
}

TEST_CASE("undefined rates raise and name themselves") {
    ConfusionCounts no_pos;
    no_pos.tn = 3;
    no_pos.fp = 4;
    CHECK_THROWS_WITH(confusion_metrics(no_pos), Catch::Matchers::ContainsSubstring("sensitivity"));
    ConfusionCounts no_neg;
    no_neg.tp = 3;
    no_neg.fn = 4;
    CHECK_THROWS_WITH(confusion_metrics(no_neg), Catch::Matchers::ContainsSubstring("specificity"));
    CHECK_THROWS_AS(confusion_metrics(ConfusionCounts{}), UndefinedRateError);
}

TEST_CASE("auc closed-form cases") {
    CHECK(roc_auc({{0.9, 1}, {0.1, 0}}) == 1.0);
    CHECK(roc_auc({{0.1, 1}, {0.9, 0}}) == 0.0);
    CHECK(roc_auc({{0.8, 1}, {0.4, 1}, {0.6, 0}, {0.2, 0}}) == 0.75);
    CHECK(roc_auc({{0.5, 1}, {0.5, 0}, {0.5, 1}, {0.5, 0}}) == 0.5);
    CHECK_THROWS_AS(roc_auc({{0.5, 1}}), ValidationError);
}

TEST_CASE("auc equals the pairwise count bitwise") {
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::pair<double, int>> s;
        const int n = 2 + int(g() % 60);
        s.push_back({0.3, 1});
        s.push_back({0.6, 0});
        const bool coarse = trial % 2 == 0;  // force ties half the time
        for (int i = 2; i < n; ++i) {
            const double v = coarse ? double(g() % 8) / 8.0
                                    : std::uniform_real_distribution<>(0, 1)(g);
            s.push_back({v, int(g() % 2)});
        }
        CHECK(roc_auc(s) == brute_auc(s));
    }
}

TEST_CASE("auc invariances") {
    const std::vector<std::pair<double, int>> s = {
        {0.1, 0}, {0.4, 1}, {0.4, 0}, {0.7, 1}, {0.9, 1}};
    auto t = s;
    for (auto& [v, l] : t) v = std::exp(3.0 * v);
    CHECK(roc_auc(t) == roc_auc(s));
    auto f = s;
    for (auto& [v, l] : f) {
        v = 1.0 - v;
        l = 1 - l;
    }
    CHECK(roc_auc(f) == roc_auc(s));
}

TEST_CASE("roc curve pins its endpoints and stays monotone") {
    std::mt19937_64 g(11);
    std::vector<std::pair<double, int>> s;
    for (int i = 0; i < 60; ++i)
        s.push_back({std::uniform_real_distribution<>(0.01, 0.99)(g), int(g() % 2)});
    const auto c = roc_curve(s);
    REQUIRE(c.size() >= 3);
    CHECK(c.front().threshold == 1.0);
    CHECK(c.front().fpr == 0.0);
    CHECK(c.front().tpr == 0.0);
    CHECK(c.back().threshold == 0.0);
    CHECK(c.back().fpr == 1.0);
    CHECK(c.back().tpr == 1.0);
    for (std::size_t i = 1; i < c.size(); ++i) {
        CHECK(c[i].fpr >= c[i - 1].fpr);
        CHECK(c[i].tpr >= c[i - 1].tpr);
        CHECK(c[i].threshold <= c[i - 1].threshold);
    }
}

TEST_CASE("bootstrap interval is deterministic, ordered, and saturates when separable") {
    std::vector<std::pair<double, int>> s;
    for (int i = 0; i < 10; ++i) {
        s.push_back({0.9, 1});
        s.push_back({0.1, 0});
    }
    const auto ci = bootstrap_auc_ci(s, 200, 5);
    CHECK(ci.low == 1.0);
    CHECK(ci.high == 1.0);
    CHECK(ci.used_iterations > 0);
    CHECK(ci.used_iterations <= 200);

    const auto ci2 = bootstrap_auc_ci(s, 200, 5);
    CHECK(ci.low == ci2.low);
    CHECK(ci.high == ci2.high);
    CHECK(ci.used_iterations == ci2.used_iterations);

    const auto ci3 = bootstrap_auc_ci(s, 200, 6);
    CHECK(0.0 <= ci3.low);
    CHECK(ci3.low <= ci3.high);
    CHECK(ci3.high <= 1.0);

    // noisy scores widen the interval around the point estimate
    std::mt19937_64 g(8);
    std::vector<std::pair<double, int>> noisy;
    for (int i = 0; i < 60; ++i) {
        const int lab = i % 2;
        noisy.push_back({std::uniform_real_distribution<>(0, 1)(g) * 0.8 + 0.2 * lab, lab});
    }
    const double auc = roc_auc(noisy);
    const auto nci = bootstrap_auc_ci(noisy, 500, 3);
    CHECK(nci.low < auc);
    CHECK(auc < nci.high);
    CHECK(nci.high - nci.low > 0.01);
}

TEST_CASE("bootstrap rejects impossible inputs") {
    CHECK_THROWS_AS(bootstrap_auc_ci({{0.5, 1}, {0.6, 1}}, 100, 1), ValidationError);
    CHECK_THROWS_AS(bootstrap_auc_ci({{0.9, 1}, {0.1, 0}}, 0, 1), ValidationError);
}

TEST_CASE("bootstrap roc band brackets the curve") {
    std::mt19937_64 g(17);
    std::vector<std::pair<double, int>> s;
    for (int i = 0; i < 50; ++i) {
        const int lab = i % 2;
        s.push_back({std::uniform_real_distribution<>(0, 1)(g) * 0.6 + 0.35 * lab, lab});
    }
    const auto band = bootstrap_roc_band(s, 150, 4);
    REQUIRE(band.fpr.size() == 101);
    REQUIRE(band.tpr_low.size() == band.fpr.size());
    REQUIRE(band.tpr_high.size() == band.fpr.size());
    for (std::size_t i = 0; i < band.fpr.size(); ++i) {
        CHECK(band.tpr_low[i] <= band.tpr_high[i]);
        CHECK(band.tpr_low[i] >= 0.0);
        CHECK(band.tpr_high[i] <= 1.0);
    }
    const auto band2 = bootstrap_roc_band(s, 150, 4);
    CHECK(band.tpr_low == band2.tpr_low);
    CHECK(band.tpr_high == band2.tpr_high);
}

TEST_CASE("fleiss kappa fixtures") {
    std::vector<std::vector<int>> perfect;
    for (int i = 0; i < 20; ++i) perfect.push_back(std::vector<int>(4, i % 2));
    CHECK(fleiss_kappa(perfect) == 1.0);

    CHECK(fleiss_kappa({{0, 1}, {1, 0}}) == Catch::Approx(-1.0).margin(1e-15));
    CHECK(fleiss_kappa({{0, 0}, {0, 0}}) == 1.0);  // unanimous single category
    // [[A,A,B],[A,B,B],[B,B,B]]: P_bar = 5/9 equals P_e -> kappa 0
    CHECK(fleiss_kappa({{0, 0, 1}, {0, 1, 1}, {1, 1, 1}}) == Catch::Approx(0.0).margin(1e-15));

    CHECK_THROWS_AS(fleiss_kappa({}), ValidationError);
    CHECK_THROWS_AS(fleiss_kappa({{0, 1}, {0}}), ValidationError);   // ragged raters
    CHECK_THROWS_AS(fleiss_kappa({{0}, {1}}), ValidationError);      // single rater
}

TEST_CASE("chi-squared test against the reference distribution") {
    const auto null_r = chi_squared_test(50, 50, 50, 50);
    CHECK(null_r.statistic == 0.0);
    CHECK(null_r.p_value == 1.0);

    boost::math::chi_squared_distribution<double> chi(1.0);
    std::mt19937_64 g(23);
    for (int trial = 0; trial < 50; ++trial) {
        const auto cell = [&] { return 1 + static_cast<std::int64_t>(g() % 40); };
        const std::int64_t a = cell(), b = cell(), c = cell(), d = cell();
        const auto r = chi_squared_test(a, b, c, d);
        const double p_ref = boost::math::cdf(boost::math::complement(chi, r.statistic));
        CHECK(std::abs(r.p_value - p_ref) < 1e-6);
    }

    CHECK_THROWS_AS(chi_squared_test(0, 0, 5, 5), AssumptionError);
    CHECK_THROWS_AS(chi_squared_test(5, 0, 5, 0), AssumptionError);
}

TEST_CASE("pooled t-test against the reference distribution") {
    const auto null_r = pooled_t_test({1.0, 2.0, 3.0}, {3.0, 2.0, 1.0});
    CHECK(null_r.statistic == 0.0);
    CHECK(null_r.p_value == 1.0);

    std::mt19937_64 g(29);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t na = 3 + g() % 10, nb = 3 + g() % 10;
        std::vector<double> a(na), b(nb);
        std::normal_distribution<double> da(0.0, 1.0), db(0.4, 1.3);
        for (auto& x : a) x = da(g);
        for (auto& x : b) x = db(g);
        const auto r = pooled_t_test(a, b);
        boost::math::students_t_distribution<double> st(double(na + nb - 2));
        const double p_ref = 2.0 * boost::math::cdf(st, -std::abs(r.statistic));
        CHECK(std::abs(r.p_value - p_ref) < 1e-6);
    }

    CHECK_THROWS_AS(pooled_t_test({1.0, 1.0}, {1.0, 1.0}), AssumptionError);
    CHECK_THROWS_AS(pooled_t_test({1.0}, {}), AssumptionError);
}

TEST_CASE("evaluate assembles a full deterministic report") {
    std::vector<std::pair<EnsemblePrediction, int>> preds;
    std::mt19937_64 g(17);
    for (int i = 0; i < 40; ++i) {
        const int label = i % 2;
        const double p = std::uniform_real_distribution<>(0, 1)(g) * 0.5 + (label ? 0.45 : 0.05);
        preds.push_back({ep(p), label});
    }
    CalibratedThreshold thr;
    thr.value = 0.5;
    const auto rep = evaluate(preds, thr, 300, 9);
    CHECK(rep.n == 40);
    CHECK(rep.confusion.total() == 40);
    CHECK(rep.auc > 0.8);
    CHECK(rep.auc_ci_95.low <= rep.auc);
    CHECK(rep.auc <= rep.auc_ci_95.high);
    CHECK(rep.per_view_auc.count(View::axial) == 1);
    CHECK(rep.bootstrap_iterations == 300);

    const std::string j1 = report_to_json(rep).dump(2);
    const std::string j2 = report_to_json(evaluate(preds, thr, 300, 9)).dump(2);
    CHECK(j1 == j2);
    const auto j = report_to_json(rep);
    for (const char* key : {"modality", "n", "confusion", "accuracy", "sensitivity",
                            "specificity", "auc", "auc_ci_95", "per_view_auc",
                            "bootstrap_iterations", "seed", "threshold"})
        CHECK(j.contains(key));

    CalibratedThreshold zero;
    zero.value = 0.0;
    CHECK(evaluate(preds, zero, 300, 9).rates.sensitivity == 1.0);
}
