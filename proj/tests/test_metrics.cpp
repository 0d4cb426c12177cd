#include "support.hpp"

#include "thetaguard/errors.hpp"
#include "thetaguard/metrics.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <sstream>

using namespace thetaguard;

namespace {

BinaryTask task(std::vector<double> pos, std::vector<double> neg) {
    return BinaryTask{std::move(pos), std::move(neg), TaskKind::harmful_vs_normative};
}

double brute_u(const BinaryTask& t) {
    double u = 0.0;
    for (double p : t.positive) {
        for (double n : t.negative) {
            u += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
        }
    }
    return u;
}

// Scores drawn from a small integer grid so that ties are common.
BinaryTask random_task(random::Engine& rng, bool ties) {
    const std::size_t n1 = 1 + random::uniform_index(rng, 500);
    const std::size_t n0 = 1 + random::uniform_index(rng, 500);
    auto draw = [&](double shift) {
        const double x = random::standard_normal(rng) + shift;
        return ties ? std::round(x * 2.0) : x;
    };
    BinaryTask t;
    for (std::size_t i = 0; i < n1; ++i) {
        t.positive.push_back(draw(0.7));
    }
    for (std::size_t i = 0; i < n0; ++i) {
        t.negative.push_back(draw(0.0));
    }
    return t;
}

BinaryTask transform(const BinaryTask& t, double (*f)(double)) {
    BinaryTask out = t;
    for (auto& x : out.positive) {
        x = f(x);
    }
    for (auto& x : out.negative) {
        x = f(x);
    }
    return out;
}

} // namespace

TEST_CASE("auroc examples") {
    CHECK(auroc(task({2, 3}, {0, 1})) == 1.0);
    CHECK(auroc(task({1}, {1})) == 0.5);
    CHECK(auroc(task({0.9, 0.2}, {0.5, 0.1})) == 0.75);
    CHECK(auroc(task({0, 1}, {2, 3})) == 0.0);
    CHECK_THROWS_AS(auroc(task({}, {1})), UsageError);
}

TEST_CASE("average precision examples") {
    CHECK(auprc(task({2, 3}, {0, 1})) == 1.0);
    CHECK(auprc(task({3, 1}, {2})) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
    CHECK(auprc(task({1}, {1, 1, 1})) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("precision at recall examples") {
    CHECK(precision_at_recall(task({2, 3}, {0, 1}), 0.9) == 1.0);
    CHECK(precision_at_recall(task({3, 1}, {2}), 0.9) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(precision_at_recall(task({3, 1}, {2}), 0.5) == 1.0);
}

TEST_CASE("pr curve") {
    const auto perfect = pr_curve(task({2, 3}, {0, 1}));
    REQUIRE_FALSE(perfect.empty());
    for (const auto& p : perfect) {
        CHECK(p.precision == 1.0);
    }
    CHECK(perfect.back().recall == 1.0);
    const auto mixed = pr_curve(task({3, 1}, {2}));
    REQUIRE(mixed.size() == 3);
    CHECK(mixed[1].recall == 0.5);
    CHECK(mixed[1].precision == 0.5);
    CHECK(mixed[2].precision == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("Mann-Whitney examples") {
    CHECK(mann_whitney_u(task({2, 3}, {0, 1})).u == 4.0);
    for (std::size_t n : {1ul, 5ul, 40ul}) {
        std::vector<double> g(n);
        for (std::size_t i = 0; i < n; ++i) {
            g[i] = static_cast<double>(i % 7);
        }
        const auto mw = mann_whitney_u(task(g, g));
        CHECK(mw.u == static_cast<double>(n * n) / 2.0);
        CHECK(mw.p == doctest::Approx(1.0));
    }
    const auto one = mann_whitney_u(task({1, 1}, {1, 1}));
    CHECK(one.p == 1.0);
    CHECK(one.z == 0.0);
}

TEST_CASE("p-values for separated groups reach the reporting floor") {
    random::Engine rng(11);
    BinaryTask t;
    for (int i = 0; i < 520; ++i) {
        t.positive.push_back(10.0 + random::standard_normal(rng));
        t.negative.push_back(random::standard_normal(rng));
    }
    const auto mw = mann_whitney_u(t);
    CHECK(mw.p < 1e-45);
    CHECK(mw.p >= kMinReportedP);
    CHECK(mw.log10_p < -45.0);
    CHECK(std::isfinite(mw.log10_p));

    // Far beyond the double range: clamped p, finite log10 p.
    BinaryTask big;
    for (int i = 0; i < 20000; ++i) {
        big.positive.push_back(100.0 + i);
        big.negative.push_back(-100.0 - i);
    }
    const auto huge = mann_whitney_u(big);
    CHECK(huge.p == kMinReportedP);
    CHECK(huge.log10_p < -300.0);
    CHECK(std::isfinite(huge.log10_p));
}

TEST_CASE("normal approximation against a hand computation") {
    // pos=[4,5,6], neg=[1,2,3]: U=9, mean 4.5, var = 3*3*7/12 = 5.25.
    const auto mw = mann_whitney_u(task({4, 5, 6}, {1, 2, 3}));
    const double z = (9.0 - 4.5 - 0.5) / std::sqrt(5.25);
    CHECK(mw.z == doctest::Approx(z).epsilon(1e-12));
    CHECK(mw.p == doctest::Approx(std::erfc(z / std::sqrt(2.0))).epsilon(1e-12));

    // Tie correction: pos=[1,2,2], neg=[2,3]; tie group of size 3.
    const auto tied = mann_whitney_u(task({1, 2, 2}, {2, 3}));
    const double n1 = 3;
    const double n2 = 2;
    const double n = 5;
    const double var = n1 * n2 / 12.0 * ((n + 1) - (27.0 - 3.0) / (n * (n - 1)));
    const double u = 1.0;  // two ties count 1/2 each
    CHECK(tied.u == u);
    const double zt = (u - n1 * n2 / 2.0 + 0.5) / std::sqrt(var);
    CHECK(tied.z == doctest::Approx(zt).epsilon(1e-12));
}

TEST_CASE("rank-biserial") {
    CHECK(rank_biserial(task({2, 3}, {0, 1})) == 1.0);
    CHECK(rank_biserial(task({1, 2}, {1, 2})) == 0.0);
    CHECK(rank_biserial(task({0.9, 0.2}, {0.5, 0.1})) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("auroc and U agree with brute force") {
    random::Engine rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const BinaryTask t = random_task(rng, trial % 2 == 0);
        const double u = brute_u(t);
        const double n1n0 = static_cast<double>(t.positive.size() * t.negative.size());
        const auto mw = mann_whitney_u(t);
        REQUIRE(mw.u == u);
        REQUIRE(auroc(t) == u / n1n0);
        REQUIRE(std::abs(rank_biserial(t) - (2.0 * auroc(t) - 1.0)) <= 1e-12);

        const BinaryTask swapped = task(t.negative, t.positive);
        REQUIRE(mann_whitney_u(swapped).u + mw.u == n1n0);
        REQUIRE(auroc(t) + auroc(swapped) == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("strictly monotone transforms leave every metric unchanged") {
    random::Engine rng(13);
    double (*maps[])(double) = {
        [](double x) { return std::exp(x); },
        [](double x) { return 3.0 * x - 7.0; },
        [](double x) { return std::atan(x); },
        [](double x) { return x * x * x; },
    };
    for (int trial = 0; trial < 40; ++trial) {
        const BinaryTask t = random_task(rng, trial % 2 == 1);
        const TaskMetrics base = evaluate_task(t);
        for (auto f : maps) {
            const TaskMetrics m = evaluate_task(transform(t, f));
            CHECK(m.auroc == base.auroc);
            CHECK(m.auprc == base.auprc);
            CHECK(m.prec_at_recall == base.prec_at_recall);
            CHECK(m.u_statistic == base.u_statistic);
            CHECK(m.rank_biserial == base.rank_biserial);
            CHECK(m.p_value == base.p_value);
        }
    }
}

TEST_CASE("average precision against a brute-force sweep") {
    random::Engine rng(14);
    for (int trial = 0; trial < 100; ++trial) {
        const BinaryTask t = random_task(rng, trial % 2 == 0);
        // Oracle: for each distinct threshold, precision at that threshold
        // weighted by the recall gained.
        std::vector<double> thresholds = t.positive;
        thresholds.insert(thresholds.end(), t.negative.begin(), t.negative.end());
        std::sort(thresholds.begin(), thresholds.end());
        thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
        double ap = 0.0;
        double prev_recall = 0.0;
        for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
            double tp = 0.0;
            double fp = 0.0;
            for (double p : t.positive) {
                tp += p >= *it ? 1.0 : 0.0;
            }
            for (double n : t.negative) {
                fp += n >= *it ? 1.0 : 0.0;
            }
            const double recall = tp / static_cast<double>(t.positive.size());
            ap += (recall - prev_recall) * tp / (tp + fp);
            prev_recall = recall;
        }
        CHECK(auprc(t) == doctest::Approx(ap).epsilon(1e-12));
    }
}

TEST_CASE("report serialisation") {
    ScoreTable table;
    table.scorers = {Scorer::k1, Scorer::cosine};
    table.rows = {{"n0", Role::normative_eval, {0.1, 0.2}}, {"n1", Role::normative_eval, {0.3, 0.1}},
                  {"h0", Role::harmful, {2.0, 0.5}},        {"h1", Role::harmful, {1.5, 0.05}},
                  {"b0", Role::benign_aggressive, {0.4, 0.3}}};
    const EvalReport report = evaluate_table(table, 3);
    CHECK(report.entries.size() == 2 * kAllTasks.size());
    CHECK(report.at(3, Scorer::k1, TaskKind::harmful_vs_normative).metrics.auroc == 1.0);
    CHECK(report.at(3, Scorer::k1, TaskKind::harmful_vs_rest).metrics.n_negative == 3);
    CHECK(report.at(3, Scorer::k1, TaskKind::benign_vs_normative).metrics.n_positive == 1);
    CHECK(report.find(4, Scorer::k1, TaskKind::harmful_vs_normative) == nullptr);
    CHECK_THROWS(report.at(4, Scorer::k1, TaskKind::harmful_vs_normative));

    std::ostringstream csv;
    write_report_csv(report, csv);
    const std::string text = csv.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 8);
    const auto js = report_to_json(report);
    CHECK(js.is_array());
    CHECK(js.size() == 8);

    for (TaskKind k : kAllTasks) {
        CHECK(task_from_string(to_string(k)) == k);
    }
}
