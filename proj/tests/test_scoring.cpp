#include "support.hpp"

#include "thetaguard/errors.hpp"
#include "thetaguard/metrics.hpp"
#include "thetaguard/scoring.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

using namespace thetaguard;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

std::vector<std::size_t> order_of(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return idx;
}

Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

} // namespace

TEST_CASE("theta Gaussian fit") {
    const std::vector<double> flat = {1.0, 1.0, 1.0};
    CHECK_THROWS_AS(fit_theta_gaussian(flat), NumericalError);
    const std::vector<double> two = {0.0, 2.0};
    const auto ml = fit_theta_gaussian(two);
    CHECK(ml.mu0 == 1.0);
    CHECK(ml.sigma0 == 1.0);
    CHECK(ml.n_fit == 2);
    const auto unbiased = fit_theta_gaussian(two, VarianceEstimator::unbiased);
    CHECK(unbiased.sigma0 == doctest::Approx(std::sqrt(2.0)));
    const std::vector<double> one = {1.0};
    CHECK_THROWS_AS(fit_theta_gaussian(one), UsageError);
}

TEST_CASE("k1 closed forms") {
    CHECK(score_k1(0.7, {0.7, 1.0}) == doctest::Approx(0.5 * kLog2Pi).epsilon(1e-14));
    CHECK(score_k1(0.7, {0.7, 1.0}) == doctest::Approx(0.91894).epsilon(1e-5));
    // 0.5 log(2 pi 0.272^2) + 0.65^2 / (2 0.272^2), evaluated independently.
    CHECK(score_k1(1.811, {1.161, 0.272}) == doctest::Approx(2.4723324225946577).epsilon(1e-12));
}

TEST_CASE("k1 is even about mu0 and affine in z^2") {
    random::Engine rng(1);
    const ThetaGaussian g{1.161, 0.272};
    const double c = score_k1(g.mu0, g);
    for (int i = 0; i < 100000; ++i) {
        const double delta = (random::uniform01(rng) * 2.0 - 1.0) * 1.5;
        const double a = score_k1(g.mu0 + delta, g);
        const double b = score_k1(g.mu0 - delta, g);
        REQUIRE(std::abs(a - b) <= 1e-12);
        const double z = ((g.mu0 + delta) - g.mu0) / g.sigma0;
        REQUIRE(std::abs(a - (c + 0.5 * z * z)) <= 1e-10);
    }
}

TEST_CASE("k1 and abs_dev induce the same order") {
    random::Engine rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const ThetaGaussian g{0.5 + 2.0 * random::uniform01(rng), 0.05 + random::uniform01(rng)};
        std::vector<double> k1(1000);
        std::vector<double> ad(1000);
        for (std::size_t i = 0; i < 1000; ++i) {
            const double t = std::numbers::pi * random::uniform01(rng);
            k1[i] = score_k1(t, g);
            ad[i] = score_abs_dev(t, g);
        }
        CHECK(order_of(k1) == order_of(ad));
    }
    CHECK(score_abs_dev(1.2, {1.2, 0.3}) == 0.0);
    CHECK(score_abs_dev(1.7, {1.2, 0.3}) == doctest::Approx(0.5));
    CHECK(score_abs_dev(0.7, {1.2, 0.3}) == doctest::Approx(0.5));
}

TEST_CASE("mirrored deviations leave k1 AUROC unchanged") {
    random::Engine rng(3);
    const ThetaGaussian g{1.2, 0.25};
    BinaryTask outer;
    BinaryTask inner;
    for (int i = 0; i < 300; ++i) {
        const double harm = 1.85 + 0.03 * random::standard_normal(rng);
        const double norm_t = 1.2 + 0.25 * random::standard_normal(rng);
        outer.positive.push_back(score_k1(harm, g));
        outer.negative.push_back(score_k1(norm_t, g));
        inner.positive.push_back(score_k1(2.0 * g.mu0 - harm, g));
        inner.negative.push_back(score_k1(2.0 * g.mu0 - norm_t, g));
    }
    for (std::size_t i = 0; i < outer.positive.size(); ++i) {
        CHECK(std::abs(outer.positive[i] - inner.positive[i]) <= 1e-12);
    }
    CHECK(auroc(outer) == auroc(inner));
}

TEST_CASE("Gaussian NLL closed forms") {
    const auto g = GaussianModel::from_moments({0.3, -0.2}, identity(2));
    const double at_mean[2] = {0.3, -0.2};
    CHECK(g.nll(at_mean) == doctest::Approx(kLog2Pi).epsilon(1e-14));
    CHECK_FALSE(g.regularised());

    // Diagonal covariance factorises into two univariate NLLs.
    Matrix diag(2, 2);
    diag(0, 0) = 0.04;
    diag(1, 1) = 0.81;
    const auto gd = GaussianModel::from_moments({1.0, 0.5}, diag);
    const double x[2] = {1.3, -0.4};
    CHECK(gd.nll(x) == doctest::Approx(score_k1(1.3, {1.0, 0.2}) + score_k1(-0.4, {0.5, 0.9})).epsilon(1e-12));
}

TEST_CASE("bivariate: isotropic fit is radial, anisotropic fit is Mahalanobis") {
    Matrix iso(2, 2);
    iso(0, 0) = iso(1, 1) = 0.09;
    const auto g = GaussianModel::from_moments({1.0, 0.0}, iso);
    random::Engine rng(4);
    for (int i = 0; i < 100; ++i) {
        const double r = random::uniform01(rng);
        const double a = 2.0 * std::numbers::pi * random::uniform01(rng);
        const double p[2] = {1.0 + r * std::cos(a), r * std::sin(a)};
        const double expected = kLog2Pi + std::log(0.09) + 0.5 * r * r / 0.09;
        CHECK(g.nll(p) == doctest::Approx(expected).epsilon(1e-12));
    }

    Matrix aniso(2, 2);
    aniso(0, 0) = 0.01;
    aniso(1, 1) = 1.0;
    aniso(0, 1) = aniso(1, 0) = 0.05;
    const auto ga = GaussianModel::from_moments({0.0, 0.0}, aniso);
    const double dtheta[2] = {0.3, 0.0};
    const double dphi[2] = {0.0, 0.3};
    CHECK(ga.nll(dphi) < ga.nll(dtheta));
    // Mahalanobis oracle: inverse of a 2x2 by hand.
    const double det = 0.01 * 1.0 - 0.05 * 0.05;
    const double x0 = 0.2;
    const double x1 = -0.7;
    const double maha = (1.0 * x0 * x0 - 2.0 * 0.05 * x0 * x1 + 0.01 * x1 * x1) / det;
    const double pt[2] = {x0, x1};
    CHECK(ga.nll(pt) == doctest::Approx(0.5 * (2.0 * kLog2Pi + std::log(det) + maha)).epsilon(1e-12));
}

TEST_CASE("bivariate fit from coordinates") {
    std::vector<AngularCoordinates> two = {{1.0, 0.0, 1.0}, {1.1, 0.1, 1.0}};
    CHECK_THROWS_AS(fit_bivariate(two), UsageError);
    std::vector<AngularCoordinates> pts = {{1.0, 0.1, 1.0}, {1.2, -0.3, 1.0}, {0.9, 0.4, 1.0}, {1.1, 0.0, 1.0}};
    const auto g = fit_bivariate(pts);
    const double m[2] = {g.mean()[0], g.mean()[1]};
    CHECK(score_bivariate({m[0], m[1], 1.0}, pts) == doctest::Approx(g.nll(m)));
}

TEST_CASE("singular covariance is regularised or rejected") {
    Matrix rank1(2, 2);
    rank1(0, 0) = rank1(1, 1) = rank1(0, 1) = rank1(1, 0) = 0.5;
    const auto g = GaussianModel::from_moments({0.0, 0.0}, rank1);
    CHECK(g.regularised());
    CHECK(g.covariance()(0, 0) == doctest::Approx(0.5 + kCovarianceRidge));

    Matrix neg(2, 2);
    neg(0, 0) = -1.0;
    neg(1, 1) = 1.0;
    CHECK_THROWS_AS(GaussianModel::from_moments({0.0, 0.0}, neg), NumericalError);
}

TEST_CASE("multi-K with one angle reduces to k1") {
    random::Engine rng(5);
    Matrix samples(200, 1);
    std::vector<double> flat(200);
    for (std::size_t i = 0; i < 200; ++i) {
        flat[i] = samples(i, 0) = 1.2 + 0.03 * random::standard_normal(rng);
    }
    const auto gm = fit_multi_k(samples);
    const auto g1 = fit_theta_gaussian(flat);
    for (int i = 0; i < 1000; ++i) {
        const double t = std::numbers::pi * random::uniform01(rng);
        CHECK(std::abs(gm.nll(std::span<const double>(&t, 1)) - score_k1(t, g1)) <= 1e-10);
    }
    CHECK(std::abs(score_multi_k(std::vector<double>{1.3}, samples) - score_k1(1.3, g1)) <= 1e-10);
}

TEST_CASE("cosine and euclidean baselines") {
    const std::vector<double> c = {1.0, 2.0, 0.0};
    CHECK(score_cosine_centroid(c, c) == doctest::Approx(0.0).scale(1.0));
    CHECK(score_cosine_centroid(std::vector<double>{-1.0, -2.0, 0.0}, c) == doctest::Approx(2.0));
    CHECK(score_cosine_centroid(std::vector<double>{-2.0, 1.0, 5.0}, c) == doctest::Approx(1.0));
    CHECK_THROWS_AS(score_cosine_centroid(std::vector<double>{0, 0, 0}, c), DataError);

    const std::vector<double> centroid = {1.0, 1.0, 1.0, 1.0};
    CHECK(score_euclidean(centroid, centroid) == 0.0);
    CHECK(score_euclidean(std::vector<double>{4.0, 5.0, 1.0, 1.0}, centroid) == doctest::Approx(5.0));
    const std::vector<double> f = {2.0, 0.5, 1.0, -1.0};
    const std::vector<double> f2 = {4.0, 1.0, 2.0, -2.0};
    CHECK(score_euclidean(f2, centroid) != doctest::Approx(score_euclidean(f, centroid)));
    CHECK(score_cosine_centroid(f2, centroid) == doctest::Approx(score_cosine_centroid(f, centroid)));
}

TEST_CASE("harmful reference: diffuse harmful flips the sign") {
    random::Engine rng(6);
    const std::size_t d = 10;
    const Matrix harm_fit = testing::random_matrix(150, d, rng);
    const Matrix harm_held = testing::random_matrix(150, d, rng);
    // Compact normatives orthogonal to the harmful PC1 sit at theta ~ pi/2,
    // close to the harmful mean angle, so they look typical.
    const ReferenceBasis b = fit_reference(harm_fit, 1, true);
    std::vector<double> u(d);
    for (auto& x : u) {
        x = random::standard_normal(rng);
    }
    const double along = dot(u, b.direction(1));
    for (std::size_t i = 0; i < d; ++i) {
        u[i] -= along * b.direction(1)[i];
    }
    Matrix norm_held(150, d);
    for (std::size_t r = 0; r < 150; ++r) {
        for (std::size_t i = 0; i < d; ++i) {
            norm_held(r, i) = 5.0 * u[i] + 0.05 * random::standard_normal(rng);
        }
    }
    const HarmfulReference ref = fit_harmful_reference(harm_fit, harm_held, norm_held);
    CHECK(ref.orientation.sign == -1);
    CHECK(ref.orientation.auto_oriented);
    CHECK(ref.orientation.median_harmful > ref.orientation.median_normative);
    CHECK(ref.score(norm_held.row(0)) == doctest::Approx(-ref.raw_score(norm_held.row(0))));
}

TEST_CASE("harmful reference: compact harmful keeps the sign") {
    random::Engine rng(7);
    const std::size_t d = 10;
    auto compact = [&](std::size_t n) {
        Matrix m(n, d);
        for (std::size_t r = 0; r < n; ++r) {
            m(r, 0) = 10.0;
            for (std::size_t i = 0; i < d; ++i) {
                m(r, i) += (i == 1 ? 0.3 : 0.1) * random::standard_normal(rng);
            }
        }
        return m;
    };
    Matrix diffuse = testing::random_matrix(150, d, rng);
    for (auto& x : diffuse.data()) {
        x *= 3.0;
    }
    const HarmfulReference ref = fit_harmful_reference(compact(150), compact(150), diffuse);
    CHECK(ref.orientation.sign == 1);
    CHECK_FALSE(ref.orientation.auto_oriented);
    CHECK_THROWS_AS(fit_harmful_reference(compact(20), Matrix(0, d), diffuse), UsageError);
}

TEST_CASE("median") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS_AS(median({}), UsageError);
}

TEST_CASE("detector fit, score and save/load") {
    random::Engine rng(8);
    Matrix fit = testing::random_matrix(60, 12, rng, 0.4);
    for (std::size_t r = 0; r < fit.rows(); ++r) {
        fit(r, 0) += 3.0;
    }
    DetectorOptions opts;
    opts.scorers = {Scorer::k1,     Scorer::abs_dev,  Scorer::bivariate, Scorer::cosine,
                    Scorer::euclidean, Scorer::multi_k2, Scorer::multi_k3};
    const NormativeDetector det = fit_detector(fit, opts);
    CHECK(det.basis.k() == 3);
    CHECK(det.phi_basis.has_value());
    CHECK(det.multi_k.size() == 2);

    testing::TempDir dir;
    save_detector(det, dir.path());
    const NormativeDetector back = load_detector(dir.path());
    const Matrix probe = testing::random_matrix(20, 12, rng, 0.4);
    for (std::size_t r = 0; r < probe.rows(); ++r) {
        CHECK(det.score(probe.row(r)) == back.score(probe.row(r)));
    }
    CHECK(det.score(probe.row(0))[0] == doctest::Approx(score_k1(theta(probe.row(0), det.basis), det.gaussian)));
}

TEST_CASE("score table CSV round-trip") {
    random::Engine rng(9);
    const Matrix fit = testing::random_matrix(40, 8, rng, 0.5);
    const Matrix eval = testing::random_matrix(6, 8, rng, 0.5);
    const NormativeDetector det = fit_detector(fit, {});
    const std::vector<std::string> ids = {"a", "b,c", "d", "e", "f", "g"};
    const std::vector<Role> roles = {Role::normative_eval, Role::harmful, Role::harmful,
                                     Role::benign_aggressive, Role::normative_eval, Role::harmful};
    const ScoreTable table = score_rows(det, eval, ids, roles);
    std::stringstream ss;
    write_score_csv(table, ss);
    CHECK(ss.str().rfind("prompt_id,role,k1_nll,abs_dev,bivariate_nll,cosine_centroid,euclidean\n", 0) == 0);
    const ScoreTable back = read_score_csv(ss);
    REQUIRE(back.rows.size() == table.rows.size());
    CHECK(back.scorers == table.scorers);
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        CHECK(back.rows[i].prompt_id == table.rows[i].prompt_id);
        CHECK(back.rows[i].role == table.rows[i].role);
        CHECK(back.rows[i].scores == table.rows[i].scores);
    }
    CHECK(table.column(Scorer::k1, Role::harmful).size() == 3);
}

TEST_CASE("scorer names") {
    for (Scorer s : kAllScorers) {
        CHECK(scorer_from_string(to_string(s)) == s);
    }
    CHECK(scorer_from_string("k1") == Scorer::k1);
    CHECK(scorer_from_string("cosine") == Scorer::cosine);
    CHECK(scorer_from_string("multi_k2") == Scorer::multi_k2);
    CHECK(multi_k_scorer(1) == Scorer::k1);
    CHECK(angle_count(Scorer::multi_k4) == 4);
    CHECK_THROWS_AS(scorer_from_string("nope"), UsageError);
}
