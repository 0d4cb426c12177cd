#include "support.hpp"

#include "thetaguard/linalg.hpp"

#include <Eigen/Dense>
#include <doctest.h>

#include <cmath>

using namespace thetaguard;

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m(r, c);
        }
    }
    return out;
}

Matrix random_psd(std::size_t n, std::size_t rank, random::Engine& rng) {
    const Matrix a = testing::random_matrix(rank, n, rng);
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double v = 0.0;
            for (std::size_t k = 0; k < rank; ++k) {
                v += a(k, i) * a(k, j);
            }
            s(i, j) = v;
        }
    }
    return s;
}

double abs_dot(std::span<const double> a, const Eigen::VectorXd& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b(static_cast<Eigen::Index>(i));
    }
    return std::abs(s);
}

} // namespace

TEST_CASE("symmetric_eigen agrees with the oracle") {
    random::Engine rng(101);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + random::uniform_index(rng, 40);
        Matrix s = testing::random_matrix(n, n, rng);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                s(i, j) = s(j, i);
            }
        }
        const EigenPairs ours = symmetric_eigen(s);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(to_eigen(s));
        const auto& vals = oracle.eigenvalues();  // ascending
        REQUIRE(ours.values.size() == n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto oi = static_cast<Eigen::Index>(n - 1 - i);
            CHECK(ours.values[i] == doctest::Approx(vals(oi)).epsilon(1e-9).scale(1.0));
            // Residual check is basis-independent, so repeated values are fine.
            const auto v = ours.vectors.row(i);
            double resid = 0.0;
            for (std::size_t r = 0; r < n; ++r) {
                double sv = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    sv += s(r, c) * v[c];
                }
                resid = std::max(resid, std::abs(sv - ours.values[i] * v[r]));
            }
            CHECK(resid < 1e-9);
            CHECK(norm(v) == doctest::Approx(1.0).epsilon(1e-12));
        }
        for (std::size_t i = 1; i < n; ++i) {
            CHECK(ours.values[i - 1] >= ours.values[i]);
        }
    }
}

TEST_CASE("iterative and dense routes agree above the dense limit") {
    random::Engine rng(7);
    for (std::size_t n : {300ul, 420ul}) {
        const Matrix s = random_psd(n, 40, rng);
        const EigenPairs dense = top_eigenpairs(s, 5, EigenMethod::dense);
        const EigenPairs iter = top_eigenpairs(s, 5, EigenMethod::iterative);
        const EigenPairs autom = top_eigenpairs(s, 5, EigenMethod::automatic);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(to_eigen(s));
        for (std::size_t i = 0; i < 5; ++i) {
            const auto oi = static_cast<Eigen::Index>(n - 1 - i);
            const Eigen::VectorXd ov = oracle.eigenvectors().col(oi);
            CHECK(iter.values[i] == doctest::Approx(oracle.eigenvalues()(oi)).epsilon(1e-9));
            CHECK(dense.values[i] == doctest::Approx(oracle.eigenvalues()(oi)).epsilon(1e-9));
            CHECK(abs_dot(iter.vectors.row(i), ov) >= 1.0 - 1e-8);
            CHECK(abs_dot(dense.vectors.row(i), ov) >= 1.0 - 1e-8);
            CHECK(abs_dot(autom.vectors.row(i), ov) >= 1.0 - 1e-8);
        }
    }
}

TEST_CASE("principal axes: Gram and scatter paths match the oracle") {
    random::Engine rng(33);
    // Wide (Gram trick) and tall (scatter matrix) shapes, centred and not.
    const std::pair<std::size_t, std::size_t> shapes[] = {{12, 40}, {60, 8}, {30, 30}, {300, 20}};
    for (const auto& [n, d] : shapes) {
        Matrix x = testing::random_matrix(n, d, rng, 0.5);
        for (std::size_t r = 0; r < n; ++r) {
            x(r, 0) *= 4.0;
            x(r, 1) *= 2.5;
        }
        for (bool centered : {true, false}) {
            const std::size_t k = 3;
            const PrincipalAxes pa = principal_axes(x, k, centered);
            Eigen::MatrixXd ex = to_eigen(x);
            if (centered) {
                ex.rowwise() -= ex.colwise().mean();
            }
            const Eigen::MatrixXd cov = ex.transpose() * ex / static_cast<double>(n);
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(cov);
            for (std::size_t i = 0; i < k; ++i) {
                const auto oi = static_cast<Eigen::Index>(d - 1 - i);
                CHECK(pa.variances[i] == doctest::Approx(oracle.eigenvalues()(oi)).epsilon(1e-9));
                CHECK(abs_dot(pa.axes.row(i), oracle.eigenvectors().col(oi)) >= 1.0 - 1e-8);
            }
        }
    }
}

TEST_CASE("column mean, dot and norm") {
    Matrix m(2, 3);
    m(0, 0) = 1;
    m(0, 1) = 2;
    m(0, 2) = 3;
    m(1, 0) = 3;
    m(1, 1) = 2;
    m(1, 2) = 1;
    CHECK(column_mean(m) == std::vector<double>{2, 2, 2});
    CHECK(dot(m.row(0), m.row(1)) == 10.0);
    CHECK(norm(m.row(0)) == doctest::Approx(std::sqrt(14.0)));
}

TEST_CASE("eigen solvers are deterministic") {
    random::Engine rng(9);
    const Matrix s = random_psd(280, 30, rng);
    const EigenPairs a = top_eigenpairs(s, 4);
    const EigenPairs b = top_eigenpairs(s, 4);
    CHECK(a.values == b.values);
    CHECK(a.vectors == b.vectors);
}
