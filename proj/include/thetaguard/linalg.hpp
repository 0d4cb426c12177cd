#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace thetaguard {

// Dense row-major matrix of doubles. Rows are activations throughout the
// library, so row access is the hot path.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b) noexcept;
double norm(std::span<const double> a) noexcept;

std::vector<double> column_mean(const Matrix& m);

// Eigenpairs of a symmetric matrix, eigenvalues in descending order and the
// matching unit eigenvectors stored as rows of `vectors`.
struct EigenPairs {
    std::vector<double> values;
    Matrix vectors;
};

// Full eigendecomposition (Householder tridiagonalisation + implicit QL).
EigenPairs symmetric_eigen(const Matrix& sym);

enum class EigenMethod { automatic, dense, iterative };

// Leading `count` eigenpairs of a symmetric positive semi-definite matrix.
// `automatic` uses the dense solver up to kDenseLimit rows and block
// orthogonal iteration with Rayleigh-Ritz above it, falling back to the dense
// solver when iteration does not converge.
EigenPairs top_eigenpairs(const Matrix& sym, std::size_t count,
                          EigenMethod method = EigenMethod::automatic);

inline constexpr std::size_t kDenseLimit = 256;
inline constexpr double kIterationTolerance = 1e-10;
inline constexpr int kMaxIterations = 10000;

// Principal axes of the rows of `x`. Uses the N x N Gram matrix when N <= D
// and the D x D scatter matrix otherwise.
struct PrincipalAxes {
    Matrix axes;                    // count x D, unit rows
    std::vector<double> variances;  // per-axis variance, ML (divided by N)
    std::vector<double> mean;       // column mean of x
};

PrincipalAxes principal_axes(const Matrix& x, std::size_t count, bool centered,
                             EigenMethod method = EigenMethod::automatic);

} // namespace thetaguard
