#include "thetaguard/linalg.hpp"

#include "thetaguard/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace thetaguard {

double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double norm(std::span<const double> a) noexcept {
    return std::sqrt(dot(a, a));
}

std::vector<double> column_mean(const Matrix& m) {
    std::vector<double> mean(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) {
            mean[c] += row[c];
        }
    }
    if (m.rows() > 0) {
        for (auto& v : mean) {
            v /= static_cast<double>(m.rows());
        }
    }
    return mean;
}

namespace {

// Householder reduction to tridiagonal form. On return `v` holds the
// accumulated orthogonal transform, `d` the diagonal and `e` the
// sub-diagonal (e[0] unused).
void tridiagonalize(Matrix& v, std::vector<double>& d, std::vector<double>& e) {
    const std::size_t n = v.rows();
    for (std::size_t j = 0; j < n; ++j) {
        d[j] = v(n - 1, j);
    }

    for (std::size_t i = n - 1; i > 0; --i) {
        double scale = 0.0;
        double h = 0.0;
        for (std::size_t k = 0; k < i; ++k) {
            scale += std::abs(d[k]);
        }
        if (scale == 0.0) {
            e[i] = d[i - 1];
            for (std::size_t j = 0; j < i; ++j) {
                d[j] = v(i - 1, j);
                v(i, j) = 0.0;
                v(j, i) = 0.0;
            }
        } else {
            for (std::size_t k = 0; k < i; ++k) {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            double f = d[i - 1];
            double g = std::sqrt(h);
            if (f > 0) {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for (std::size_t j = 0; j < i; ++j) {
                e[j] = 0.0;
            }

            for (std::size_t j = 0; j < i; ++j) {
                f = d[j];
                v(j, i) = f;
                g = e[j] + v(j, j) * f;
                for (std::size_t k = j + 1; k + 1 <= i; ++k) {
                    g += v(k, j) * d[k];
                    e[k] += v(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for (std::size_t j = 0; j < i; ++j) {
                e[j] /= h;
                f += e[j] * d[j];
            }
            const double hh = f / (h + h);
            for (std::size_t j = 0; j < i; ++j) {
                e[j] -= hh * d[j];
            }
            for (std::size_t j = 0; j < i; ++j) {
                f = d[j];
                g = e[j];
                for (std::size_t k = j; k + 1 <= i; ++k) {
                    v(k, j) -= (f * e[k] + g * d[k]);
                }
                d[j] = v(i - 1, j);
                v(i, j) = 0.0;
            }
        }
        d[i] = h;
    }

    for (std::size_t i = 0; i + 1 < n; ++i) {
        v(n - 1, i) = v(i, i);
        v(i, i) = 1.0;
        const double h = d[i + 1];
        if (h != 0.0) {
            for (std::size_t k = 0; k <= i; ++k) {
                d[k] = v(k, i + 1) / h;
            }
            for (std::size_t j = 0; j <= i; ++j) {
                double g = 0.0;
                for (std::size_t k = 0; k <= i; ++k) {
                    g += v(k, i + 1) * v(k, j);
                }
                for (std::size_t k = 0; k <= i; ++k) {
                    v(k, j) -= g * d[k];
                }
            }
        }
        for (std::size_t k = 0; k <= i; ++k) {
            v(k, i + 1) = 0.0;
        }
    }
    for (std::size_t j = 0; j < n; ++j) {
        d[j] = v(n - 1, j);
        v(n - 1, j) = 0.0;
    }
    v(n - 1, n - 1) = 1.0;
    e[0] = 0.0;
}

// Implicit QL on the tridiagonal form; eigenvectors land in the columns of v.
void tridiagonal_ql(Matrix& v, std::vector<double>& d, std::vector<double>& e) {
    const std::size_t n = v.rows();
    for (std::size_t i = 1; i < n; ++i) {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    double f = 0.0;
    double tst1 = 0.0;
    const double eps = std::ldexp(1.0, -52);
    const int max_sweeps = 60 * static_cast<int>(n) + 60;

    for (std::size_t l = 0; l < n; ++l) {
        tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
        std::size_t m = l;
        while (m < n) {
            if (std::abs(e[m]) <= eps * tst1) {
                break;
            }
            ++m;
        }
        if (m > l) {
            int iter = 0;
            do {
                if (++iter > max_sweeps) {
                    throw NumericalError("symmetric eigensolver failed to converge");
                }
                double g = d[l];
                double p = (d[l + 1] - g) / (2.0 * e[l]);
                double r = std::hypot(p, 1.0);
                if (p < 0) {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                const double dl1 = d[l + 1];
                double h = g - d[l];
                for (std::size_t i = l + 2; i < n; ++i) {
                    d[i] -= h;
                }
                f += h;

                p = d[m];
                double c = 1.0;
                double c2 = c;
                double c3 = c;
                const double el1 = e[l + 1];
                double s = 0.0;
                double s2 = 0.0;
                for (std::size_t ii = m; ii-- > l;) {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[ii];
                    h = c * p;
                    r = std::hypot(p, e[ii]);
                    e[ii + 1] = s * r;
                    s = e[ii] / r;
                    c = p / r;
                    p = c * d[ii] - s * g;
                    d[ii + 1] = h + s * (c * g + s * d[ii]);
                    for (std::size_t k = 0; k < n; ++k) {
                        h = v(k, ii + 1);
                        v(k, ii + 1) = s * v(k, ii) + c * h;
                        v(k, ii) = c * v(k, ii) - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
            } while (std::abs(e[l]) > eps * tst1);
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

// Modified Gram-Schmidt on the columns of q (m x b). Columns that collapse are
// replaced by the first unused canonical basis vector that survives.
void orthonormalize_columns(Matrix& q) {
    const std::size_t m = q.rows();
    const std::size_t b = q.cols();
    std::size_t next_unit = 0;
    for (std::size_t j = 0; j < b; ++j) {
        for (int attempt = 0;; ++attempt) {
            for (std::size_t pass = 0; pass < 2; ++pass) {
                for (std::size_t i = 0; i < j; ++i) {
                    double proj = 0.0;
                    for (std::size_t r = 0; r < m; ++r) {
                        proj += q(r, i) * q(r, j);
                    }
                    for (std::size_t r = 0; r < m; ++r) {
                        q(r, j) -= proj * q(r, i);
                    }
                }
            }
            double nrm = 0.0;
            for (std::size_t r = 0; r < m; ++r) {
                nrm += q(r, j) * q(r, j);
            }
            nrm = std::sqrt(nrm);
            if (nrm > 1e-300 && attempt < static_cast<int>(m) + 1) {
                for (std::size_t r = 0; r < m; ++r) {
                    q(r, j) /= nrm;
                }
                break;
            }
            if (next_unit >= m) {
                throw NumericalError("cannot build an orthonormal starting block");
            }
            for (std::size_t r = 0; r < m; ++r) {
                q(r, j) = (r == next_unit) ? 1.0 : 0.0;
            }
            ++next_unit;
        }
    }
}

Matrix multiply(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

EigenPairs truncate(EigenPairs all, std::size_t count) {
    EigenPairs out;
    out.values.assign(all.values.begin(), all.values.begin() + static_cast<std::ptrdiff_t>(count));
    out.vectors = Matrix(count, all.vectors.cols());
    for (std::size_t k = 0; k < count; ++k) {
        std::copy(all.vectors.row(k).begin(), all.vectors.row(k).end(), out.vectors.row(k).begin());
    }
    return out;
}

// Block orthogonal iteration with a Rayleigh-Ritz step each sweep. Returns
// false when the leading `count` residuals fail to reach tolerance.
bool orthogonal_iteration(const Matrix& s, std::size_t count, EigenPairs& out) {
    const std::size_t m = s.rows();
    const std::size_t b = std::min(m, count + 8);

    // Starting block: the columns of s with the largest diagonal entries.
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return s(x, x) > s(y, y); });
    Matrix q(m, b);
    for (std::size_t j = 0; j < b; ++j) {
        for (std::size_t r = 0; r < m; ++r) {
            q(r, j) = s(r, order[j]);
        }
    }
    orthonormalize_columns(q);

    double scale = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        scale = std::max(scale, std::abs(s(i, i)));
    }
    scale = std::max(scale, 1e-300);

    for (int iter = 0; iter < kMaxIterations; ++iter) {
        Matrix z = multiply(s, q);  // m x b

        // Rayleigh-Ritz: t = q^T s q, rotate q onto the Ritz vectors.
        Matrix t(b, b);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = i; j < b; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    acc += q(r, i) * z(r, j);
                }
                t(i, j) = acc;
                t(j, i) = acc;
            }
        }
        const EigenPairs ritz = symmetric_eigen(t);
        Matrix w(b, b);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < b; ++j) {
                w(i, j) = ritz.vectors(j, i);
            }
        }
        const Matrix qr = multiply(q, w);
        const Matrix zr = multiply(z, w);

        bool converged = true;
        for (std::size_t k = 0; k < count && converged; ++k) {
            double res = 0.0;
            for (std::size_t r = 0; r < m; ++r) {
                const double d = zr(r, k) - ritz.values[k] * qr(r, k);
                res += d * d;
            }
            converged = std::sqrt(res) <= kIterationTolerance * scale;
        }
        if (converged) {
            out.values.assign(ritz.values.begin(), ritz.values.begin() + static_cast<std::ptrdiff_t>(count));
            out.vectors = Matrix(count, m);
            for (std::size_t k = 0; k < count; ++k) {
                for (std::size_t r = 0; r < m; ++r) {
                    out.vectors(k, r) = qr(r, k);
                }
            }
            return true;
        }
        q = zr;
        orthonormalize_columns(q);
    }
    return false;
}

} // namespace

EigenPairs symmetric_eigen(const Matrix& sym) {
    const std::size_t n = sym.rows();
    if (n == 0 || sym.cols() != n) {
        throw UsageError("symmetric_eigen requires a non-empty square matrix");
    }
    Matrix v = sym;
    std::vector<double> d(n);
    std::vector<double> e(n);
    if (n == 1) {
        return EigenPairs{{sym(0, 0)}, Matrix(1, 1, 1.0)};
    }
    tridiagonalize(v, d, e);
    tridiagonal_ql(v, d, e);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });

    EigenPairs out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = d[order[k]];
        for (std::size_t r = 0; r < n; ++r) {
            out.vectors(k, r) = v(r, order[k]);
        }
    }
    return out;
}

EigenPairs top_eigenpairs(const Matrix& sym, std::size_t count, EigenMethod method) {
    const std::size_t m = sym.rows();
    if (count == 0 || count > m) {
        throw UsageError(fmt::format("requested {} eigenpairs of a {}x{} matrix", count, m, m));
    }
    const bool dense = method == EigenMethod::dense ||
                       (method == EigenMethod::automatic && m <= kDenseLimit);
    if (!dense) {
        EigenPairs out;
        if (orthogonal_iteration(sym, count, out)) {
            return out;
        }
    }
    return truncate(symmetric_eigen(sym), count);
}

PrincipalAxes principal_axes(const Matrix& x, std::size_t count, bool centered, EigenMethod method) {
    const std::size_t n = x.rows();
    const std::size_t dim = x.cols();
    PrincipalAxes out;
    out.mean = column_mean(x);

    Matrix y = x;
    if (centered) {
        for (std::size_t r = 0; r < n; ++r) {
            auto row = y.row(r);
            for (std::size_t c = 0; c < dim; ++c) {
                row[c] -= out.mean[c];
            }
        }
    }

    out.axes = Matrix(count, dim);
    out.variances.assign(count, 0.0);
    const double inv_n = 1.0 / static_cast<double>(n);

    if (n <= dim) {
        Matrix gram(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i; j < n; ++j) {
                const double g = dot(y.row(i), y.row(j));
                gram(i, j) = g;
                gram(j, i) = g;
            }
        }
        const EigenPairs eig = top_eigenpairs(gram, count, method);
        for (std::size_t k = 0; k < count; ++k) {
            const double lambda = eig.values[k];
            out.variances[k] = std::max(lambda, 0.0) * inv_n;
            if (lambda <= 0.0) {
                continue;
            }
            auto axis = out.axes.row(k);
            for (std::size_t i = 0; i < n; ++i) {
                const double u = eig.vectors(k, i);
                const auto row = y.row(i);
                for (std::size_t c = 0; c < dim; ++c) {
                    axis[c] += u * row[c];
                }
            }
        }
    } else {
        Matrix scatter(dim, dim);
        for (std::size_t r = 0; r < n; ++r) {
            const auto row = y.row(r);
            for (std::size_t i = 0; i < dim; ++i) {
                const double yi = row[i];
                for (std::size_t j = i; j < dim; ++j) {
                    scatter(i, j) += yi * row[j];
                }
            }
        }
        for (std::size_t i = 0; i < dim; ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                scatter(i, j) = scatter(j, i);
            }
        }
        const EigenPairs eig = top_eigenpairs(scatter, count, method);
        for (std::size_t k = 0; k < count; ++k) {
            out.variances[k] = std::max(eig.values[k], 0.0) * inv_n;
            std::copy(eig.vectors.row(k).begin(), eig.vectors.row(k).end(), out.axes.row(k).begin());
        }
    }

    // Re-orthonormalise in order; this only removes roundoff for well-posed fits.
    for (std::size_t k = 0; k < count; ++k) {
        auto axis = out.axes.row(k);
        for (std::size_t pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < k; ++j) {
                const auto prev = out.axes.row(j);
                const double proj = dot(axis, prev);
                for (std::size_t c = 0; c < dim; ++c) {
                    axis[c] -= proj * prev[c];
                }
            }
        }
        const double nrm = norm(axis);
        if (nrm > 0.0) {
            for (auto& v : axis) {
                v /= nrm;
            }
        }
    }
    return out;
}

} // namespace thetaguard
