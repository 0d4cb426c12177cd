#include "thetaguard/geometry.hpp"

#include "binary_io.hpp"
#include "thetaguard/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace thetaguard {

namespace {

// Returns the anchor used: "mean" or "max-coordinate".
std::string fix_sign(std::span<double> axis, std::span<const double> mean) {
    const double d = dot(axis, mean);
    if (std::abs(d) > kSignTieTolerance) {
        if (d < 0) {
            for (auto& v : axis) {
                v = -v;
            }
        }
        return "mean";
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < axis.size(); ++i) {
        if (std::abs(axis[i]) > std::abs(axis[best])) {
            best = i;
        }
    }
    if (axis[best] < 0) {
        for (auto& v : axis) {
            v = -v;
        }
    }
    return "max-coordinate";
}

void check_rows(const Matrix& rows, const char* what) {
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        const auto row = rows.row(r);
        if (std::any_of(row.begin(), row.end(), [](double v) { return !std::isfinite(v); })) {
            throw DataError(fmt::format("{}: row {} is not finite", what, r));
        }
        if (norm(row) == 0.0) {
            throw DataError(fmt::format("{}: row {} has zero norm", what, r));
        }
    }
}

double clamped_acos(double cosine) {
    return std::acos(std::clamp(cosine, -1.0, 1.0));
}

std::vector<double> perpendicular(std::span<const double> f, std::span<const double> c) {
    const double along = dot(f, c);
    std::vector<double> out(f.begin(), f.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= along * c[i];
    }
    return out;
}

} // namespace

ReferenceBasis fit_reference(const Matrix& fit_rows, std::size_t k, bool centered, EigenMethod method) {
    const std::size_t n = fit_rows.rows();
    const std::size_t dim = fit_rows.cols();
    if (n < 2) {
        throw UsageError(fmt::format("fit_reference needs at least 2 rows, got {}", n));
    }
    if (k < 1 || k > std::min(n - 1, dim)) {
        throw UsageError(fmt::format("K={} outside [1, min(N-1, D)] = [1, {}]", k, std::min(n - 1, dim)));
    }
    check_rows(fit_rows, "fit_reference");

    PrincipalAxes pca = principal_axes(fit_rows, k, centered, method);
    for (std::size_t i = 0; i < k; ++i) {
        if (!(pca.variances[i] >= kMinAxisVariance)) {
            throw NumericalError(fmt::format("PC{} undefined: variance {:.3g} below {:.0e} (rank-deficient fit set)",
                                             i + 1, pca.variances[i], kMinAxisVariance));
        }
    }

    ReferenceBasis basis;
    basis.centered = centered;
    basis.fit_mean = pca.mean;
    basis.variances = pca.variances;
    std::string anchors;
    for (std::size_t i = 0; i < k; ++i) {
        const std::string used = fix_sign(pca.axes.row(i), basis.fit_mean);
        anchors += fmt::format("{}c{}:{}", i == 0 ? "" : ",", i + 1, used);
    }
    basis.sign_anchor = std::move(anchors);
    basis.directions = std::move(pca.axes);
    return basis;
}

double theta(std::span<const double> f, const ReferenceBasis& basis, std::size_t component) {
    if (component < 1 || component > basis.k()) {
        throw UsageError(fmt::format("component {} outside [1, {}]", component, basis.k()));
    }
    if (f.size() != basis.dim()) {
        throw UsageError(fmt::format("activation has dimension {}, reference has {}", f.size(), basis.dim()));
    }
    const double n = norm(f);
    if (!(n > 0.0)) {
        throw DataError("theta undefined for a zero-norm activation");
    }
    return clamped_acos(dot(f, basis.direction(component)) / n);
}

std::vector<double> thetas(std::span<const double> f, const ReferenceBasis& basis) {
    std::vector<double> out(basis.k());
    for (std::size_t i = 0; i < basis.k(); ++i) {
        out[i] = theta(f, basis, i + 1);
    }
    return out;
}

PhiBasis fit_phi_basis(const Matrix& fit_rows, const ReferenceBasis& basis) {
    const std::size_t n = fit_rows.rows();
    if (n < 3) {
        throw UsageError(fmt::format("fit_phi_basis needs at least 3 rows, got {}", n));
    }
    if (fit_rows.cols() != basis.dim()) {
        throw UsageError("fit_phi_basis: dimension mismatch with reference");
    }
    const auto c = basis.direction(1);
    Matrix projected(n, fit_rows.cols());
    for (std::size_t r = 0; r < n; ++r) {
        const auto perp = perpendicular(fit_rows.row(r), c);
        std::copy(perp.begin(), perp.end(), projected.row(r).begin());
    }
    if (fit_rows.cols() < 3) {
        throw NumericalError("orthogonal complement of c has fewer than 2 dimensions");
    }
    PrincipalAxes pca = principal_axes(projected, 2, basis.centered);
    if (!(pca.variances[1] >= kMinAxisVariance)) {
        throw NumericalError(fmt::format("phi basis undefined: second variance {:.3g} in the orthogonal complement",
                                         pca.variances[1]));
    }

    PhiBasis out;
    for (std::size_t i = 0; i < 2; ++i) {
        auto axis = pca.axes.row(i);
        // Remove any roundoff component along c and along the earlier axis.
        for (int pass = 0; pass < 2; ++pass) {
            const double along = dot(axis, c);
            for (std::size_t j = 0; j < axis.size(); ++j) {
                axis[j] -= along * c[j];
            }
            if (i == 1) {
                const auto first = pca.axes.row(0);
                const double p = dot(axis, first);
                for (std::size_t j = 0; j < axis.size(); ++j) {
                    axis[j] -= p * first[j];
                }
            }
        }
        const double nrm = norm(axis);
        for (auto& v : axis) {
            v /= nrm;
        }
        fix_sign(axis, pca.mean);
    }
    out.v1.assign(pca.axes.row(0).begin(), pca.axes.row(0).end());
    out.v2.assign(pca.axes.row(1).begin(), pca.axes.row(1).end());
    return out;
}

double phi(std::span<const double> f, const ReferenceBasis& basis, const PhiBasis& phi_basis) {
    if (!(norm(f) > 0.0)) {
        throw DataError("phi undefined for a zero-norm activation");
    }
    const auto perp = perpendicular(f, basis.direction(1));
    if (norm(perp) < kDegeneratePerp) {
        return 0.0;
    }
    return std::atan2(dot(perp, phi_basis.v2), dot(perp, phi_basis.v1));
}

AngularCoordinates angular_coordinates(std::span<const double> f, const ReferenceBasis& basis,
                                       const PhiBasis& phi_basis) {
    return {theta(f, basis, 1), phi(f, basis, phi_basis), norm(f)};
}

PolarPoint project_theta_phi(const AngularCoordinates& coords) {
    return {coords.theta * std::cos(coords.phi), coords.theta * std::sin(coords.phi)};
}

void save_reference(const ReferenceBasis& basis, const std::filesystem::path& json_path) {
    auto sidecar = json_path;
    sidecar.replace_extension(".bin");

    nlohmann::json j;
    j["format"] = "thetaguard-reference";
    j["version"] = 1;
    j["dim"] = basis.dim();
    j["k"] = basis.k();
    j["centered"] = basis.centered;
    j["sign_anchor"] = basis.sign_anchor;
    j["variances"] = basis.variances;
    j["sidecar"] = sidecar.filename().string();
    j["sidecar_layout"] = "float64 little-endian: k*dim directions (row-major), then dim fit_mean";

    std::vector<double> payload(basis.directions.data().begin(), basis.directions.data().end());
    payload.insert(payload.end(), basis.fit_mean.begin(), basis.fit_mean.end());
    detail::write_f64_file(sidecar, payload);

    std::ofstream out(json_path, std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) {
        throw DataError(fmt::format("cannot write {}", json_path.string()));
    }
}

ReferenceBasis load_reference(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) {
        throw DataError(fmt::format("cannot open {}", json_path.string()));
    }
    try {
        const auto j = nlohmann::json::parse(in);
        if (j.at("format") != "thetaguard-reference" || j.at("version") != 1) {
            throw DataError(fmt::format("{}: not a version-1 reference file", json_path.string()));
        }
        const auto dim = j.at("dim").get<std::size_t>();
        const auto k = j.at("k").get<std::size_t>();
        const auto values =
            detail::read_f64_file(json_path.parent_path() / j.at("sidecar").get<std::string>(), k * dim + dim);
        ReferenceBasis basis;
        basis.directions = Matrix(k, dim);
        std::copy(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k * dim),
                  basis.directions.data().begin());
        basis.fit_mean.assign(values.begin() + static_cast<std::ptrdiff_t>(k * dim), values.end());
        basis.centered = j.at("centered").get<bool>();
        basis.sign_anchor = j.at("sign_anchor").get<std::string>();
        basis.variances = j.at("variances").get<std::vector<double>>();
        return basis;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("{}: {}", json_path.string(), e.what()));
    }
}

} // namespace thetaguard
