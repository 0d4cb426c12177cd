#pragma once

#include "thetaguard/linalg.hpp"

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace thetaguard {

// Top-K principal axes of a normative fit set, the reference for all angles.
struct ReferenceBasis {
    Matrix directions;  // K x D, unit rows, descending variance
    std::vector<double> variances;
    std::vector<double> fit_mean;
    bool centered = true;
    std::string sign_anchor;

    std::size_t k() const noexcept { return directions.rows(); }
    std::size_t dim() const noexcept { return directions.cols(); }
    // 1-based, c_1 is the primary reference direction.
    std::span<const double> direction(std::size_t component = 1) const { return directions.row(component - 1); }

    bool operator==(const ReferenceBasis&) const = default;
};

// Principal axes of the orthogonal complement of c_1, used only for the
// azimuth coordinate.
struct PhiBasis {
    std::vector<double> v1;
    std::vector<double> v2;

    bool operator==(const PhiBasis&) const = default;
};

struct AngularCoordinates {
    double theta = 0.0;  // [0, pi]
    double phi = 0.0;    // [-pi, pi]
    double norm = 0.0;
};

struct PolarPoint {
    double x = 0.0;
    double y = 0.0;
};

inline constexpr double kMinAxisVariance = 1e-12;
inline constexpr double kSignTieTolerance = 1e-12;
inline constexpr double kDegeneratePerp = 1e-10;

// Top-K principal axes of the fit rows (mean-centred when `centered`), each
// flipped so that c_k . mean(fit rows) >= 0. When that product is within
// 1e-12 of zero the largest-magnitude coordinate of c_k is made positive.
ReferenceBasis fit_reference(const Matrix& fit_rows, std::size_t k, bool centered = true,
                             EigenMethod method = EigenMethod::automatic);

// Angle between f and c_component, computed on the raw (uncentred) activation.
double theta(std::span<const double> f, const ReferenceBasis& basis, std::size_t component = 1);

// Angles to c_1..c_K.
std::vector<double> thetas(std::span<const double> f, const ReferenceBasis& basis);

PhiBasis fit_phi_basis(const Matrix& fit_rows, const ReferenceBasis& basis);

// atan2(f_perp . v2, f_perp . v1); 0 when |f_perp| < 1e-10.
double phi(std::span<const double> f, const ReferenceBasis& basis, const PhiBasis& phi_basis);

AngularCoordinates angular_coordinates(std::span<const double> f, const ReferenceBasis& basis,
                                       const PhiBasis& phi_basis);

PolarPoint project_theta_phi(const AngularCoordinates& coords);

// JSON descriptor plus a little-endian float64 sidecar (<stem>.bin) holding
// the directions followed by the fit mean.
void save_reference(const ReferenceBasis& basis, const std::filesystem::path& json_path);
ReferenceBasis load_reference(const std::filesystem::path& json_path);

} // namespace thetaguard
