#pragma once

#include "thetaguard/activation_store.hpp"
#include "thetaguard/geometry.hpp"
#include "thetaguard/linalg.hpp"

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace thetaguard {

enum class VarianceEstimator { ml, unbiased };

std::string_view to_string(VarianceEstimator e);
VarianceEstimator estimator_from_string(std::string_view name);

// Normal distribution over theta fitted on the normative fit set.
struct ThetaGaussian {
    double mu0 = 0.0;
    double sigma0 = 1.0;
    std::size_t n_fit = 0;
    VarianceEstimator estimator = VarianceEstimator::ml;
};

inline constexpr double kMinSigma = 1e-9;
inline constexpr double kCovarianceRidge = 1e-9;

ThetaGaussian fit_theta_gaussian(std::span<const double> thetas,
                                 VarianceEstimator estimator = VarianceEstimator::ml);

// Gaussian negative log-likelihood of theta, even in (theta - mu0).
double score_k1(double theta, const ThetaGaussian& g);
double score_abs_dev(double theta, const ThetaGaussian& g);
double score_cosine_centroid(std::span<const double> f, std::span<const double> centroid);
double score_euclidean(std::span<const double> f, std::span<const double> centroid);

// Full-covariance Gaussian over a small vector of angles. The covariance gets
// a 1e-9 ridge only if it is not positive definite as estimated.
class GaussianModel {
public:
    static GaussianModel fit(const Matrix& samples, VarianceEstimator estimator = VarianceEstimator::ml);
    static GaussianModel from_moments(std::vector<double> mean, const Matrix& covariance);

    double nll(std::span<const double> x) const;

    std::size_t dim() const noexcept { return mean_.size(); }
    const std::vector<double>& mean() const noexcept { return mean_; }
    const Matrix& covariance() const noexcept { return covariance_; }
    bool regularised() const noexcept { return regularised_; }

private:
    std::vector<double> mean_;
    Matrix covariance_;
    Matrix cholesky_;
    double log_det_ = 0.0;
    bool regularised_ = false;
};

GaussianModel fit_bivariate(std::span<const AngularCoordinates> fit_coords,
                            VarianceEstimator estimator = VarianceEstimator::ml);
double score_bivariate(const AngularCoordinates& coords, std::span<const AngularCoordinates> fit_coords);

// fit_thetas is N x K: angles of each fit row to c_1..c_K.
GaussianModel fit_multi_k(const Matrix& fit_thetas, VarianceEstimator estimator = VarianceEstimator::ml);
double score_multi_k(std::span<const double> thetas, const Matrix& fit_thetas);

enum class Scorer { k1, abs_dev, bivariate, cosine, euclidean, multi_k2, multi_k3, multi_k4 };

inline constexpr std::array<Scorer, 8> kAllScorers = {Scorer::k1,        Scorer::abs_dev,  Scorer::bivariate,
                                                      Scorer::cosine,    Scorer::euclidean, Scorer::multi_k2,
                                                      Scorer::multi_k3,  Scorer::multi_k4};

// Column name used in score tables and reports (k1_nll, cosine_centroid, ...).
std::string_view to_string(Scorer s);
// Accepts column names and the short CLI names (k1, cosine, multi_k2, ...).
Scorer scorer_from_string(std::string_view name);
// Number of angles used by a multi-K scorer, 1 for k1/abs_dev, 0 otherwise.
std::size_t angle_count(Scorer s);
Scorer multi_k_scorer(std::size_t k);

struct DetectorOptions {
    std::vector<Scorer> scorers = {Scorer::k1, Scorer::abs_dev, Scorer::bivariate, Scorer::cosine,
                                   Scorer::euclidean};
    bool centered = true;
    VarianceEstimator estimator = VarianceEstimator::ml;
    bool fit_phi = true;
    EigenMethod eigen_method = EigenMethod::automatic;
};

// Everything fitted on the normative fit set: reference basis, theta
// Gaussian, phi basis and every baseline's parameters.
struct NormativeDetector {
    std::vector<Scorer> scorers;
    ReferenceBasis basis;
    std::optional<PhiBasis> phi_basis;
    ThetaGaussian gaussian;
    std::optional<GaussianModel> bivariate;
    std::map<std::size_t, GaussianModel> multi_k;
    std::vector<double> centroid;
    VarianceEstimator estimator = VarianceEstimator::ml;

    // Scores aligned with `scorers`.
    std::vector<double> score(std::span<const double> f) const;
    AngularCoordinates coordinates(std::span<const double> f) const;
};

NormativeDetector fit_detector(const Matrix& fit_rows, const DetectorOptions& options);

void save_detector(const NormativeDetector& detector, const std::filesystem::path& dir);
NormativeDetector load_detector(const std::filesystem::path& dir);

struct Orientation {
    int sign = 1;
    bool auto_oriented = false;
    double median_harmful = 0.0;
    double median_normative = 0.0;
};

// Variant that fits the reference on harmful rows and calibrates the score
// sign on held-out harmful and normative rows.
struct HarmfulReference {
    ReferenceBasis basis;
    ThetaGaussian gaussian;
    Orientation orientation;

    double raw_score(std::span<const double> f) const;
    double score(std::span<const double> f) const { return orientation.sign * raw_score(f); }
};

HarmfulReference fit_harmful_reference(const Matrix& harmful_rows, const Matrix& heldout_harmful,
                                       const Matrix& heldout_normative, bool centered = true,
                                       VarianceEstimator estimator = VarianceEstimator::ml);

double median(std::vector<double> values);

struct ScoreRow {
    std::string prompt_id;
    Role role = Role::normative_eval;
    std::vector<double> scores;
};

struct ScoreTable {
    std::vector<Scorer> scorers;
    std::vector<ScoreRow> rows;

    std::vector<double> column(Scorer scorer, Role role) const;
    std::size_t index_of(Scorer scorer) const;
};

ScoreTable score_rows(const NormativeDetector& detector, const Matrix& rows,
                      std::span<const std::string> prompt_ids, std::span<const Role> roles);

// CSV with header prompt_id,role,<scorer columns>.
void write_score_csv(const ScoreTable& table, std::ostream& out);
ScoreTable read_score_csv(std::istream& in);

} // namespace thetaguard
