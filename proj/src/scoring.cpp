#include "thetaguard/scoring.hpp"

#include "binary_io.hpp"
#include "thetaguard/csv.hpp"
#include "thetaguard/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace thetaguard {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

double checked_norm(std::span<const double> v, const char* what) {
    const double n = norm(v);
    if (!(n > 0.0)) {
        throw DataError(fmt::format("{}: zero-norm vector", what));
    }
    return n;
}

// Lower Cholesky factor; returns false when a pivot is not positive relative
// to its diagonal entry, so numerically singular matrices are caught too.
bool cholesky(const Matrix& a, Matrix& l) {
    const std::size_t n = a.rows();
    l = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) {
            d -= l(j, k) * l(j, k);
        }
        if (!(d > 1e-13 * a(j, j))) {
            return false;
        }
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) {
                s -= l(i, k) * l(j, k);
            }
            l(i, j) = s / l(j, j);
        }
    }
    return true;
}

nlohmann::json gaussian_to_json(const GaussianModel& g) {
    nlohmann::json cov = nlohmann::json::array();
    for (std::size_t r = 0; r < g.dim(); ++r) {
        cov.push_back(std::vector<double>(g.covariance().row(r).begin(), g.covariance().row(r).end()));
    }
    return {{"mean", g.mean()}, {"covariance", cov}};
}

GaussianModel gaussian_from_json(const nlohmann::json& j) {
    auto mean = j.at("mean").get<std::vector<double>>();
    const auto rows = j.at("covariance").get<std::vector<std::vector<double>>>();
    Matrix cov(mean.size(), mean.size());
    if (rows.size() != mean.size()) {
        throw DataError("detector: covariance shape does not match mean");
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != mean.size()) {
            throw DataError("detector: covariance shape does not match mean");
        }
        std::copy(rows[r].begin(), rows[r].end(), cov.row(r).begin());
    }
    return GaussianModel::from_moments(std::move(mean), cov);
}

} // namespace

std::string_view to_string(VarianceEstimator e) {
    return e == VarianceEstimator::ml ? "ml" : "unbiased";
}

VarianceEstimator estimator_from_string(std::string_view name) {
    if (name == "ml") {
        return VarianceEstimator::ml;
    }
    if (name == "unbiased") {
        return VarianceEstimator::unbiased;
    }
    throw UsageError(fmt::format("estimator must be ml or unbiased, got '{}'", name));
}

ThetaGaussian fit_theta_gaussian(std::span<const double> thetas, VarianceEstimator estimator) {
    const std::size_t n = thetas.size();
    if (n < 2) {
        throw UsageError(fmt::format("theta Gaussian needs at least 2 samples, got {}", n));
    }
    double mean = 0.0;
    for (double t : thetas) {
        mean += t;
    }
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double t : thetas) {
        ss += (t - mean) * (t - mean);
    }
    const double denom = estimator == VarianceEstimator::ml ? static_cast<double>(n) : static_cast<double>(n - 1);
    const double sigma = std::sqrt(ss / denom);
    if (!(sigma > kMinSigma)) {
        throw NumericalError(fmt::format("degenerate theta distribution: sigma {:.3g} <= {:.0e}", sigma, kMinSigma));
    }
    return {mean, sigma, n, estimator};
}

double score_k1(double theta, const ThetaGaussian& g) {
    const double z = (theta - g.mu0) / g.sigma0;
    return 0.5 * kLog2Pi + std::log(g.sigma0) + 0.5 * z * z;
}

double score_abs_dev(double theta, const ThetaGaussian& g) {
    return std::abs(theta - g.mu0);
}

double score_cosine_centroid(std::span<const double> f, std::span<const double> centroid) {
    const double nf = checked_norm(f, "cosine score activation");
    const double nc = checked_norm(centroid, "cosine score centroid");
    return 1.0 - dot(f, centroid) / (nf * nc);
}

double score_euclidean(std::span<const double> f, std::span<const double> centroid) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double d = f[i] - centroid[i];
        s += d * d;
    }
    return std::sqrt(s);
}

GaussianModel GaussianModel::from_moments(std::vector<double> mean, const Matrix& covariance) {
    GaussianModel g;
    g.mean_ = std::move(mean);
    g.covariance_ = covariance;
    if (!cholesky(g.covariance_, g.cholesky_)) {
        for (std::size_t i = 0; i < g.dim(); ++i) {
            g.covariance_(i, i) += kCovarianceRidge;
        }
        g.regularised_ = true;
        if (!cholesky(g.covariance_, g.cholesky_)) {
            throw NumericalError(fmt::format("{}-dimensional covariance is singular after +{:.0e} ridge", g.dim(),
                                             kCovarianceRidge));
        }
    }
    g.log_det_ = 0.0;
    for (std::size_t i = 0; i < g.dim(); ++i) {
        g.log_det_ += 2.0 * std::log(g.cholesky_(i, i));
    }
    return g;
}

GaussianModel GaussianModel::fit(const Matrix& samples, VarianceEstimator estimator) {
    const std::size_t n = samples.rows();
    const std::size_t d = samples.cols();
    if (n < 2 || d == 0) {
        throw UsageError(fmt::format("Gaussian fit needs at least 2 samples of positive dimension, got {}x{}", n, d));
    }
    std::vector<double> mean = column_mean(samples);
    Matrix cov(d, d);
    for (std::size_t r = 0; r < n; ++r) {
        const auto x = samples.row(r);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = i; j < d; ++j) {
                cov(i, j) += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    const double denom = estimator == VarianceEstimator::ml ? static_cast<double>(n) : static_cast<double>(n - 1);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            cov(i, j) /= denom;
            cov(j, i) = cov(i, j);
        }
    }
    return from_moments(std::move(mean), cov);
}

double GaussianModel::nll(std::span<const double> x) const {
    const std::size_t d = dim();
    if (x.size() != d) {
        throw UsageError(fmt::format("Gaussian of dimension {} evaluated at a {}-vector", d, x.size()));
    }
    // Solve L y = (x - mean); Mahalanobis distance is |y|^2.
    std::vector<double> y(d);
    double maha = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double s = x[i] - mean_[i];
        for (std::size_t k = 0; k < i; ++k) {
            s -= cholesky_(i, k) * y[k];
        }
        y[i] = s / cholesky_(i, i);
        maha += y[i] * y[i];
    }
    return 0.5 * (static_cast<double>(d) * kLog2Pi + log_det_ + maha);
}

GaussianModel fit_bivariate(std::span<const AngularCoordinates> fit_coords, VarianceEstimator estimator) {
    if (fit_coords.size() < 3) {
        throw UsageError(fmt::format("bivariate baseline needs at least 3 fit points, got {}", fit_coords.size()));
    }
    Matrix samples(fit_coords.size(), 2);
    for (std::size_t i = 0; i < fit_coords.size(); ++i) {
        samples(i, 0) = fit_coords[i].theta;
        samples(i, 1) = fit_coords[i].phi;
    }
    return GaussianModel::fit(samples, estimator);
}

double score_bivariate(const AngularCoordinates& coords, std::span<const AngularCoordinates> fit_coords) {
    const double x[2] = {coords.theta, coords.phi};
    return fit_bivariate(fit_coords).nll(x);
}

GaussianModel fit_multi_k(const Matrix& fit_thetas, VarianceEstimator estimator) {
    return GaussianModel::fit(fit_thetas, estimator);
}

double score_multi_k(std::span<const double> thetas, const Matrix& fit_thetas) {
    return fit_multi_k(fit_thetas).nll(thetas);
}

std::string_view to_string(Scorer s) {
    switch (s) {
    case Scorer::k1:
        return "k1_nll";
    case Scorer::abs_dev:
        return "abs_dev";
    case Scorer::bivariate:
        return "bivariate_nll";
    case Scorer::cosine:
        return "cosine_centroid";
    case Scorer::euclidean:
        return "euclidean";
    case Scorer::multi_k2:
        return "multi_k2_nll";
    case Scorer::multi_k3:
        return "multi_k3_nll";
    case Scorer::multi_k4:
        return "multi_k4_nll";
    }
    return "unknown";
}

Scorer scorer_from_string(std::string_view name) {
    for (Scorer s : kAllScorers) {
        if (to_string(s) == name) {
            return s;
        }
    }
    if (name == "k1") {
        return Scorer::k1;
    }
    if (name == "bivariate") {
        return Scorer::bivariate;
    }
    if (name == "cosine") {
        return Scorer::cosine;
    }
    if (name == "multi_k2" || name == "k2") {
        return Scorer::multi_k2;
    }
    if (name == "multi_k3" || name == "k3") {
        return Scorer::multi_k3;
    }
    if (name == "multi_k4" || name == "k4") {
        return Scorer::multi_k4;
    }
    throw UsageError(fmt::format("unknown scorer '{}'", name));
}

std::size_t angle_count(Scorer s) {
    switch (s) {
    case Scorer::k1:
    case Scorer::abs_dev:
        return 1;
    case Scorer::multi_k2:
        return 2;
    case Scorer::multi_k3:
        return 3;
    case Scorer::multi_k4:
        return 4;
    default:
        return 0;
    }
}

Scorer multi_k_scorer(std::size_t k) {
    switch (k) {
    case 1:
        return Scorer::k1;
    case 2:
        return Scorer::multi_k2;
    case 3:
        return Scorer::multi_k3;
    case 4:
        return Scorer::multi_k4;
    default:
        throw UsageError(fmt::format("multi-K scorer supports K in 1..4, got {}", k));
    }
}

NormativeDetector fit_detector(const Matrix& fit_rows, const DetectorOptions& options) {
    if (options.scorers.empty()) {
        throw UsageError("detector needs at least one scorer");
    }
    NormativeDetector det;
    det.scorers = options.scorers;
    det.estimator = options.estimator;

    std::size_t k_max = 1;
    bool need_phi = options.fit_phi;
    for (Scorer s : options.scorers) {
        k_max = std::max(k_max, angle_count(s));
        need_phi = need_phi || s == Scorer::bivariate;
    }

    det.basis = fit_reference(fit_rows, k_max, options.centered, options.eigen_method);

    std::vector<double> fit_theta1(fit_rows.rows());
    Matrix fit_angles(fit_rows.rows(), k_max);
    for (std::size_t r = 0; r < fit_rows.rows(); ++r) {
        const auto t = thetas(fit_rows.row(r), det.basis);
        std::copy(t.begin(), t.end(), fit_angles.row(r).begin());
        fit_theta1[r] = t[0];
    }
    det.gaussian = fit_theta_gaussian(fit_theta1, options.estimator);

    if (need_phi) {
        det.phi_basis = fit_phi_basis(fit_rows, det.basis);
    }
    for (Scorer s : options.scorers) {
        if (s == Scorer::bivariate && !det.bivariate) {
            std::vector<AngularCoordinates> coords(fit_rows.rows());
            for (std::size_t r = 0; r < fit_rows.rows(); ++r) {
                coords[r] = angular_coordinates(fit_rows.row(r), det.basis, *det.phi_basis);
            }
            det.bivariate = fit_bivariate(coords, options.estimator);
        }
        const std::size_t k = angle_count(s);
        if (k >= 2 && !det.multi_k.contains(k)) {
            Matrix sub(fit_rows.rows(), k);
            for (std::size_t r = 0; r < fit_rows.rows(); ++r) {
                std::copy_n(fit_angles.row(r).begin(), k, sub.row(r).begin());
            }
            det.multi_k.emplace(k, fit_multi_k(sub, options.estimator));
        }
    }
    det.centroid = column_mean(fit_rows);
    return det;
}

AngularCoordinates NormativeDetector::coordinates(std::span<const double> f) const {
    if (phi_basis) {
        return angular_coordinates(f, basis, *phi_basis);
    }
    return {theta(f, basis, 1), 0.0, norm(f)};
}

std::vector<double> NormativeDetector::score(std::span<const double> f) const {
    const auto angles = thetas(f, basis);
    std::vector<double> out;
    out.reserve(scorers.size());
    for (Scorer s : scorers) {
        switch (s) {
        case Scorer::k1:
            out.push_back(score_k1(angles[0], gaussian));
            break;
        case Scorer::abs_dev:
            out.push_back(score_abs_dev(angles[0], gaussian));
            break;
        case Scorer::bivariate: {
            const double x[2] = {angles[0], phi(f, basis, *phi_basis)};
            out.push_back(bivariate->nll(x));
            break;
        }
        case Scorer::cosine:
            out.push_back(score_cosine_centroid(f, centroid));
            break;
        case Scorer::euclidean:
            out.push_back(score_euclidean(f, centroid));
            break;
        case Scorer::multi_k2:
        case Scorer::multi_k3:
        case Scorer::multi_k4: {
            const std::size_t k = angle_count(s);
            out.push_back(multi_k.at(k).nll(std::span<const double>(angles).first(k)));
            break;
        }
        }
    }
    return out;
}

void save_detector(const NormativeDetector& det, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_reference(det.basis, dir / "reference.json");

    nlohmann::json j;
    j["format"] = "thetaguard-detector";
    j["version"] = 1;
    j["reference"] = "reference.json";
    std::vector<std::string> names;
    for (Scorer s : det.scorers) {
        names.emplace_back(to_string(s));
    }
    j["scorers"] = names;
    j["estimator"] = to_string(det.estimator);
    j["theta_gaussian"] = {{"mu0", det.gaussian.mu0},
                           {"sigma0", det.gaussian.sigma0},
                           {"n_fit", det.gaussian.n_fit},
                           {"estimator", to_string(det.gaussian.estimator)}};
    if (det.bivariate) {
        j["bivariate"] = gaussian_to_json(*det.bivariate);
    }
    nlohmann::json mk = nlohmann::json::object();
    for (const auto& [k, g] : det.multi_k) {
        mk[std::to_string(k)] = gaussian_to_json(g);
    }
    j["multi_k"] = mk;
    j["has_phi_basis"] = det.phi_basis.has_value();
    j["sidecar"] = "detector.bin";
    j["sidecar_layout"] = "float64 little-endian: [v1 (dim), v2 (dim) if has_phi_basis], centroid (dim)";

    std::vector<double> payload;
    if (det.phi_basis) {
        payload.insert(payload.end(), det.phi_basis->v1.begin(), det.phi_basis->v1.end());
        payload.insert(payload.end(), det.phi_basis->v2.begin(), det.phi_basis->v2.end());
    }
    payload.insert(payload.end(), det.centroid.begin(), det.centroid.end());
    detail::write_f64_file(dir / "detector.bin", payload);

    std::ofstream out(dir / "detector.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) {
        throw DataError(fmt::format("cannot write {}", (dir / "detector.json").string()));
    }
}

NormativeDetector load_detector(const std::filesystem::path& dir) {
    std::ifstream in(dir / "detector.json");
    if (!in) {
        throw DataError(fmt::format("cannot open {}", (dir / "detector.json").string()));
    }
    NormativeDetector det;
    try {
        const auto j = nlohmann::json::parse(in);
        if (j.at("format") != "thetaguard-detector" || j.at("version") != 1) {
            throw DataError("detector.json: not a version-1 detector");
        }
        det.basis = load_reference(dir / j.at("reference").get<std::string>());
        for (const auto& name : j.at("scorers")) {
            det.scorers.push_back(scorer_from_string(name.get<std::string>()));
        }
        det.estimator = estimator_from_string(j.at("estimator").get<std::string>());
        const auto& g = j.at("theta_gaussian");
        det.gaussian = {g.at("mu0").get<double>(), g.at("sigma0").get<double>(), g.at("n_fit").get<std::size_t>(),
                        estimator_from_string(g.at("estimator").get<std::string>())};
        if (j.contains("bivariate")) {
            det.bivariate = gaussian_from_json(j.at("bivariate"));
        }
        for (const auto& [k, gj] : j.at("multi_k").items()) {
            det.multi_k.emplace(std::stoul(k), gaussian_from_json(gj));
        }
        const bool has_phi = j.at("has_phi_basis").get<bool>();
        const std::size_t dim = det.basis.dim();
        const auto payload = detail::read_f64_file(dir / j.at("sidecar").get<std::string>(), (has_phi ? 3 : 1) * dim);
        auto it = payload.begin();
        const auto d = static_cast<std::ptrdiff_t>(dim);
        if (has_phi) {
            det.phi_basis = PhiBasis{{it, it + d}, {it + d, it + 2 * d}};
            it += 2 * d;
        }
        det.centroid.assign(it, payload.end());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("detector.json: {}", e.what()));
    }
    for (Scorer s : det.scorers) {
        const std::size_t k = angle_count(s);
        if (k > det.basis.k() || (k >= 2 && !det.multi_k.contains(k)) ||
            (s == Scorer::bivariate && (!det.bivariate || !det.phi_basis))) {
            throw DataError(fmt::format("detector.json: parameters for scorer {} are missing", to_string(s)));
        }
    }
    return det;
}

double median(std::vector<double> values) {
    if (values.empty()) {
        throw UsageError("median of an empty set");
    }
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    const double upper = values[mid];
    if (values.size() % 2 == 1) {
        return upper;
    }
    const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

double HarmfulReference::raw_score(std::span<const double> f) const {
    return score_k1(theta(f, basis, 1), gaussian);
}

HarmfulReference fit_harmful_reference(const Matrix& harmful_rows, const Matrix& heldout_harmful,
                                       const Matrix& heldout_normative, bool centered, VarianceEstimator estimator) {
    if (heldout_harmful.rows() == 0 || heldout_normative.rows() == 0) {
        throw UsageError("harmful-reference calibration needs non-empty held-out harmful and normative sets");
    }
    HarmfulReference ref;
    ref.basis = fit_reference(harmful_rows, 1, centered);
    std::vector<double> fit_thetas(harmful_rows.rows());
    for (std::size_t r = 0; r < harmful_rows.rows(); ++r) {
        fit_thetas[r] = theta(harmful_rows.row(r), ref.basis, 1);
    }
    ref.gaussian = fit_theta_gaussian(fit_thetas, estimator);

    auto raw_scores = [&](const Matrix& rows) {
        std::vector<double> out(rows.rows());
        for (std::size_t r = 0; r < rows.rows(); ++r) {
            out[r] = ref.raw_score(rows.row(r));
        }
        return out;
    };
    ref.orientation.median_harmful = median(raw_scores(heldout_harmful));
    ref.orientation.median_normative = median(raw_scores(heldout_normative));
    if (ref.orientation.median_harmful > ref.orientation.median_normative) {
        ref.orientation.sign = -1;
        ref.orientation.auto_oriented = true;
    }
    return ref;
}

std::size_t ScoreTable::index_of(Scorer scorer) const {
    const auto it = std::find(scorers.begin(), scorers.end(), scorer);
    if (it == scorers.end()) {
        throw UsageError(fmt::format("score table has no {} column", to_string(scorer)));
    }
    return static_cast<std::size_t>(it - scorers.begin());
}

std::vector<double> ScoreTable::column(Scorer scorer, Role role) const {
    const std::size_t idx = index_of(scorer);
    std::vector<double> out;
    for (const auto& row : rows) {
        if (row.role == role) {
            out.push_back(row.scores[idx]);
        }
    }
    return out;
}

ScoreTable score_rows(const NormativeDetector& detector, const Matrix& rows, std::span<const std::string> prompt_ids,
                      std::span<const Role> roles) {
    if (prompt_ids.size() != rows.rows() || roles.size() != rows.rows()) {
        throw UsageError("score_rows: ids, roles and rows differ in length");
    }
    ScoreTable table;
    table.scorers = detector.scorers;
    table.rows.reserve(rows.rows());
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        auto scores = detector.score(rows.row(r));
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (!std::isfinite(scores[i])) {
                throw NumericalError(fmt::format("prompt '{}': non-finite {} score", prompt_ids[r],
                                                 to_string(table.scorers[i])));
            }
        }
        table.rows.push_back({prompt_ids[r], roles[r], std::move(scores)});
    }
    return table;
}

void write_score_csv(const ScoreTable& table, std::ostream& out) {
    out << "prompt_id,role";
    for (Scorer s : table.scorers) {
        out << ',' << to_string(s);
    }
    out << '\n';
    for (const auto& row : table.rows) {
        out << csv::field(row.prompt_id) << ',' << to_string(row.role);
        for (double v : row.scores) {
            out << ',' << csv::number(v);
        }
        out << '\n';
    }
}

ScoreTable read_score_csv(std::istream& in) {
    ScoreTable table;
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError("score CSV is empty");
    }
    const auto header = csv::split_line(line);
    if (header.size() < 3 || header[0] != "prompt_id" || header[1] != "role") {
        throw DataError("score CSV header must start with prompt_id,role and name at least one scorer");
    }
    for (std::size_t i = 2; i < header.size(); ++i) {
        table.scorers.push_back(scorer_from_string(header[i]));
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto cells = csv::split_line(line);
        if (cells.size() != header.size()) {
            throw DataError(fmt::format("score CSV line {}: expected {} fields, got {}", line_no, header.size(),
                                        cells.size()));
        }
        ScoreRow row;
        row.prompt_id = cells[0];
        row.role = role_from_string(cells[1]);
        for (std::size_t i = 2; i < cells.size(); ++i) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cells[i], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cells[i].size() || !std::isfinite(v)) {
                throw DataError(fmt::format("score CSV line {}: bad value '{}'", line_no, cells[i]));
            }
            row.scores.push_back(v);
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

} // namespace thetaguard
