#pragma once

#include "thetaguard/activation_store.hpp"
#include "thetaguard/metrics.hpp"
#include "thetaguard/scoring.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace thetaguard {

struct SweepConfig {
    std::vector<int> layers;  // empty means every layer in the dump
    std::vector<Scorer> scorers = {Scorer::k1,        Scorer::abs_dev,  Scorer::bivariate, Scorer::cosine,
                                   Scorer::euclidean, Scorer::multi_k2, Scorer::multi_k3,  Scorer::multi_k4};
    std::size_t n_fit = 200;
    bool centered = true;
    std::uint64_t seed = 0;
    Ordering direction = Ordering::forward;
    std::size_t holdout = 0;
    VarianceEstimator estimator = VarianceEstimator::ml;
    double target_recall = kDefaultTargetRecall;
    unsigned threads = 1;
    EigenMethod eigen_method = EigenMethod::automatic;

    void validate() const;
};

// Fit rows and labelled eval rows of one layer, in split order.
struct EvalSet {
    int layer = 0;
    Matrix fit;
    Matrix eval;
    std::vector<std::string> fit_ids;
    std::vector<std::string> eval_ids;
    std::vector<Role> eval_roles;
};

EvalSet assemble(const Dump& dump, int layer, const SplitPlan& plan);

struct ThetaPhiPoint {
    std::string prompt_id;
    Role role = Role::normative_eval;
    AngularCoordinates coords;
    PolarPoint xy;
};

// Raw theta statistics of one layer. mu0 is the held-out normative mean.
struct ThetaStats {
    int layer = 0;
    double mu0 = 0.0;
    double sigma_norm = 0.0;
    double harm_mean = 0.0;
    double delta_theta = 0.0;
    double benign_mean = 0.0;
    double sigma_harm = 0.0;
    double fit_mean = 0.0;
    double sigma_benign = 0.0;
};

struct LayerEvaluation {
    int layer = 0;
    NormativeDetector detector;
    ScoreTable scores;
    EvalReport report;
    std::vector<ThetaPhiPoint> points;  // fit rows first, then eval rows
    ThetaStats stats;
};

struct EvalOptions {
    DetectorOptions detector;
    double target_recall = kDefaultTargetRecall;
    bool collect_points = true;
};

LayerEvaluation evaluate_set(const EvalSet& set, const EvalOptions& options);

struct LayerSelection {
    int best_layer = 0;
    std::string criterion = "argmax K=1 AUROC h/n";
    double best_auroc = 0.0;
    double plateau_width = 0.0;
};

// Argmax of the k1 h/n AUROC over layers; ties go to the lowest layer.
LayerSelection select_layer(const EvalReport& report);

struct SweepResult {
    SplitPlan plan;
    std::vector<LayerEvaluation> layers;  // ascending layer index
    EvalReport report;
    LayerSelection selection;

    const LayerEvaluation& layer(int index) const;
};

// k1 is scored even when absent from config.scorers, since selection needs it.
SweepResult run_layer_sweep(const Dump& dump, const SweepConfig& config);

struct AblationPoint {
    double x = 0.0;  // K, retained dims or n_fit
    int layer = 0;
    Ordering direction = Ordering::forward;
    EvalReport report;
    std::vector<std::string> eval_ids;  // sorted, for constancy checks

    double auroc(Scorer scorer, TaskKind task) const;
};

struct AblationResult {
    std::string axis;  // "K", "retained_dims" or "n_fit"
    Scorer scorer = Scorer::k1;
    std::vector<AblationPoint> points;
    std::optional<double> delta_k;    // best K>1 AUROC h/n minus K=1
    std::optional<double> delta_cos;  // cosine AUROC h/n minus K=1

    // The scorer whose AUROC this point reports (multi-K varies with x).
    Scorer point_scorer(const AblationPoint& p) const;
    bool eval_sets_constant() const;
};

AblationResult run_k_ablation(const Dump& dump, int layer, std::vector<std::size_t> k_grid,
                              const SweepConfig& config);

enum class DimMode { subspace, reconstruct };

std::string_view to_string(DimMode mode);
DimMode dim_mode_from_string(std::string_view name);

inline constexpr std::size_t kDefaultDimGrid[] = {5, 10, 20, 50, 100, 200, 500};

// Default grid filtered to m <= min(N_fit - 1, D), with D appended when feasible.
std::vector<std::size_t> default_dim_grid(std::size_t dim, std::size_t n_fit);

AblationResult run_dim_ablation(const Dump& dump, int layer, std::vector<std::size_t> m_grid, std::size_t k,
                                const SweepConfig& config, DimMode mode = DimMode::subspace);

inline constexpr std::size_t kDefaultStabilityGrid[] = {10, 20, 30, 50, 75, 100, 150, 200};

AblationResult run_stability(const Dump& dump, const std::vector<int>& layers, std::vector<std::size_t> n_grid,
                             const std::vector<Ordering>& directions, const SweepConfig& config);

struct FigureInputs {
    const SweepResult* sweep = nullptr;
    const AblationResult* k_ablation = nullptr;
    const AblationResult* dim_ablation = nullptr;
    const AblationResult* stability = nullptr;
    // Layer for the point clouds, score distributions and PR curves; defaults
    // to the selected layer.
    std::optional<int> layer;
};

// Writes every CSV the inputs allow and returns the file names, sorted.
std::vector<std::string> emit_figure_data(const FigureInputs& inputs, const std::filesystem::path& out_dir);

struct BenchResult {
    std::size_t dim = 0;
    std::size_t trials = 0;
    std::size_t repetitions = 0;  // activations scored per trial
    double mean_ms = 0.0;
    double std_ms = 0.0;
};

// Wall clock of theta + NLL for a single activation: a dot product, a norm,
// an arccos and a scalar NLL. Each trial times `repetitions` back-to-back
// single-activation calls and reports the per-activation average.
BenchResult scoring_latency_bench(std::size_t dim, std::size_t trials = 100, std::uint64_t seed = 1);

} // namespace thetaguard
