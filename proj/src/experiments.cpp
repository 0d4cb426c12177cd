#include "thetaguard/experiments.hpp"

#include "thetaguard/csv.hpp"
#include "thetaguard/errors.hpp"
#include "thetaguard/parallel.hpp"
#include "thetaguard/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <fmt/format.h>

namespace thetaguard {

namespace fs = std::filesystem;

namespace {

constexpr Role kEvalRoles[] = {Role::normative_eval, Role::harmful, Role::benign_aggressive};

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& v) {
    MeanSd out;
    if (v.empty()) {
        return out;
    }
    out.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) {
            ss += (x - out.mean) * (x - out.mean);
        }
        out.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return out;
}

template <typename Fn>
auto with_context(const std::string& context, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const DataError&) {
        rethrow_with_context(context);
    } catch (const NumericalError&) {
        rethrow_with_context(context);
    } catch (const UsageError&) {
        rethrow_with_context(context);
    }
}

std::vector<std::size_t> sorted_unique(std::vector<std::size_t> grid, const char* what) {
    if (grid.empty()) {
        throw UsageError(fmt::format("{} grid is empty", what));
    }
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

std::vector<std::string> sorted_ids(const EvalSet& set) {
    auto ids = set.eval_ids;
    std::sort(ids.begin(), ids.end());
    return ids;
}

EvalOptions ablation_options(const SweepConfig& config, std::vector<Scorer> scorers) {
    EvalOptions opts;
    opts.detector.scorers = std::move(scorers);
    opts.detector.centered = config.centered;
    opts.detector.estimator = config.estimator;
    opts.detector.fit_phi = false;
    opts.detector.eigen_method = config.eigen_method;
    opts.target_recall = config.target_recall;
    opts.collect_points = false;
    return opts;
}

// Multiplies every row of x by w^T (x: N x D, w: m x D) giving N x m.
Matrix project_rows(const Matrix& x, const Matrix& w) {
    Matrix out(x.rows(), w.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t j = 0; j < w.rows(); ++j) {
            out(r, j) = dot(x.row(r), w.row(j));
        }
    }
    return out;
}

Matrix reconstruct_rows(const Matrix& x, const Matrix& w, const std::vector<double>& mean) {
    Matrix out(x.rows(), x.cols());
    std::vector<double> centred(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t d = 0; d < x.cols(); ++d) {
            centred[d] = x(r, d) - mean[d];
        }
        auto row = out.row(r);
        std::copy(mean.begin(), mean.end(), row.begin());
        for (std::size_t j = 0; j < w.rows(); ++j) {
            const double coef = dot(centred, w.row(j));
            for (std::size_t d = 0; d < x.cols(); ++d) {
                row[d] += coef * w(j, d);
            }
        }
    }
    return out;
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError(fmt::format("cannot write {}", path.string()));
    }
    return out;
}

std::string optional_auroc(const EvalReport& report, int layer, Scorer scorer, TaskKind task) {
    const auto* e = report.find(layer, scorer, task);
    return e ? csv::number(e->metrics.auroc) : std::string();
}

} // namespace

void SweepConfig::validate() const {
    if (scorers.empty()) {
        throw UsageError("sweep needs at least one scorer");
    }
    if (n_fit < 2) {
        throw UsageError(fmt::format("n_fit {} must be at least 2", n_fit));
    }
    if (!(target_recall > 0.0 && target_recall <= 1.0)) {
        throw UsageError(fmt::format("target recall {} outside (0, 1]", target_recall));
    }
}

EvalSet assemble(const Dump& dump, int layer, const SplitPlan& plan) {
    const ActivationMatrix& m = dump.layer(layer);
    EvalSet set;
    set.layer = layer;
    set.fit_ids = plan.fit_ids;
    set.fit = m.to_matrix(dump.rows_of(plan.fit_ids));
    for (Role role : kEvalRoles) {
        const auto it = plan.eval_ids.find(role);
        if (it == plan.eval_ids.end()) {
            continue;
        }
        set.eval_ids.insert(set.eval_ids.end(), it->second.begin(), it->second.end());
        set.eval_roles.insert(set.eval_roles.end(), it->second.size(), role);
    }
    set.eval = m.to_matrix(dump.rows_of(set.eval_ids));
    return set;
}

LayerEvaluation evaluate_set(const EvalSet& set, const EvalOptions& options) {
    return with_context(fmt::format("layer {}", set.layer), [&] {
        LayerEvaluation out;
        out.layer = set.layer;
        out.detector = fit_detector(set.fit, options.detector);
        out.scores = score_rows(out.detector, set.eval, set.eval_ids, set.eval_roles);
        out.report = evaluate_table(out.scores, set.layer, options.target_recall);

        std::map<Role, std::vector<double>> by_role;
        for (std::size_t r = 0; r < set.eval.rows(); ++r) {
            by_role[set.eval_roles[r]].push_back(theta(set.eval.row(r), out.detector.basis));
        }
        const auto norm_stats = mean_sd(by_role[Role::normative_eval]);
        const auto harm_stats = mean_sd(by_role[Role::harmful]);
        const auto benign_stats = mean_sd(by_role[Role::benign_aggressive]);
        out.stats.layer = set.layer;
        out.stats.mu0 = norm_stats.mean;
        out.stats.sigma_norm = norm_stats.sd;
        out.stats.harm_mean = harm_stats.mean;
        out.stats.sigma_harm = harm_stats.sd;
        out.stats.delta_theta = harm_stats.mean - norm_stats.mean;
        out.stats.benign_mean = benign_stats.mean;
        out.stats.sigma_benign = benign_stats.sd;
        out.stats.fit_mean = out.detector.gaussian.mu0;

        if (options.collect_points) {
            auto add = [&](std::span<const double> f, const std::string& id, Role role) {
                ThetaPhiPoint p;
                p.prompt_id = id;
                p.role = role;
                p.coords = out.detector.coordinates(f);
                p.xy = project_theta_phi(p.coords);
                out.points.push_back(std::move(p));
            };
            for (std::size_t r = 0; r < set.fit.rows(); ++r) {
                add(set.fit.row(r), set.fit_ids[r], Role::normative_fit);
            }
            for (std::size_t r = 0; r < set.eval.rows(); ++r) {
                add(set.eval.row(r), set.eval_ids[r], set.eval_roles[r]);
            }
        }
        return out;
    });
}

LayerSelection select_layer(const EvalReport& report) {
    std::vector<std::pair<int, double>> curve;
    for (const auto& e : report.entries) {
        if (e.scorer == Scorer::k1 && e.task == TaskKind::harmful_vs_normative) {
            curve.emplace_back(e.layer, e.metrics.auroc);
        }
    }
    if (curve.empty()) {
        throw UsageError("layer selection needs k1 h/n AUROC for at least one layer");
    }
    std::sort(curve.begin(), curve.end());
    LayerSelection sel;
    sel.best_layer = curve.front().first;
    sel.best_auroc = curve.front().second;
    double lo = curve.front().second;
    for (const auto& [layer, a] : curve) {
        if (a > sel.best_auroc) {
            sel.best_auroc = a;
            sel.best_layer = layer;
        }
        lo = std::min(lo, a);
    }
    sel.plateau_width = sel.best_auroc - lo;
    return sel;
}

const LayerEvaluation& SweepResult::layer(int index) const {
    for (const auto& l : layers) {
        if (l.layer == index) {
            return l;
        }
    }
    throw UsageError(fmt::format("sweep has no layer {}", index));
}

SweepResult run_layer_sweep(const Dump& dump, const SweepConfig& config) {
    config.validate();
    std::vector<int> layers = config.layers.empty() ? dump.layer_indices() : config.layers;
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    for (int l : layers) {
        dump.layer(l);
    }

    SweepResult out;
    out.plan = make_split(dump.manifest, config.n_fit, config.seed, config.direction, config.holdout);
    EvalOptions opts;
    opts.detector.scorers = config.scorers;
    // Layer selection always reads the k1 curve.
    if (std::find(config.scorers.begin(), config.scorers.end(), Scorer::k1) == config.scorers.end()) {
        opts.detector.scorers.insert(opts.detector.scorers.begin(), Scorer::k1);
    }
    opts.detector.centered = config.centered;
    opts.detector.estimator = config.estimator;
    opts.detector.eigen_method = config.eigen_method;
    opts.target_recall = config.target_recall;

    out.layers.resize(layers.size());
    parallel_for(layers.size(), config.threads, [&](std::size_t i) {
        out.layers[i] = evaluate_set(assemble(dump, layers[i], out.plan), opts);
    });
    for (const auto& l : out.layers) {
        out.report.entries.insert(out.report.entries.end(), l.report.entries.begin(), l.report.entries.end());
    }
    out.selection = select_layer(out.report);
    return out;
}

double AblationPoint::auroc(Scorer scorer, TaskKind task) const {
    return report.at(layer, scorer, task).metrics.auroc;
}

Scorer AblationResult::point_scorer(const AblationPoint& p) const {
    if (axis == "K") {
        return multi_k_scorer(static_cast<std::size_t>(p.x));
    }
    return scorer;
}

bool AblationResult::eval_sets_constant() const {
    return std::all_of(points.begin(), points.end(),
                       [&](const AblationPoint& p) { return p.eval_ids == points.front().eval_ids; });
}

AblationResult run_k_ablation(const Dump& dump, int layer, std::vector<std::size_t> k_grid,
                              const SweepConfig& config) {
    config.validate();
    k_grid = sorted_unique(std::move(k_grid), "K");
    std::vector<Scorer> scorers;
    for (std::size_t k : k_grid) {
        scorers.push_back(multi_k_scorer(k));
    }
    const bool has_base = k_grid.front() == 1;
    const bool has_extra = k_grid.back() > 1;
    if (has_base && has_extra) {
        scorers.push_back(Scorer::cosine);
    }

    const SplitPlan plan = make_split(dump.manifest, config.n_fit, config.seed, config.direction, config.holdout);
    const EvalSet set = assemble(dump, layer, plan);
    const LayerEvaluation eval = evaluate_set(set, ablation_options(config, scorers));

    AblationResult out;
    out.axis = "K";
    const auto ids = sorted_ids(set);
    for (std::size_t k : k_grid) {
        AblationPoint p;
        p.x = static_cast<double>(k);
        p.layer = layer;
        p.direction = config.direction;
        p.eval_ids = ids;
        const Scorer s = multi_k_scorer(k);
        for (const auto& e : eval.report.entries) {
            if (e.scorer == s) {
                p.report.entries.push_back(e);
            }
        }
        out.points.push_back(std::move(p));
    }
    if (has_base && has_extra) {
        const auto hn = TaskKind::harmful_vs_normative;
        const double base = eval.report.at(layer, Scorer::k1, hn).metrics.auroc;
        double best = -1.0;
        for (std::size_t k : k_grid) {
            if (k > 1) {
                best = std::max(best, eval.report.at(layer, multi_k_scorer(k), hn).metrics.auroc);
            }
        }
        out.delta_k = best - base;
        out.delta_cos = eval.report.at(layer, Scorer::cosine, hn).metrics.auroc - base;
    }
    return out;
}

std::string_view to_string(DimMode mode) {
    return mode == DimMode::subspace ? "subspace" : "reconstruct";
}

DimMode dim_mode_from_string(std::string_view name) {
    if (name == "subspace") {
        return DimMode::subspace;
    }
    if (name == "reconstruct") {
        return DimMode::reconstruct;
    }
    throw UsageError(fmt::format("unknown dimension ablation mode '{}' (subspace, reconstruct)", name));
}

std::vector<std::size_t> default_dim_grid(std::size_t dim, std::size_t n_fit) {
    const std::size_t cap = std::min(n_fit > 0 ? n_fit - 1 : 0, dim);
    std::vector<std::size_t> grid;
    for (std::size_t m : kDefaultDimGrid) {
        if (m <= cap && m < dim) {
            grid.push_back(m);
        }
    }
    if (dim <= cap) {
        grid.push_back(dim);
    }
    return grid;
}

AblationResult run_dim_ablation(const Dump& dump, int layer, std::vector<std::size_t> m_grid, std::size_t k,
                                const SweepConfig& config, DimMode mode) {
    config.validate();
    m_grid = sorted_unique(std::move(m_grid), "retained-dimension");
    const Scorer scorer = multi_k_scorer(k);
    const SplitPlan plan = make_split(dump.manifest, config.n_fit, config.seed, config.direction, config.holdout);
    const EvalSet set = assemble(dump, layer, plan);

    const std::size_t dim = set.fit.cols();
    const std::size_t cap = std::min(set.fit.rows() - 1, dim);
    if (m_grid.front() < k) {
        throw UsageError(fmt::format("retained dims {} below K = {}", m_grid.front(), k));
    }
    if (m_grid.back() > cap) {
        throw UsageError(fmt::format("retained dims {} exceed available rank min(N_fit - 1, D) = {}", m_grid.back(),
                                     cap));
    }
    const PrincipalAxes axes = with_context(fmt::format("layer {}", layer), [&] {
        return principal_axes(set.fit, m_grid.back(), config.centered, config.eigen_method);
    });
    if (axes.variances[m_grid.back() - 1] <= kMinAxisVariance) {
        throw UsageError(fmt::format("retained dims {} exceed the rank of the normative fit set", m_grid.back()));
    }
    const std::vector<double> mean = config.centered ? axes.mean : std::vector<double>(dim, 0.0);

    AblationResult out;
    out.axis = "retained_dims";
    out.scorer = scorer;
    out.points.resize(m_grid.size());
    const auto ids = sorted_ids(set);
    const EvalOptions opts = ablation_options(config, {scorer});
    parallel_for(m_grid.size(), config.threads, [&](std::size_t i) {
        const std::size_t m = m_grid[i];
        Matrix w(m, dim);
        std::copy_n(axes.axes.data().begin(), m * dim, w.data().begin());
        EvalSet sub;
        sub.layer = layer;
        sub.fit_ids = set.fit_ids;
        sub.eval_ids = set.eval_ids;
        sub.eval_roles = set.eval_roles;
        if (mode == DimMode::subspace) {
            sub.fit = project_rows(set.fit, w);
            sub.eval = project_rows(set.eval, w);
        } else {
            sub.fit = reconstruct_rows(set.fit, w, mean);
            sub.eval = reconstruct_rows(set.eval, w, mean);
        }
        auto eval = with_context(fmt::format("retained dims {}", m), [&] { return evaluate_set(sub, opts); });
        AblationPoint& p = out.points[i];
        p.x = static_cast<double>(m);
        p.layer = layer;
        p.direction = config.direction;
        p.report = std::move(eval.report);
        p.eval_ids = ids;
    });
    return out;
}

AblationResult run_stability(const Dump& dump, const std::vector<int>& layers, std::vector<std::size_t> n_grid,
                             const std::vector<Ordering>& directions, const SweepConfig& config) {
    config.validate();
    n_grid = sorted_unique(std::move(n_grid), "fit-size");
    if (layers.empty() || directions.empty()) {
        throw UsageError("stability needs at least one layer and one ordering direction");
    }
    struct Job {
        int layer;
        std::size_t n;
        Ordering direction;
    };
    std::vector<Job> jobs;
    for (int l : layers) {
        for (std::size_t n : n_grid) {
            for (Ordering d : directions) {
                jobs.push_back({l, n, d});
            }
        }
    }
    AblationResult out;
    out.axis = "n_fit";
    out.scorer = Scorer::k1;
    out.points.resize(jobs.size());
    const EvalOptions opts = ablation_options(config, {Scorer::k1});
    parallel_for(jobs.size(), config.threads, [&](std::size_t i) {
        const Job& job = jobs[i];
        const SplitPlan plan = make_split(dump.manifest, job.n, config.seed, job.direction, config.holdout);
        const EvalSet set = assemble(dump, job.layer, plan);
        auto eval = with_context(fmt::format("n_fit {} {}", job.n, to_string(job.direction)),
                                 [&] { return evaluate_set(set, opts); });
        AblationPoint& p = out.points[i];
        p.x = static_cast<double>(job.n);
        p.layer = job.layer;
        p.direction = job.direction;
        p.report = std::move(eval.report);
        p.eval_ids = sorted_ids(set);
    });
    return out;
}

std::vector<std::string> emit_figure_data(const FigureInputs& inputs, const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw DataError(fmt::format("cannot create {}: {}", out_dir.string(), ec.message()));
    }
    std::vector<std::string> written;
    auto open = [&](const char* name) {
        written.emplace_back(name);
        return open_csv(out_dir / name);
    };

    if (const SweepResult* sweep = inputs.sweep) {
        {
            auto out = open("auroc_by_layer.csv");
            out << "layer,scorer,task,auroc\n";
            for (const auto& e : sweep->report.entries) {
                out << e.layer << ',' << to_string(e.scorer) << ',' << to_string(e.task) << ','
                    << csv::number(e.metrics.auroc) << '\n';
            }
        }
        {
            auto out = open("eval_report.csv");
            write_report_csv(sweep->report, out);
        }
        {
            auto out = open("layer_selection.csv");
            const auto& s = sweep->selection;
            out << "best_layer,criterion,best_auroc,plateau_width\n"
                << s.best_layer << ',' << csv::field(s.criterion) << ',' << csv::number(s.best_auroc) << ','
                << csv::number(s.plateau_width) << '\n';
        }
        {
            auto out = open("theta_stats.csv");
            out << "layer,mu0,sigma_norm,harm_mean,delta_theta,benign_mean,sigma_harm,fit_mean,sigma_benign\n";
            for (const auto& l : sweep->layers) {
                const auto& t = l.stats;
                out << t.layer << ',' << csv::number(t.mu0) << ',' << csv::number(t.sigma_norm) << ','
                    << csv::number(t.harm_mean) << ',' << csv::number(t.delta_theta) << ','
                    << csv::number(t.benign_mean) << ',' << csv::number(t.sigma_harm) << ','
                    << csv::number(t.fit_mean) << ',' << csv::number(t.sigma_benign) << '\n';
            }
        }
        const LayerEvaluation& op = sweep->layer(inputs.layer.value_or(sweep->selection.best_layer));
        {
            auto out = open("theta_phi_points.csv");
            out << "prompt_id,role,theta,phi,x,y\n";
            for (const auto& p : op.points) {
                out << csv::field(p.prompt_id) << ',' << to_string(p.role) << ',' << csv::number(p.coords.theta)
                    << ',' << csv::number(p.coords.phi) << ',' << csv::number(p.xy.x) << ',' << csv::number(p.xy.y)
                    << '\n';
            }
        }
        const auto& scorers = op.scores.scorers;
        const Scorer main =
            std::find(scorers.begin(), scorers.end(), Scorer::k1) != scorers.end() ? Scorer::k1 : scorers.front();
        const std::size_t col = op.scores.index_of(main);
        {
            auto out = open("score_distributions.csv");
            out << "prompt_id,role,score\n";
            for (const auto& r : op.scores.rows) {
                out << csv::field(r.prompt_id) << ',' << to_string(r.role) << ',' << csv::number(r.scores[col])
                    << '\n';
            }
        }
        {
            auto out = open("pr_curves.csv");
            out << "task,recall,precision\n";
            for (TaskKind t : kAllTasks) {
                const BinaryTask task = make_task(op.scores, main, t);
                if (task.positive.empty() || task.negative.empty()) {
                    continue;
                }
                for (const auto& p : pr_curve(task)) {
                    out << to_string(t) << ',' << csv::number(p.recall) << ',' << csv::number(p.precision) << '\n';
                }
            }
        }
    }

    const auto hn = TaskKind::harmful_vs_normative;
    const auto hb = TaskKind::harmful_vs_benign;
    if (const AblationResult* k = inputs.k_ablation) {
        {
            auto out = open("k_ablation.csv");
            out << "layer,k,scorer,auroc_hn,auroc_hb\n";
            for (const auto& p : k->points) {
                const Scorer s = k->point_scorer(p);
                out << p.layer << ',' << p.x << ',' << to_string(s) << ',' << optional_auroc(p.report, p.layer, s, hn)
                    << ',' << optional_auroc(p.report, p.layer, s, hb) << '\n';
            }
        }
        auto out = open("k_ablation_summary.csv");
        out << "delta_k,delta_cos\n"
            << (k->delta_k ? csv::number(*k->delta_k) : "") << ',' << (k->delta_cos ? csv::number(*k->delta_cos) : "")
            << '\n';
    }
    if (const AblationResult* d = inputs.dim_ablation) {
        auto out = open("dim_ablation.csv");
        out << "layer,m,auroc_hn,auroc_hb\n";
        for (const auto& p : d->points) {
            out << p.layer << ',' << p.x << ',' << optional_auroc(p.report, p.layer, d->scorer, hn) << ','
                << optional_auroc(p.report, p.layer, d->scorer, hb) << '\n';
        }
    }
    if (const AblationResult* s = inputs.stability) {
        auto out = open("stability.csv");
        out << "layer,n_fit,direction,auroc_hn,auroc_hb,auroc_hr\n";
        for (const auto& p : s->points) {
            out << p.layer << ',' << p.x << ',' << to_string(p.direction) << ','
                << optional_auroc(p.report, p.layer, s->scorer, hn) << ','
                << optional_auroc(p.report, p.layer, s->scorer, hb) << ','
                << optional_auroc(p.report, p.layer, s->scorer, TaskKind::harmful_vs_rest) << '\n';
        }
    }
    std::sort(written.begin(), written.end());
    return written;
}

BenchResult scoring_latency_bench(std::size_t dim, std::size_t trials, std::uint64_t seed) {
    if (dim < 1) {
        throw UsageError("bench dim must be at least 1");
    }
    if (trials < 1) {
        throw UsageError("bench needs at least one trial");
    }
    random::Engine rng(seed);
    ReferenceBasis basis;
    basis.directions = Matrix(1, dim);
    for (auto& x : basis.directions.data()) {
        x = random::standard_normal(rng);
    }
    const double cn = norm(basis.directions.row(0));
    for (auto& x : basis.directions.data()) {
        x /= cn;
    }
    constexpr std::size_t kPool = 8;
    Matrix pool(kPool, dim);
    for (auto& x : pool.data()) {
        x = random::standard_normal(rng);
    }
    const ThetaGaussian g{1.2, 0.25, 200, VarianceEstimator::ml};

    BenchResult out;
    out.dim = dim;
    out.trials = trials;
    out.repetitions = std::max<std::size_t>(1, 65536 / dim);

    volatile double sink = 0.0;
    auto run_trial = [&] {
        const auto start = std::chrono::steady_clock::now();
        double acc = 0.0;
        for (std::size_t i = 0; i < out.repetitions; ++i) {
            acc += score_k1(theta(pool.row(i % kPool), basis), g);
        }
        const auto stop = std::chrono::steady_clock::now();
        sink = sink + acc;
        return std::chrono::duration<double, std::milli>(stop - start).count() /
               static_cast<double>(out.repetitions);
    };
    for (int w = 0; w < 10; ++w) {
        run_trial();
    }
    std::vector<double> times(trials);
    for (auto& t : times) {
        t = run_trial();
    }
    const auto s = mean_sd(times);
    out.mean_ms = s.mean;
    out.std_ms = s.sd;
    return out;
}

} // namespace thetaguard
