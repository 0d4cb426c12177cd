#include "thetaguard/cli.hpp"

#include "thetaguard/errors.hpp"
#include "thetaguard/experiments.hpp"
#include "thetaguard/synth.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

namespace thetaguard {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Options {
    std::string config;
    std::string log_level = "warn";
    unsigned threads = 0;

    std::string dump;
    std::string out;
    std::string spec;
    std::string preset;
    std::string detector;
    std::string scores;
    int layer = -1;
    std::vector<int> layers;
    std::size_t n_fit = 200;
    std::size_t k = 1;
    bool centered = true;
    std::uint64_t seed = 0;
    std::string direction = "forward";
    std::size_t holdout = 0;
    std::string estimator = "ml";
    std::vector<std::string> scorers;
    double target_recall = kDefaultTargetRecall;
    std::vector<std::size_t> k_grid = {1, 2, 3, 4};
    std::vector<std::size_t> m_grid;
    std::vector<std::size_t> n_grid;
    std::vector<std::string> directions = {"forward", "reverse"};
    std::string mode = "subspace";
    std::size_t dim = 1024;
    std::size_t trials = 100;
    std::size_t num_layers = 1;
};

// Flags whose JSON `false` maps to a separate negating flag.
const std::map<std::string, std::string> kNegations = {{"centered", "--uncentered"}};

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::string json_scalar(const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
}

// Appends config-file entries for flags not given on the command line.
std::vector<std::string> merge_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        }
    }
    if (path.empty()) {
        return args;
    }
    std::ifstream in(path);
    if (!in) {
        throw UsageError(fmt::format("cannot open config file {}", path));
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(fmt::format("config file {}: {}", path, e.what()));
    }
    if (!j.is_object()) {
        throw UsageError(fmt::format("config file {} must hold a JSON object", path));
    }
    for (const auto& [raw_key, value] : j.items()) {
        std::string key = raw_key;
        std::replace(key.begin(), key.end(), '_', '-');
        const std::string flag = "--" + key;
        const auto neg = kNegations.find(key);
        if (has_flag(args, flag) || (neg != kNegations.end() && has_flag(args, neg->second))) {
            continue;
        }
        if (value.is_boolean()) {
            if (value.get<bool>()) {
                args.push_back(flag);
            } else if (neg != kNegations.end()) {
                args.push_back(neg->second);
            } else {
                throw UsageError(fmt::format("config key '{}' cannot be false", raw_key));
            }
        } else if (value.is_array()) {
            std::string joined;
            for (const auto& item : value) {
                joined += (joined.empty() ? "" : ",") + json_scalar(item);
            }
            args.push_back(flag);
            args.push_back(joined);
        } else {
            args.push_back(flag);
            args.push_back(json_scalar(value));
        }
    }
    return args;
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) {
        throw UsageError(fmt::format("{} is required", flag));
    }
}

SweepConfig sweep_config(const Options& o) {
    SweepConfig c;
    c.layers = o.layers;
    if (!o.scorers.empty()) {
        c.scorers.clear();
        for (const auto& s : o.scorers) {
            c.scorers.push_back(scorer_from_string(s));
        }
    }
    c.n_fit = o.n_fit;
    c.centered = o.centered;
    c.seed = o.seed;
    c.direction = ordering_from_string(o.direction);
    c.holdout = o.holdout;
    c.estimator = estimator_from_string(o.estimator);
    c.target_recall = o.target_recall;
    c.threads = o.threads;
    c.validate();
    return c;
}

Dump load_dump(const Options& o) {
    require(o.dump, "--dump");
    spdlog::info("reading dump {}", o.dump);
    return read_dump(o.dump);
}

int require_layer(const Options& o) {
    if (o.layer < 0) {
        throw UsageError("--layer is required");
    }
    return o.layer;
}

json files_json(const std::vector<std::string>& files) {
    return json(files);
}

json cmd_synth(const Options& o, const CLI::App& sub) {
    require(o.out, "--out");
    std::vector<RingSpec> specs;
    if (!o.spec.empty()) {
        std::ifstream in(o.spec);
        if (!in) {
            throw UsageError(fmt::format("cannot open spec {}", o.spec));
        }
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw UsageError(fmt::format("spec {}: {}", o.spec, e.what()));
        }
        specs = ring_specs_from_json(j);
    } else if (o.preset == "outer" || o.preset == "inner") {
        const RingSpec base = o.preset == "outer" ? outer_ring_preset() : inner_ring_preset();
        specs.assign(std::max<std::size_t>(1, o.num_layers), base);
    } else {
        throw UsageError("synth needs --spec FILE or --preset outer|inner");
    }
    for (auto& s : specs) {
        if (sub.count("--dim") > 0) {
            s.dim = o.dim;
        }
        if (sub.count("--seed") > 0) {
            s.seed = o.seed;
        }
    }
    const Dump dump = generate_dump(specs);
    write_dump(dump.layers, dump.manifest, o.out);
    return {{"layers", dump.layers.size()},
            {"dim", dump.manifest.dim},
            {"prompts", dump.manifest.prompt_ids.size()},
            {"out", o.out}};
}

json cmd_fit(const Options& o) {
    require(o.out, "--out");
    const Dump dump = load_dump(o);
    const int layer = require_layer(o);
    const SweepConfig c = sweep_config(o);
    const SplitPlan plan = make_split(dump.manifest, c.n_fit, c.seed, c.direction, c.holdout);
    const EvalSet set = assemble(dump, layer, plan);
    DetectorOptions d;
    if (!o.scorers.empty()) {
        d.scorers = c.scorers;
    }
    if (o.k > 1 && std::find(d.scorers.begin(), d.scorers.end(), multi_k_scorer(o.k)) == d.scorers.end()) {
        d.scorers.push_back(multi_k_scorer(o.k));
    }
    d.centered = c.centered;
    d.estimator = c.estimator;
    NormativeDetector det;
    try {
        det = fit_detector(set.fit, d);
    } catch (...) {
        rethrow_with_context(fmt::format("layer {}", layer));
    }
    save_detector(det, o.out);
    std::ofstream split(fs::path(o.out) / "split.json", std::ios::binary);
    split << json({{"fit_ids", plan.fit_ids},
                   {"ordering_seed", plan.ordering_seed},
                   {"ordering_direction", std::string(to_string(plan.ordering_direction))}})
                 .dump(2)
          << '\n';
    return {{"layer", layer},         {"n_fit", set.fit.rows()}, {"k", det.basis.k()},
            {"centered", c.centered}, {"mu0", det.gaussian.mu0}, {"sigma0", det.gaussian.sigma0},
            {"out", o.out}};
}

json cmd_score(const Options& o) {
    require(o.detector, "--detector");
    require(o.out, "--out");
    const NormativeDetector det = load_detector(o.detector);
    const Dump dump = load_dump(o);
    const int layer = require_layer(o);
    std::map<std::string, Role> role_of;
    for (const auto& [role, ids] : dump.manifest.groups) {
        for (const auto& id : ids) {
            role_of[id] = role;
        }
    }
    std::vector<std::string> ids;
    std::vector<Role> roles;
    for (const auto& id : dump.manifest.prompt_ids) {
        if (const auto it = role_of.find(id); it != role_of.end()) {
            ids.push_back(id);
            roles.push_back(it->second);
        }
    }
    const ActivationMatrix& m = dump.layer(layer);
    if (m.dim() != det.basis.dim()) {
        throw DataError(fmt::format("detector dim {} but layer {} dim {}", det.basis.dim(), layer, m.dim()));
    }
    ScoreTable table;
    try {
        table = score_rows(det, m.to_matrix(dump.rows_of(ids)), ids, roles);
    } catch (...) {
        rethrow_with_context(fmt::format("layer {}", layer));
    }
    std::ofstream out(o.out, std::ios::binary);
    if (!out) {
        throw DataError(fmt::format("cannot write {}", o.out));
    }
    write_score_csv(table, out);
    json scorers = json::array();
    for (Scorer s : table.scorers) {
        scorers.push_back(std::string(to_string(s)));
    }
    return {{"layer", layer}, {"rows", table.rows.size()}, {"scorers", scorers}, {"out", o.out}};
}

json cmd_eval(const Options& o) {
    require(o.scores, "--scores");
    require(o.out, "--out");
    std::ifstream in(o.scores);
    if (!in) {
        throw DataError(fmt::format("cannot open {}", o.scores));
    }
    const ScoreTable table = read_score_csv(in);
    const EvalReport report = evaluate_table(table, std::max(o.layer, 0), o.target_recall);
    std::ofstream out(o.out, std::ios::binary);
    if (!out) {
        throw DataError(fmt::format("cannot write {}", o.out));
    }
    write_report_csv(report, out);
    json aurocs = json::object();
    for (const auto& e : report.entries) {
        if (e.task == TaskKind::harmful_vs_normative) {
            aurocs[std::string(to_string(e.scorer))] = e.metrics.auroc;
        }
    }
    return {{"rows", table.rows.size()}, {"auroc_hn", aurocs}, {"out", o.out}};
}

json cmd_sweep(const Options& o) {
    require(o.out, "--out");
    const Dump dump = load_dump(o);
    const SweepResult result = run_layer_sweep(dump, sweep_config(o));
    FigureInputs in;
    in.sweep = &result;
    const auto files = emit_figure_data(in, o.out);
    const auto& s = result.selection;
    return {{"layers", result.layers.size()},
            {"best_layer", s.best_layer},
            {"best_auroc", s.best_auroc},
            {"criterion", s.criterion},
            {"plateau_width", s.plateau_width},
            {"files", files_json(files)},
            {"out", o.out}};
}

json ablation_summary(const AblationResult& r, const std::vector<std::string>& files) {
    json j = {{"axis", r.axis}, {"points", r.points.size()}, {"eval_sets_constant", r.eval_sets_constant()}};
    j["files"] = files_json(files);
    return j;
}

json cmd_ablate_k(const Options& o) {
    require(o.out, "--out");
    const Dump dump = load_dump(o);
    const AblationResult r = run_k_ablation(dump, require_layer(o), o.k_grid, sweep_config(o));
    FigureInputs in;
    in.k_ablation = &r;
    json j = ablation_summary(r, emit_figure_data(in, o.out));
    j["delta_k"] = r.delta_k ? json(*r.delta_k) : json(nullptr);
    j["delta_cos"] = r.delta_cos ? json(*r.delta_cos) : json(nullptr);
    return j;
}

json cmd_ablate_dim(const Options& o, const CLI::App& sub) {
    require(o.out, "--out");
    const Dump dump = load_dump(o);
    const SweepConfig c = sweep_config(o);
    const std::size_t k = sub.count("--k") > 0 ? o.k : 2;
    auto grid = o.m_grid;
    if (grid.empty()) {
        grid = default_dim_grid(dump.manifest.dim, c.n_fit);
    }
    const AblationResult r = run_dim_ablation(dump, require_layer(o), grid, k, c, dim_mode_from_string(o.mode));
    FigureInputs in;
    in.dim_ablation = &r;
    json j = ablation_summary(r, emit_figure_data(in, o.out));
    j["k"] = k;
    j["mode"] = o.mode;
    return j;
}

std::vector<std::size_t> stability_grid(const Options& o, const Dump& dump, const SweepConfig& c) {
    if (!o.n_grid.empty()) {
        return o.n_grid;
    }
    std::size_t pool = dump.manifest.n_fit();
    if (dump.manifest.group(Role::normative_eval).empty()) {
        pool = pool > c.holdout ? pool - c.holdout : 0;
    }
    std::vector<std::size_t> grid;
    for (std::size_t n : kDefaultStabilityGrid) {
        if (n <= pool) {
            grid.push_back(n);
        } else {
            spdlog::warn("dropping n_fit {} from the stability grid: pool holds {}", n, pool);
        }
    }
    return grid;
}

std::vector<Ordering> parse_directions(const std::vector<std::string>& names) {
    std::vector<Ordering> out;
    for (const auto& n : names) {
        out.push_back(ordering_from_string(n));
    }
    return out;
}

json cmd_stability(const Options& o) {
    require(o.out, "--out");
    const Dump dump = load_dump(o);
    const SweepConfig c = sweep_config(o);
    std::vector<int> layers = o.layers;
    if (layers.empty()) {
        layers = o.layer >= 0 ? std::vector<int>{o.layer} : dump.layer_indices();
    }
    const AblationResult r =
        run_stability(dump, layers, stability_grid(o, dump, c), parse_directions(o.directions), c);
    FigureInputs in;
    in.stability = &r;
    return ablation_summary(r, emit_figure_data(in, o.out));
}

json cmd_bench(const Options& o) {
    const BenchResult r = scoring_latency_bench(o.dim, o.trials, o.seed == 0 ? 1 : o.seed);
    json j = {{"dim", r.dim},
              {"trials", r.trials},
              {"repetitions", r.repetitions},
              {"mean_ms", r.mean_ms},
              {"std_ms", r.std_ms}};
    if (!o.out.empty()) {
        std::ofstream out(o.out, std::ios::binary);
        out << j.dump(2) << '\n';
    }
    return j;
}

json cmd_emit_figures(const Options& o, const CLI::App& sub) {
    require(o.out, "--out");
    const Dump dump = load_dump(o);
    const SweepConfig c = sweep_config(o);
    const SweepResult sweep = run_layer_sweep(dump, c);
    const int layer = o.layer >= 0 ? o.layer : sweep.selection.best_layer;
    spdlog::info("ablations at layer {}", layer);
    const AblationResult k = run_k_ablation(dump, layer, o.k_grid, c);
    auto grid = o.m_grid.empty() ? default_dim_grid(dump.manifest.dim, c.n_fit) : o.m_grid;
    const std::size_t dim_k = sub.count("--k") > 0 ? o.k : 2;
    const AblationResult dim = run_dim_ablation(dump, layer, grid, dim_k, c, dim_mode_from_string(o.mode));
    const AblationResult stab =
        run_stability(dump, {layer}, stability_grid(o, dump, c), parse_directions(o.directions), c);
    FigureInputs in{&sweep, &k, &dim, &stab, layer};
    const auto files = emit_figure_data(in, o.out);
    return {{"best_layer", sweep.selection.best_layer},
            {"layer", layer},
            {"files", files_json(files)},
            {"out", o.out}};
}

void add_dump(CLI::App* sub, Options& o) {
    sub->add_option("--dump", o.dump, "Activation dump directory");
}

void add_split(CLI::App* sub, Options& o) {
    sub->add_option("--n-fit", o.n_fit, "Normative fit-set size")->capture_default_str();
    sub->add_option("--seed", o.seed, "Fit-pool shuffle seed (0 keeps manifest order)")->capture_default_str();
    sub->add_option("--direction", o.direction, "Fit-prefix ordering: forward or reverse")->capture_default_str();
    sub->add_option("--holdout", o.holdout, "Held-out normatives taken from the fit pool when the dump has none");
    sub->add_flag("--centered,!--uncentered", o.centered, "Mean-centre before PCA (default on)");
    sub->add_option("--estimator", o.estimator, "Variance estimator: ml or unbiased")->capture_default_str();
    sub->add_option("--scorers", o.scorers, "Scorers, comma separated (k1, abs_dev, bivariate, cosine, ...)")
        ->delimiter(',');
    sub->add_option("--target-recall", o.target_recall, "Recall level for the precision metric")
        ->capture_default_str();
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto logger = std::make_shared<spdlog::logger>("thetaguard", sink);
    logger->set_pattern("[%l] %v");
    const auto previous = spdlog::default_logger();
    spdlog::set_default_logger(logger);
    struct Restore {
        std::shared_ptr<spdlog::logger> p;
        ~Restore() { spdlog::set_default_logger(p); }
    } restore{previous};

    Options o;
    CLI::App app{"Angular anomaly detection over residual-stream activations", "thetaguard"};
    app.fallthrough();
    app.require_subcommand(1);
    app.set_version_flag("--version", fmt::format("thetaguard {} (dump format {})", kVersion, kDumpFormatVersion));
    app.add_option("--config", o.config, "JSON file of flag values; explicit flags win");
    app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error or off")->capture_default_str();
    app.add_option("--threads", o.threads, "Worker threads (0 = available parallelism)")->capture_default_str();

    auto* synth = app.add_subcommand("synth", "Generate a synthetic two-ring dump");
    synth->add_option("--spec", o.spec, "Ring spec JSON file");
    synth->add_option("--preset", o.preset, "Built-in spec: outer or inner");
    synth->add_option("--num-layers", o.num_layers, "Layers to generate with --preset");
    synth->add_option("--dim", o.dim, "Override the spec dimension");
    synth->add_option("--seed", o.seed, "Override the spec seed");
    synth->add_option("--out", o.out, "Output dump directory");

    auto* fit = app.add_subcommand("fit", "Fit a normative detector on one layer");
    add_dump(fit, o);
    fit->add_option("--layer", o.layer, "Layer index");
    fit->add_option("--k", o.k, "Reference components; K > 1 adds the multi-K scorer")->capture_default_str();
    add_split(fit, o);
    fit->add_option("--out", o.out, "Detector output directory");

    auto* score = app.add_subcommand("score", "Score every prompt of one layer with a fitted detector");
    score->add_option("--detector", o.detector, "Directory written by fit");
    add_dump(score, o);
    score->add_option("--layer", o.layer, "Layer index");
    score->add_option("--out", o.out, "Score CSV");

    auto* eval = app.add_subcommand("eval", "Metrics for every scorer and task of a score CSV");
    eval->add_option("--scores", o.scores, "Score CSV written by score");
    eval->add_option("--layer", o.layer, "Layer tag for the report");
    eval->add_option("--target-recall", o.target_recall, "Recall level for the precision metric");
    eval->add_option("--out", o.out, "Report CSV");

    auto* sweep = app.add_subcommand("sweep", "Evaluate every layer and select the operating layer");
    add_dump(sweep, o);
    sweep->add_option("--layers", o.layers, "Layers to evaluate (default all)")->delimiter(',');
    add_split(sweep, o);
    sweep->add_option("--out", o.out, "Output directory for CSVs");

    auto* ablate_k = app.add_subcommand("ablate-k", "Number of reference angles");
    add_dump(ablate_k, o);
    ablate_k->add_option("--layer", o.layer, "Layer index");
    ablate_k->add_option("--k-grid", o.k_grid, "K values")->delimiter(',')->capture_default_str();
    add_split(ablate_k, o);
    ablate_k->add_option("--out", o.out, "Output directory");

    auto* ablate_dim = app.add_subcommand("ablate-dim", "Retained normative principal dimensions");
    add_dump(ablate_dim, o);
    ablate_dim->add_option("--layer", o.layer, "Layer index");
    ablate_dim->add_option("--m-grid", o.m_grid, "Retained dimensions")->delimiter(',');
    ablate_dim->add_option("--k", o.k, "Angles used by the scorer (default 2)");
    ablate_dim->add_option("--mode", o.mode, "subspace or reconstruct")->capture_default_str();
    add_split(ablate_dim, o);
    ablate_dim->add_option("--out", o.out, "Output directory");

    auto* stability = app.add_subcommand("stability", "AUROC against fit-set size");
    add_dump(stability, o);
    stability->add_option("--layer", o.layer, "Single layer");
    stability->add_option("--layers", o.layers, "Layers")->delimiter(',');
    stability->add_option("--n-grid", o.n_grid, "Fit-set sizes")->delimiter(',');
    stability->add_option("--directions", o.directions, "forward and/or reverse")->delimiter(',');
    add_split(stability, o);
    stability->add_option("--out", o.out, "Output directory");

    auto* bench = app.add_subcommand("bench", "Single-activation scoring latency");
    bench->add_option("--dim", o.dim, "Activation dimension")->capture_default_str();
    bench->add_option("--trials", o.trials, "Timed trials")->capture_default_str();
    bench->add_option("--seed", o.seed, "Seed for the random activations");
    bench->add_option("--out", o.out, "Optional JSON result file");

    auto* figures = app.add_subcommand("emit-figures", "Sweep plus every ablation, written as plot-ready CSVs");
    add_dump(figures, o);
    figures->add_option("--layer", o.layer, "Ablation layer (default: selected layer)");
    figures->add_option("--layers", o.layers, "Sweep layers (default all)")->delimiter(',');
    figures->add_option("--k-grid", o.k_grid, "K values")->delimiter(',');
    figures->add_option("--m-grid", o.m_grid, "Retained dimensions")->delimiter(',');
    figures->add_option("--k", o.k, "Angles for the dimension ablation (default 2)");
    figures->add_option("--mode", o.mode, "subspace or reconstruct");
    figures->add_option("--n-grid", o.n_grid, "Fit-set sizes")->delimiter(',');
    figures->add_option("--directions", o.directions, "forward and/or reverse")->delimiter(',');
    add_split(figures, o);
    figures->add_option("--out", o.out, "Output directory");

    std::string stage = "arguments";
    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = merge_config(std::move(args));
        std::reverse(args.begin(), args.end());
        try {
            app.parse(args);
        } catch (const CLI::CallForHelp&) {
            out << app.help("", CLI::AppFormatMode::All);
            return 0;
        } catch (const CLI::CallForAllHelp&) {
            out << app.help("", CLI::AppFormatMode::All);
            return 0;
        } catch (const CLI::CallForVersion& e) {
            out << e.what() << '\n';
            return 0;
        } catch (const CLI::ParseError& e) {
            err << "thetaguard: " << e.what() << "\n\n" << app.help("", CLI::AppFormatMode::All);
            return 1;
        }

        const auto level = spdlog::level::from_str(o.log_level);
        if (level == spdlog::level::off && o.log_level != "off") {
            throw UsageError(fmt::format("unknown log level '{}'", o.log_level));
        }
        logger->set_level(level);

        const CLI::App* sub = app.get_subcommands().front();
        stage = sub->get_name();
        const std::map<std::string, std::function<json()>> commands = {
            {"synth", [&] { return cmd_synth(o, *sub); }},
            {"fit", [&] { return cmd_fit(o); }},
            {"score", [&] { return cmd_score(o); }},
            {"eval", [&] { return cmd_eval(o); }},
            {"sweep", [&] { return cmd_sweep(o); }},
            {"ablate-k", [&] { return cmd_ablate_k(o); }},
            {"ablate-dim", [&] { return cmd_ablate_dim(o, *sub); }},
            {"stability", [&] { return cmd_stability(o); }},
            {"bench", [&] { return cmd_bench(o); }},
            {"emit-figures", [&] { return cmd_emit_figures(o, *sub); }},
        };
        json summary = commands.at(stage)();
        summary["command"] = stage;
        summary["status"] = "ok";
        out << summary.dump() << '\n';
        return 0;
    } catch (const UsageError& e) {
        err << "thetaguard " << stage << ": usage error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        err << "thetaguard " << stage << ": data error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        err << "thetaguard " << stage << ": numerical error: " << e.what() << '\n';
        return 3;
    } catch (const json::exception& e) {
        err << "thetaguard " << stage << ": data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "thetaguard " << stage << ": error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace thetaguard
