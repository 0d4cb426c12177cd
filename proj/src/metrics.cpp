#include "thetaguard/metrics.hpp"

#include "thetaguard/csv.hpp"
#include "thetaguard/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace thetaguard {

namespace {

void check_task(const BinaryTask& task) {
    if (task.positive.empty() || task.negative.empty()) {
        throw UsageError(fmt::format("task {} needs non-empty positive and negative groups", to_string(task.kind)));
    }
    auto finite = [](const std::vector<double>& v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(task.positive) || !finite(task.negative)) {
        throw DataError(fmt::format("task {} contains non-finite scores", to_string(task.kind)));
    }
}

struct RankSummary {
    double rank_sum_positive = 0.0;
    double tie_term = 0.0;  // sum of t^3 - t over tie groups
};

RankSummary rank_positives(const BinaryTask& task) {
    struct Item {
        double value;
        bool positive;
    };
    std::vector<Item> items;
    items.reserve(task.positive.size() + task.negative.size());
    for (double v : task.positive) {
        items.push_back({v, true});
    }
    for (double v : task.negative) {
        items.push_back({v, false});
    }
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.value < b.value; });

    RankSummary out;
    std::size_t i = 0;
    while (i < items.size()) {
        std::size_t j = i;
        while (j < items.size() && items[j].value == items[i].value) {
            ++j;
        }
        // 1-based ranks i+1..j share the midrank (i+1+j)/2.
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (items[k].positive) {
                out.rank_sum_positive += midrank;
            }
        }
        const auto t = static_cast<double>(j - i);
        out.tie_term += t * t * t - t;
        i = j;
    }
    return out;
}

double u_statistic(const BinaryTask& task, const RankSummary& ranks) {
    const auto n1 = static_cast<double>(task.positive.size());
    return ranks.rank_sum_positive - n1 * (n1 + 1.0) / 2.0;
}

// Cumulative (tp, fp) at each distinct threshold, descending.
struct SweepPoint {
    double threshold;
    std::size_t tp;
    std::size_t fp;
};

std::vector<SweepPoint> sweep(const BinaryTask& task) {
    std::vector<std::pair<double, bool>> items;
    items.reserve(task.positive.size() + task.negative.size());
    for (double v : task.positive) {
        items.emplace_back(v, true);
    }
    for (double v : task.negative) {
        items.emplace_back(v, false);
    }
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<SweepPoint> out;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t i = 0;
    while (i < items.size()) {
        const double threshold = items[i].first;
        while (i < items.size() && items[i].first == threshold) {
            (items[i].second ? tp : fp) += 1;
            ++i;
        }
        out.push_back({threshold, tp, fp});
    }
    return out;
}

// log10 of erfc(x) for large x where erfc underflows.
double log10_erfc(double x) {
    const double direct = std::erfc(x);
    if (direct > 1e-300) {
        return std::log10(direct);
    }
    const double x2 = x * x;
    const double series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
    const double ln = -x2 - std::log(x * std::sqrt(std::numbers::pi)) + std::log(series);
    return ln / std::numbers::ln10;
}

} // namespace

std::string_view to_string(TaskKind t) {
    switch (t) {
    case TaskKind::harmful_vs_normative:
        return "h/n";
    case TaskKind::harmful_vs_benign:
        return "h/b";
    case TaskKind::harmful_vs_rest:
        return "h/r";
    case TaskKind::benign_vs_normative:
        return "b/n";
    }
    return "?";
}

TaskKind task_from_string(std::string_view name) {
    for (TaskKind t : kAllTasks) {
        if (to_string(t) == name) {
            return t;
        }
    }
    throw UsageError(fmt::format("unknown task '{}'", name));
}

double auroc(const BinaryTask& task) {
    check_task(task);
    const RankSummary ranks = rank_positives(task);
    const auto pairs = static_cast<double>(task.positive.size()) * static_cast<double>(task.negative.size());
    return u_statistic(task, ranks) / pairs;
}

double auprc(const BinaryTask& task) {
    check_task(task);
    const auto n_pos = static_cast<double>(task.positive.size());
    double ap = 0.0;
    std::size_t prev_tp = 0;
    for (const auto& pt : sweep(task)) {
        if (pt.tp > prev_tp) {
            const double precision = static_cast<double>(pt.tp) / static_cast<double>(pt.tp + pt.fp);
            ap += precision * static_cast<double>(pt.tp - prev_tp);
            prev_tp = pt.tp;
        }
    }
    return ap / n_pos;
}

double precision_at_recall(const BinaryTask& task, double target_recall) {
    check_task(task);
    if (!(target_recall > 0.0 && target_recall <= 1.0)) {
        throw UsageError(fmt::format("target recall {} outside (0, 1]", target_recall));
    }
    const auto n_pos = static_cast<double>(task.positive.size());
    double best = 0.0;
    for (const auto& pt : sweep(task)) {
        const double recall = static_cast<double>(pt.tp) / n_pos;
        if (recall >= target_recall - 1e-12) {
            best = std::max(best, static_cast<double>(pt.tp) / static_cast<double>(pt.tp + pt.fp));
        }
    }
    return best;
}

std::vector<PrPoint> pr_curve(const BinaryTask& task) {
    check_task(task);
    const std::size_t n_pos = task.positive.size();
    std::vector<PrPoint> out;
    for (const auto& pt : sweep(task)) {
        out.push_back({pt.threshold, static_cast<double>(pt.tp) / static_cast<double>(n_pos),
                       static_cast<double>(pt.tp) / static_cast<double>(pt.tp + pt.fp)});
        if (pt.tp == n_pos) {
            break;
        }
    }
    return out;
}

MannWhitney mann_whitney_u(const BinaryTask& task) {
    check_task(task);
    const RankSummary ranks = rank_positives(task);
    const auto n1 = static_cast<double>(task.positive.size());
    const auto n2 = static_cast<double>(task.negative.size());
    const double n = n1 + n2;

    MannWhitney out;
    out.u = u_statistic(task, ranks);
    const double mean = 0.5 * n1 * n2;
    const double tie_adjust = n > 1.0 ? ranks.tie_term / (n * (n - 1.0)) : 0.0;
    const double variance = n1 * n2 / 12.0 * ((n + 1.0) - tie_adjust);
    const double excess = std::abs(out.u - mean) - 0.5;
    if (!(variance > 0.0) || excess <= 0.0) {
        out.z = 0.0;
        out.p = 1.0;
        out.log10_p = 0.0;
        return out;
    }
    out.z = std::copysign(excess / std::sqrt(variance), out.u - mean);
    const double x = std::abs(out.z) / std::numbers::sqrt2;
    out.p = std::max(std::min(1.0, std::erfc(x)), kMinReportedP);
    out.log10_p = std::min(0.0, log10_erfc(x));
    return out;
}

double rank_biserial(const BinaryTask& task) {
    return 2.0 * auroc(task) - 1.0;
}

TaskMetrics evaluate_task(const BinaryTask& task, double target_recall) {
    TaskMetrics m;
    const auto mw = mann_whitney_u(task);
    m.auroc = auroc(task);
    m.auprc = auprc(task);
    m.prec_at_recall = precision_at_recall(task, target_recall);
    m.u_statistic = mw.u;
    m.p_value = mw.p;
    m.log10_p = mw.log10_p;
    m.rank_biserial = 2.0 * m.auroc - 1.0;
    m.n_positive = task.positive.size();
    m.n_negative = task.negative.size();
    return m;
}

BinaryTask make_task(const ScoreTable& table, Scorer scorer, TaskKind kind) {
    BinaryTask task;
    task.kind = kind;
    const auto harmful = table.column(scorer, Role::harmful);
    const auto normative = table.column(scorer, Role::normative_eval);
    const auto benign = table.column(scorer, Role::benign_aggressive);
    switch (kind) {
    case TaskKind::harmful_vs_normative:
        task.positive = harmful;
        task.negative = normative;
        break;
    case TaskKind::harmful_vs_benign:
        task.positive = harmful;
        task.negative = benign;
        break;
    case TaskKind::harmful_vs_rest:
        task.positive = harmful;
        task.negative = normative;
        task.negative.insert(task.negative.end(), benign.begin(), benign.end());
        break;
    case TaskKind::benign_vs_normative:
        task.positive = benign;
        task.negative = normative;
        break;
    }
    return task;
}

const ReportEntry* EvalReport::find(int layer, Scorer scorer, TaskKind task) const {
    for (const auto& e : entries) {
        if (e.layer == layer && e.scorer == scorer && e.task == task) {
            return &e;
        }
    }
    return nullptr;
}

const ReportEntry& EvalReport::at(int layer, Scorer scorer, TaskKind task) const {
    if (const auto* e = find(layer, scorer, task)) {
        return *e;
    }
    throw UsageError(fmt::format("report has no entry for layer {}, {}, {}", layer, to_string(scorer),
                                 to_string(task)));
}

EvalReport evaluate_table(const ScoreTable& table, int layer, double target_recall) {
    EvalReport report;
    for (Scorer s : table.scorers) {
        for (TaskKind t : kAllTasks) {
            const BinaryTask task = make_task(table, s, t);
            if (task.positive.empty() || task.negative.empty()) {
                continue;
            }
            report.entries.push_back({layer, s, t, evaluate_task(task, target_recall)});
        }
    }
    return report;
}

void write_report_csv(const EvalReport& report, std::ostream& out) {
    out << "layer,scorer,task,auroc,auprc,prec_at_90,u_statistic,p_value,log10_p,rank_biserial,n_positive,"
           "n_negative\n";
    for (const auto& e : report.entries) {
        const auto& m = e.metrics;
        out << e.layer << ',' << to_string(e.scorer) << ',' << to_string(e.task) << ',' << csv::number(m.auroc)
            << ',' << csv::number(m.auprc) << ',' << csv::number(m.prec_at_recall) << ','
            << csv::number(m.u_statistic) << ',' << csv::number(m.p_value) << ',' << csv::number(m.log10_p) << ','
            << csv::number(m.rank_biserial) << ',' << m.n_positive << ',' << m.n_negative << '\n';
    }
}

nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : report.entries) {
        const auto& m = e.metrics;
        arr.push_back({{"layer", e.layer},
                       {"scorer", std::string(to_string(e.scorer))},
                       {"task", std::string(to_string(e.task))},
                       {"auroc", m.auroc},
                       {"auprc", m.auprc},
                       {"prec_at_90", m.prec_at_recall},
                       {"u_statistic", m.u_statistic},
                       {"p_value", m.p_value},
                       {"log10_p", m.log10_p},
                       {"rank_biserial", m.rank_biserial},
                       {"n_positive", m.n_positive},
                       {"n_negative", m.n_negative}});
    }
    return arr;
}

} // namespace thetaguard
