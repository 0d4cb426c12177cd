#pragma once

#include "thetaguard/scoring.hpp"

#include <array>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace thetaguard {

// h/n, h/b and h/r are detection tasks with harmful as the positive class;
// b/n puts benign-aggressive first so its rank-biserial is r_b/n.
enum class TaskKind { harmful_vs_normative, harmful_vs_benign, harmful_vs_rest, benign_vs_normative };

inline constexpr std::array<TaskKind, 4> kAllTasks = {TaskKind::harmful_vs_normative, TaskKind::harmful_vs_benign,
                                                      TaskKind::harmful_vs_rest, TaskKind::benign_vs_normative};

std::string_view to_string(TaskKind t);
TaskKind task_from_string(std::string_view name);

struct BinaryTask {
    std::vector<double> positive;
    std::vector<double> negative;
    TaskKind kind = TaskKind::harmful_vs_normative;
};

// P(score_pos > score_neg) + 0.5 P(tie), via midranks.
double auroc(const BinaryTask& task);

// Average precision over a descending-score sweep; tied scores form one threshold.
double auprc(const BinaryTask& task);

// Highest precision over operating points whose recall is at least `target_recall`.
double precision_at_recall(const BinaryTask& task, double target_recall);

struct PrPoint {
    double threshold = 0.0;
    double recall = 0.0;
    double precision = 0.0;
};

// One point per distinct score, descending, stopping at the first point with full recall.
std::vector<PrPoint> pr_curve(const BinaryTask& task);

inline constexpr double kMinReportedP = 1e-300;

struct MannWhitney {
    double u = 0.0;         // pairs where positive > negative, ties count 1/2
    double z = 0.0;         // continuity-corrected, tie-corrected
    double p = 1.0;         // two-sided, clamped below at 1e-300
    double log10_p = 0.0;   // not clamped; asymptotic erfc when p underflows
};

MannWhitney mann_whitney_u(const BinaryTask& task);

// 2U/(n1 n2) - 1; positive when the positive group scores higher.
double rank_biserial(const BinaryTask& task);

struct TaskMetrics {
    double auroc = 0.0;
    double auprc = 0.0;
    double prec_at_recall = 0.0;
    double u_statistic = 0.0;
    double p_value = 1.0;
    double log10_p = 0.0;
    double rank_biserial = 0.0;
    std::size_t n_positive = 0;
    std::size_t n_negative = 0;
};

inline constexpr double kDefaultTargetRecall = 0.90;

TaskMetrics evaluate_task(const BinaryTask& task, double target_recall = kDefaultTargetRecall);

BinaryTask make_task(const ScoreTable& table, Scorer scorer, TaskKind kind);

struct ReportEntry {
    int layer = 0;
    Scorer scorer = Scorer::k1;
    TaskKind task = TaskKind::harmful_vs_normative;
    TaskMetrics metrics;
};

struct EvalReport {
    std::vector<ReportEntry> entries;

    const ReportEntry* find(int layer, Scorer scorer, TaskKind task) const;
    const ReportEntry& at(int layer, Scorer scorer, TaskKind task) const;
};

// Every scorer column of the table on every task, tagged with `layer`.
EvalReport evaluate_table(const ScoreTable& table, int layer, double target_recall = kDefaultTargetRecall);

void write_report_csv(const EvalReport& report, std::ostream& out);
nlohmann::json report_to_json(const EvalReport& report);

} // namespace thetaguard
