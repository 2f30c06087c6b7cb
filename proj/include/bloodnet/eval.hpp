#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bloodnet/model.hpp"
#include "bloodnet/phantom.hpp"

namespace bloodnet {

// Area under the ROC curve via the Mann-Whitney rank statistic, ties credited
// one half. Equals P(score_pos > score_neg) + 0.5 P(tie). Throws
// std::invalid_argument unless both classes are present.
double roc_auc(std::span<const int> labels, std::span<const double> scores);

struct RocPoint {
    double fpr;
    double tpr;
    double threshold;  // predict positive when score >= threshold
};

// Points ordered by increasing fpr, from (0,0) to (1,1).
std::vector<RocPoint> roc_curve(std::span<const int> labels, std::span<const double> scores);

struct BootstrapResult {
    double mean_auc = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t n_resamples = 0;
    double confidence = 0.95;
};

inline constexpr std::size_t kDefaultBootstrapResamples = 10000;

// Percentile bootstrap. Resample r draws from its own stream keyed by
// (seed, r); single-class resamples are redrawn so exactly n AUCs contribute.
BootstrapResult bootstrap_ci(std::span<const int> labels, std::span<const double> scores, std::size_t n,
                             std::uint64_t seed, double confidence = 0.95);

// Linear-interpolated percentile, q in [0,1], of an unsorted sample.
double percentile(std::vector<double> values, double q);

// The study score is the largest window score.
double study_probability(std::span<const double> window_probs);

// Classification probability for every slice-centred window of a study.
template <typename T>
std::vector<double> window_probabilities(const Model<T>& model, const Study& study, const BrainWindow& window = {},
                                         std::size_t batch_size = 32);

template <typename T>
double study_probability(const Model<T>& model, const Study& study, const BrainWindow& window = {});

enum class EvalLevel { slice, study };
std::string_view level_name(EvalLevel level);
EvalLevel parse_level(std::string_view name);

struct EvalItem {
    std::string id;
    int label = 0;
    double score = 0.0;
    bool operator==(const EvalItem&) const = default;
};

struct EvalReport {
    std::string variant;
    EvalLevel level = EvalLevel::slice;
    std::vector<EvalItem> items;
    double auc = 0.0;
    BootstrapResult ci;
    std::uint64_t seed = 0;
    std::vector<RocPoint> roc_points;
};

EvalReport make_report(std::string variant, EvalLevel level, std::vector<EvalItem> items, std::size_t n_bootstrap,
                       std::uint64_t seed, double confidence = 0.95);

// Scores every window (slice level) or every study (study level, max rule).
template <typename T>
std::vector<EvalItem> score_studies(const Model<T>& model, std::span<const Study> studies, EvalLevel level,
                                    const BrainWindow& window = {});

struct ComparisonRow {
    std::string variant;
    double auc;
    double ci_low;
    double ci_high;
    double mean_auc;
    std::string reference;  // published validation AUC for the same variant, for context only
};

// Rows in canonical variant order (single_task, multi_task, task_dependent,
// then anything else by name). Throws if reports do not share an item set.
std::vector<ComparisonRow> compare_variants(std::span<const EvalReport> reports);

std::string comparison_csv(std::span<const ComparisonRow> rows);
std::string comparison_table(std::span<const ComparisonRow> rows);

// CSV writers; column orders are documented in docs/file_formats.md.
std::string report_items_csv(const EvalReport& report);
std::string report_summary_csv(const EvalReport& report);
std::string roc_csv(const EvalReport& report);

// Rebuilds a report from its summary and items CSV; ROC points are recomputed.
EvalReport parse_report(const std::string& summary_csv, const std::string& items_csv);

}  // namespace bloodnet
