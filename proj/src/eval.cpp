#include "bloodnet/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "bloodnet/binary_io.hpp"
#include "bloodnet/rng.hpp"

namespace bloodnet {
namespace {

void check_inputs(std::span<const int> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) {
        throw std::invalid_argument("roc: " + std::to_string(labels.size()) + " labels vs " +
                                    std::to_string(scores.size()) + " scores");
    }
    std::size_t pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw std::invalid_argument("roc: labels must be 0 or 1");
        pos += static_cast<std::size_t>(l);
    }
    if (pos == 0 || pos == labels.size()) {
        throw std::invalid_argument("roc_auc needs at least one positive and one negative label, got " +
                                    std::to_string(pos) + " positive of " + std::to_string(labels.size()));
    }
}

// Rank statistic without validation; `order` is scratch space.
double auc_unchecked(std::span<const int> labels, std::span<const double> scores, std::vector<std::size_t>& order) {
    const std::size_t n = labels.size();
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    double positives = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        // Ranks i+1 .. j+1 share their mean.
        const double midrank = 0.5 * static_cast<double>(i + j + 2);
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum += midrank;
                positives += 1.0;
            }
        }
        i = j + 1;
    }
    const double negatives = static_cast<double>(n) - positives;
    const double u = rank_sum - positives * (positives + 1.0) / 2.0;
    return u / (positives * negatives);
}

}  // namespace

double roc_auc(std::span<const int> labels, std::span<const double> scores) {
    check_inputs(labels, scores);
    std::vector<std::size_t> order;
    return auc_unchecked(labels, scores, order);
}

std::vector<RocPoint> roc_curve(std::span<const int> labels, std::span<const double> scores) {
    check_inputs(labels, scores);
    const std::size_t n = labels.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const double p = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    const double q = static_cast<double>(n) - p;
    std::vector<RocPoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < n) {
        const double threshold = scores[order[i]];
        while (i < n && scores[order[i]] == threshold) {
            (labels[order[i]] == 1 ? tp : fp) += 1.0;
            ++i;
        }
        out.push_back({fp / q, tp / p, threshold});
    }
    return out;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

BootstrapResult bootstrap_ci(std::span<const int> labels, std::span<const double> scores, std::size_t n,
                             std::uint64_t seed, double confidence) {
    check_inputs(labels, scores);
    if (n == 0) throw std::invalid_argument("bootstrap needs at least one resample");
    if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("confidence must be in (0,1)");
    const std::size_t size = labels.size();
    std::vector<double> aucs(n);
    std::vector<int> rl(size);
    std::vector<double> rs(size);
    std::vector<std::size_t> scratch;
    for (std::size_t r = 0; r < n; ++r) {
        Rng rng(derive_seed(seed, r));
        std::size_t pos;
        do {
            pos = 0;
            for (std::size_t i = 0; i < size; ++i) {
                const auto k = static_cast<std::size_t>(rng.below(size));
                rl[i] = labels[k];
                rs[i] = scores[k];
                pos += static_cast<std::size_t>(rl[i]);
            }
        } while (pos == 0 || pos == size);
        aucs[r] = auc_unchecked(rl, rs, scratch);
    }
    BootstrapResult out;
    out.n_resamples = n;
    out.confidence = confidence;
    out.mean_auc = std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(n);
    const double tail = (1.0 - confidence) / 2.0;
    out.ci_low = percentile(aucs, tail);
    out.ci_high = percentile(std::move(aucs), 1.0 - tail);
    return out;
}

double study_probability(std::span<const double> window_probs) {
    if (window_probs.empty()) throw std::invalid_argument("study_probability: study has no windows");
    return *std::max_element(window_probs.begin(), window_probs.end());
}

template <typename T>
std::vector<double> window_probabilities(const Model<T>& model, const Study& study, const BrainWindow& window,
                                         std::size_t batch_size) {
    const ArchConfig& a = model.arch();
    const auto windows = make_slice_windows(study, a.input_slices, window);
    const std::size_t plane = a.input_slices * a.height * a.width;
    std::vector<double> out;
    out.reserve(windows.size());
    for (std::size_t start = 0; start < windows.size(); start += batch_size) {
        const std::size_t m = std::min(batch_size, windows.size() - start);
        Tensor<T> x({m, a.input_slices, a.height, a.width});
        std::vector<double> vv(m);
        for (std::size_t i = 0; i < m; ++i) {
            const SliceWindow& w = windows[start + i];
            if (w.context.size() != plane) {
                throw ShapeError("study " + study.study_id + " geometry does not match the model input");
            }
            std::copy(w.context.begin(), w.context.end(), x.raw() + i * plane);
            vv[i] = w.voxel_volume_mm3;
        }
        const Predictions<T> p = forward(model, x, vv);
        for (T v : p.cls_prob) out.push_back(static_cast<double>(v));
    }
    return out;
}

template <typename T>
double study_probability(const Model<T>& model, const Study& study, const BrainWindow& window) {
    const auto probs = window_probabilities(model, study, window);
    return study_probability(probs);
}

std::string_view level_name(EvalLevel level) { return level == EvalLevel::slice ? "slice" : "study"; }

EvalLevel parse_level(std::string_view name) {
    if (name == "slice") return EvalLevel::slice;
    if (name == "study") return EvalLevel::study;
    throw std::invalid_argument("unknown evaluation level '" + std::string(name) + "' (expected slice or study)");
}

EvalReport make_report(std::string variant, EvalLevel level, std::vector<EvalItem> items, std::size_t n_bootstrap,
                       std::uint64_t seed, double confidence) {
    EvalReport r;
    r.variant = std::move(variant);
    r.level = level;
    r.items = std::move(items);
    r.seed = seed;
    std::vector<int> labels;
    std::vector<double> scores;
    for (const EvalItem& it : r.items) {
        labels.push_back(it.label);
        scores.push_back(it.score);
    }
    r.auc = roc_auc(labels, scores);
    r.ci = bootstrap_ci(labels, scores, n_bootstrap, seed, confidence);
    r.roc_points = roc_curve(labels, scores);
    return r;
}

template <typename T>
std::vector<EvalItem> score_studies(const Model<T>& model, std::span<const Study> studies, EvalLevel level,
                                    const BrainWindow& window) {
    std::vector<EvalItem> items;
    for (const Study& s : studies) {
        const auto probs = window_probabilities(model, s, window);
        if (level == EvalLevel::study) {
            items.push_back({s.study_id, s.study_label, study_probability(probs)});
        } else {
            for (std::size_t i = 0; i < probs.size(); ++i) {
                items.push_back({s.study_id + ":" + std::to_string(i), s.slice_labels[i], probs[i]});
            }
        }
    }
    return items;
}

std::vector<ComparisonRow> compare_variants(std::span<const EvalReport> reports) {
    if (reports.empty()) throw std::invalid_argument("compare_variants: no reports");
    auto key_set = [](const EvalReport& r) {
        std::vector<std::pair<std::string, int>> keys;
        for (const EvalItem& it : r.items) keys.emplace_back(it.id, it.label);
        std::sort(keys.begin(), keys.end());
        return keys;
    };
    const auto reference_keys = key_set(reports[0]);
    for (const EvalReport& r : reports) {
        if (r.level != reports[0].level || key_set(r) != reference_keys) {
            throw std::invalid_argument("compare_variants: report '" + r.variant +
                                        "' is not over the same item set as '" + reports[0].variant + "'");
        }
    }
    static const std::map<std::string, std::string> published{
        {"single_task", "0.9453"}, {"multi_task", "0.9411"}, {"task_dependent", "0.9658"}};
    auto rank = [](const std::string& v) {
        if (v == "single_task") return 0;
        if (v == "multi_task") return 1;
        if (v == "task_dependent") return 2;
        return 3;
    };
    std::vector<ComparisonRow> rows;
    for (const EvalReport& r : reports) {
        auto it = published.find(r.variant);
        rows.push_back({r.variant, r.auc, r.ci.ci_low, r.ci.ci_high, r.ci.mean_auc,
                        it == published.end() ? std::string("-") : it->second});
    }
    std::stable_sort(rows.begin(), rows.end(), [&](const ComparisonRow& a, const ComparisonRow& b) {
        return rank(a.variant) != rank(b.variant) ? rank(a.variant) < rank(b.variant) : a.variant < b.variant;
    });
    return rows;
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
    std::ostringstream out;
    out << "variant,auc,ci_low,ci_high,bootstrap_mean_auc,published_validation_auc\n";
    for (const ComparisonRow& r : rows) {
        out << r.variant << "," << format_double(r.auc) << "," << format_double(r.ci_low) << ","
            << format_double(r.ci_high) << "," << format_double(r.mean_auc) << "," << r.reference << "\n";
    }
    return out.str();
}

std::string comparison_table(std::span<const ComparisonRow> rows) {
    std::ostringstream out;
    out << std::left << std::setw(16) << "variant" << std::right << std::setw(8) << "AUC" << "  " << std::left
        << std::setw(20) << "95% CI" << std::right << std::setw(12) << "published" << "\n";
    out << std::fixed << std::setprecision(4);
    for (const ComparisonRow& r : rows) {
        std::ostringstream ci;
        ci << std::fixed << std::setprecision(4) << "[" << r.ci_low << ", " << r.ci_high << "]";
        out << std::left << std::setw(16) << r.variant << std::right << std::setw(8) << r.auc << "  " << std::left
            << std::setw(20) << ci.str() << std::right << std::setw(12) << r.reference << "\n";
    }
    return out.str();
}

std::string report_items_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "id,label,score\n";
    for (const EvalItem& it : report.items) out << it.id << "," << it.label << "," << format_double(it.score) << "\n";
    return out.str();
}

std::string report_summary_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "variant,level,n_items,n_positive,auc,bootstrap_mean_auc,ci_low,ci_high,n_bootstrap,seed,confidence\n";
    const auto positives = std::count_if(report.items.begin(), report.items.end(),
                                         [](const EvalItem& it) { return it.label == 1; });
    out << report.variant << "," << level_name(report.level) << "," << report.items.size() << "," << positives << ","
        << format_double(report.auc) << "," << format_double(report.ci.mean_auc) << ","
        << format_double(report.ci.ci_low) << "," << format_double(report.ci.ci_high) << ","
        << report.ci.n_resamples << "," << report.seed << "," << format_double(report.ci.confidence) << "\n";
    return out.str();
}

std::string roc_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "fpr,tpr,threshold\n";
    for (const RocPoint& p : report.roc_points) {
        out << format_double(p.fpr) << "," << format_double(p.tpr) << ","
            << (std::isinf(p.threshold) ? std::string("inf") : format_double(p.threshold)) << "\n";
    }
    return out.str();
}

EvalReport parse_report(const std::string& summary_csv, const std::string& items_csv) {
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::istringstream in(line);
        for (std::string cell; std::getline(in, cell, ',');) out.push_back(cell);
        if (!line.empty() && line.back() == ',') out.emplace_back();
        return out;
    };
    auto bad = [](const std::string& what) { return std::invalid_argument("malformed evaluation report: " + what); };
    std::istringstream summary(summary_csv);
    std::string header, row;
    std::getline(summary, header);
    if (header != "variant,level,n_items,n_positive,auc,bootstrap_mean_auc,ci_low,ci_high,n_bootstrap,seed,confidence" ||
        !std::getline(summary, row)) {
        throw bad("summary header");
    }
    const auto cells = split(row);
    if (cells.size() != 11) throw bad("summary row");
    auto num = [&](const std::string& text) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(text, &used);
        } catch (const std::logic_error&) {
            used = 0;
        }
        if (text.empty() || used != text.size()) throw bad("bad number '" + text + "'");
        return v;
    };
    auto count = [&](const std::string& text) {
        const double v = num(text);
        if (v < 0 || v != std::floor(v)) throw bad("bad count '" + text + "'");
        return static_cast<std::uint64_t>(v);
    };
    EvalReport r;
    r.variant = cells[0];
    r.level = parse_level(cells[1]);
    r.auc = num(cells[4]);
    r.ci.mean_auc = num(cells[5]);
    r.ci.ci_low = num(cells[6]);
    r.ci.ci_high = num(cells[7]);
    r.ci.n_resamples = count(cells[8]);
    const auto [ptr, ec] = std::from_chars(cells[9].data(), cells[9].data() + cells[9].size(), r.seed);
    if (ec != std::errc() || ptr != cells[9].data() + cells[9].size()) throw bad("bad seed '" + cells[9] + "'");
    r.ci.confidence = num(cells[10]);
    std::istringstream items(items_csv);
    std::string line;
    std::getline(items, line);
    if (line != "id,label,score") throw bad("items header");
    while (std::getline(items, line)) {
        if (line.empty()) continue;
        const auto c = split(line);
        if (c.size() != 3) throw bad("items row '" + line + "'");
        r.items.push_back({c[0], static_cast<int>(count(c[1])), num(c[2])});
    }
    if (r.items.size() != count(cells[2])) throw bad("item count does not match summary");
    std::vector<int> labels;
    std::vector<double> scores;
    for (const EvalItem& it : r.items) {
        labels.push_back(it.label);
        scores.push_back(it.score);
    }
    r.roc_points = roc_curve(labels, scores);
    return r;
}

template std::vector<double> window_probabilities<float>(const Model<float>&, const Study&, const BrainWindow&,
                                                         std::size_t);
template std::vector<double> window_probabilities<double>(const Model<double>&, const Study&, const BrainWindow&,
                                                          std::size_t);
template double study_probability<float>(const Model<float>&, const Study&, const BrainWindow&);
template double study_probability<double>(const Model<double>&, const Study&, const BrainWindow&);
template std::vector<EvalItem> score_studies<float>(const Model<float>&, std::span<const Study>, EvalLevel,
                                                    const BrainWindow&);
template std::vector<EvalItem> score_studies<double>(const Model<double>&, std::span<const Study>, EvalLevel,
                                                     const BrainWindow&);

}  // namespace bloodnet
