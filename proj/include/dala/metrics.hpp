#pragma once

// Classification metrics for imbalanced data and heatmap localization metrics.
//
// Rates whose denominator is zero are reported as std::nullopt ("undefined")
// rather than 0 so they never silently deflate or inflate aggregates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dala/cam.hpp"
#include "dala/error.hpp"

namespace dala {

/// K x K counts; cell (i, j) holds samples of true class i predicted as j.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t k, std::vector<std::string> names = {})
        : k_(k), counts_(k * k, 0), names_(std::move(names)) {
        if (names_.empty())
            for (std::size_t i = 0; i < k; ++i) names_.push_back("class" + std::to_string(i));
        if (names_.size() != k) throw InputError("confusion matrix: class name count does not match K");
    }

    /// Rows are true classes.
    static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows,
                                     std::vector<std::string> names = {}) {
        ConfusionMatrix cm(rows.size(), std::move(names));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows.size()) throw InputError("confusion matrix: rows must be square");
            for (std::size_t j = 0; j < rows.size(); ++j) cm.at(i, j) = rows[i][j];
        }
        return cm;
    }

    std::size_t classes() const { return k_; }
    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * k_ + pred]; }
    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
    const std::vector<std::string>& names() const { return names_; }

    std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }
    std::uint64_t support(std::size_t truth) const {
        std::uint64_t s = 0;
        for (std::size_t j = 0; j < k_; ++j) s += at(truth, j);
        return s;
    }
    std::uint64_t predicted(std::size_t pred) const {
        std::uint64_t s = 0;
        for (std::size_t i = 0; i < k_; ++i) s += at(i, pred);
        return s;
    }
    std::uint64_t trace() const {
        std::uint64_t s = 0;
        for (std::size_t i = 0; i < k_; ++i) s += at(i, i);
        return s;
    }

    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t k_ = 0;
    std::vector<std::uint64_t> counts_;
    std::vector<std::string> names_;
};

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> truths, std::size_t k,
                                 std::vector<std::string> names = {}) {
    if (preds.size() != truths.size())
        throw InputError("confusion: " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(truths.size()) + " labels");
    ConfusionMatrix cm(k, std::move(names));
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || truths[i] < 0 || static_cast<std::size_t>(preds[i]) >= k ||
            static_cast<std::size_t>(truths[i]) >= k)
            throw InputError("confusion: label outside [0," + std::to_string(k) + ") at index " + std::to_string(i));
        ++cm.at(static_cast<std::size_t>(truths[i]), static_cast<std::size_t>(preds[i]));
    }
    return cm;
}

inline std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

struct BinaryRates {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::optional<double> sensitivity, specificity, ppv, npv;
};

/// One-vs-rest reduction around `positive_class`.
inline BinaryRates binary_rates(const ConfusionMatrix& cm, std::size_t positive_class) {
    if (cm.classes() < 2) throw InputError("binary_rates: at least two classes required");
    if (positive_class >= cm.classes()) throw InputError("binary_rates: positive class out of range");
    BinaryRates r;
    r.tp = cm.at(positive_class, positive_class);
    r.fn = cm.support(positive_class) - r.tp;
    r.fp = cm.predicted(positive_class) - r.tp;
    r.tn = cm.total() - r.tp - r.fn - r.fp;
    r.sensitivity = ratio(r.tp, r.tp + r.fn);
    r.specificity = ratio(r.tn, r.tn + r.fp);
    r.ppv = ratio(r.tp, r.tp + r.fp);
    r.npv = ratio(r.tn, r.tn + r.fn);
    return r;
}

inline double accuracy(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw InputError("accuracy: empty confusion matrix");
    return static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
}

struct F1Scores {
    double macro = 0.0;
    double weighted = 0.0;
    std::vector<std::optional<double>> per_class;

    /// "macro/weighted" with three decimals, e.g. "0.970/0.985".
    std::string pair() const {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3f/%.3f", macro, weighted);
        return buf;
    }
};

/// Per-class F1 = 2TP / (2TP + FP + FN); undefined for a class that neither
/// occurs nor is predicted. Macro averages the defined classes, weighted uses
/// class support.
inline F1Scores f1(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw InputError("f1: empty confusion matrix");
    F1Scores out;
    double macro_sum = 0.0, weighted_sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        const auto tp = cm.at(c, c);
        const auto fn = cm.support(c) - tp;
        const auto fp = cm.predicted(c) - tp;
        const auto score = ratio(2 * tp, 2 * tp + fp + fn);
        out.per_class.push_back(score);
        if (score) {
            macro_sum += *score;
            weighted_sum += *score * static_cast<double>(cm.support(c));
            ++defined;
        }
    }
    out.macro = defined ? macro_sum / static_cast<double>(defined) : 0.0;
    out.weighted = weighted_sum / static_cast<double>(cm.total());
    return out;
}

/// Classes with no true samples; excluded from GMean.
inline std::vector<std::size_t> zero_support_classes(const ConfusionMatrix& cm) {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < cm.classes(); ++c)
        if (cm.support(c) == 0) out.push_back(c);
    return out;
}

/// Geometric mean of per-class recalls over classes with support.
inline double gmean(const ConfusionMatrix& cm) {
    if (cm.classes() < 2) throw InputError("gmean: at least two classes required");
    double log_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        const auto recall = ratio(cm.at(c, c), cm.support(c));
        if (!recall) continue;
        if (*recall == 0.0) return 0.0;
        log_sum += std::log(*recall);
        ++n;
    }
    if (n == 0) throw InputError("gmean: empty confusion matrix");
    if (n == 2) {
        double product = 1.0;
        for (std::size_t c = 0; c < cm.classes(); ++c)
            if (auto r = ratio(cm.at(c, c), cm.support(c))) product *= *r;
        return std::sqrt(product);
    }
    return std::exp(log_sum / static_cast<double>(n));
}

inline std::optional<double> iba_binary(const BinaryRates& r, double alpha) {
    if (!r.sensitivity || !r.specificity) return std::nullopt;
    const double sens = *r.sensitivity, spec = *r.specificity;
    return (1.0 + alpha * (sens - spec)) * (sens * spec);
}

/// Index of balanced accuracy. K = 2 uses class 1 as positive; K > 2 averages
/// the one-vs-rest values. Undefined when a needed rate is undefined.
inline std::optional<double> iba(const ConfusionMatrix& cm, double alpha = 0.1) {
    if (cm.classes() < 2) throw InputError("iba: at least two classes required");
    if (cm.classes() == 2) return iba_binary(binary_rates(cm, 1), alpha);
    double sum = 0.0;
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        auto v = iba_binary(binary_rates(cm, c), alpha);
        if (!v) return std::nullopt;
        sum += *v;
    }
    return sum / static_cast<double>(cm.classes());
}

struct ScoredPrediction {
    int label = 0;
    std::vector<double> scores;
};

/// Mann-Whitney AUC of `positive_class` vs rest; tied scores get half credit.
inline double auc_roc(std::span<const ScoredPrediction> preds, std::size_t positive_class) {
    struct Item {
        double score;
        bool positive;
    };
    std::vector<Item> items;
    items.reserve(preds.size());
    std::uint64_t n_pos = 0;
    for (const auto& p : preds) {
        if (positive_class >= p.scores.size()) throw InputError("auc_roc: positive class outside score vector");
        const double s = p.scores[positive_class];
        if (!std::isfinite(s)) throw InputError("auc_roc: non-finite score");
        const bool pos = p.label == static_cast<int>(positive_class);
        n_pos += pos;
        items.push_back({s, pos});
    }
    const std::uint64_t n_neg = items.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw InputError("auc_roc: need at least one positive and one negative sample");
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
    double rank_sum = 0.0;  // 1-based ranks, ties share their average rank
    for (std::size_t i = 0; i < items.size();) {
        std::size_t j = i;
        std::uint64_t pos_in_group = 0;
        while (j < items.size() && items[j].score == items[i].score) pos_in_group += items[j++].positive;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        rank_sum += avg_rank * static_cast<double>(pos_in_group);
        i = j;
    }
    const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Macro average of one-vs-rest AUC over classes that have both positives and negatives.
inline double auc_roc_macro(std::span<const ScoredPrediction> preds, std::size_t classes) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        const auto pos = std::count_if(preds.begin(), preds.end(), [&](const auto& p) { return p.label == static_cast<int>(c); });
        if (pos == 0 || pos == static_cast<std::ptrdiff_t>(preds.size())) continue;
        sum += auc_roc(preds, c);
        ++n;
    }
    if (n == 0) throw InputError("auc_roc: need at least one positive and one negative sample");
    return sum / static_cast<double>(n);
}

struct HeatmapScores {
    double iou = 0.0;
    double dice = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Overlap scores of a predicted mask against ground truth (nonzero = foreground).
inline HeatmapScores heatmap_metrics(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
    if (predicted.size() != truth.size()) throw InputError("heatmap_metrics: mask sizes differ");
    std::uint64_t inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool pi = predicted[i] != 0, gi = truth[i] != 0;
        p += pi;
        g += gi;
        inter += pi && gi;
    }
    if (g == 0) throw InputError("heatmap_metrics: ground-truth mask is empty");
    HeatmapScores s;
    s.iou = static_cast<double>(inter) / static_cast<double>(p + g - inter);
    s.dice = static_cast<double>(2 * inter) / static_cast<double>(p + g);
    s.recall = static_cast<double>(inter) / static_cast<double>(g);
    s.f1 = s.dice;
    return s;
}

struct BinarizeMode {
    enum class Kind { support, fixed } kind = Kind::support;
    double threshold = 0.5;

    static BinarizeMode support() { return {Kind::support, 0.0}; }
    static BinarizeMode fixed(double t = 0.5) { return {Kind::fixed, t}; }
};

/// support: strictly positive cells. fixed(t): cells above t after min-max normalisation.
inline std::vector<std::uint8_t> binarize_cam_for_eval(const CamMap& map, BinarizeMode mode) {
    if (mode.kind == BinarizeMode::Kind::support) return map.support();
    const auto norm = minmax_normalize(map.values());
    std::vector<std::uint8_t> out(norm.size());
    for (std::size_t i = 0; i < norm.size(); ++i) out[i] = norm[i] > mode.threshold ? 1 : 0;
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

/// Full classification report. `scored` may be empty, in which case AUC fields are null.
inline nlohmann::json classification_report(const ConfusionMatrix& cm, std::span<const ScoredPrediction> scored = {},
                                            double iba_alpha = 0.1) {
    using nlohmann::json;
    const auto f = f1(cm);
    json j;
    j["accuracy"] = accuracy(cm);
    j["f1_macro"] = f.macro;
    j["f1_weighted"] = f.weighted;
    j["f1_pair"] = f.pair();
    j["iba"] = optional_json(iba(cm, iba_alpha));
    j["iba_alpha"] = iba_alpha;
    j["gmean"] = gmean(cm);
    j["gmean_excluded_classes"] = zero_support_classes(cm);
    std::optional<double> auc;
    if (!scored.empty()) {
        try {
            auc = cm.classes() == 2 ? auc_roc(scored, 1) : auc_roc_macro(scored, cm.classes());
        } catch (const InputError&) {
            auc.reset();
        }
    }
    j["auc_roc"] = optional_json(auc);
    json per_class = json::array();
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        const auto r = binary_rates(cm, c);
        std::optional<double> class_auc;
        if (!scored.empty()) {
            try {
                class_auc = auc_roc(scored, c);
            } catch (const InputError&) {
            }
        }
        per_class.push_back({{"class", cm.names()[c]},
                             {"support", cm.support(c)},
                             {"sensitivity", optional_json(r.sensitivity)},
                             {"specificity", optional_json(r.specificity)},
                             {"ppv", optional_json(r.ppv)},
                             {"npv", optional_json(r.npv)},
                             {"f1", optional_json(f.per_class[c])},
                             {"auc_roc", optional_json(class_auc)}});
    }
    j["per_class"] = per_class;
    json rows = json::array();
    for (std::size_t i = 0; i < cm.classes(); ++i) {
        std::vector<std::uint64_t> row;
        for (std::size_t k = 0; k < cm.classes(); ++k) row.push_back(cm.at(i, k));
        rows.push_back(row);
    }
    j["confusion_matrix"] = rows;
    j["class_names"] = cm.names();
    j["samples"] = cm.total();
    return j;
}

/// Column order of the flat CSV row; stable across releases.
inline const std::vector<std::string>& report_csv_columns() {
    static const std::vector<std::string> cols{"accuracy", "f1_macro", "f1_weighted", "iba", "gmean", "auc_roc"};
    return cols;
}

inline std::string report_csv_header() {
    std::string s;
    for (const auto& c : report_csv_columns()) s += (s.empty() ? "" : ",") + c;
    return s + "\n";
}

inline std::string report_csv_row(const nlohmann::json& report) {
    std::string s;
    char buf[32];
    bool first = true;
    for (const auto& c : report_csv_columns()) {
        if (!first) s += ",";
        first = false;
        const auto& v = report.at(c);
        if (v.is_null()) continue;
        std::snprintf(buf, sizeof buf, "%.6f", v.get<double>());
        s += buf;
    }
    return s + "\n";
}

}  // namespace dala
