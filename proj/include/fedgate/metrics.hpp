#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fedgate/errors.hpp"

namespace fedgate {

// Shortest round-trippable formatting for doubles in text artifacts.
inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct EvalReport {
    int64_t n = 0;
    double accuracy = 0.0;
    std::vector<std::pair<double, double>> roc_points; // (fpr, tpr)
    double auc = 0.0;
    double loss = 0.0;
};

inline void check_binary_labels(const std::vector<int>& labels) {
    for (int y : labels)
        if (y != 0 && y != 1)
            throw DataError("labels must be 0 or 1, got " + std::to_string(y));
}

// Fraction of samples where (score >= threshold) matches the label. A score
// exactly at the threshold predicts positive.
inline double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold = 0.5) {
    if (scores.empty()) throw DataError("accuracy of an empty score set");
    if (scores.size() != labels.size())
        throw DataError("accuracy: " + std::to_string(scores.size()) + " scores vs " +
                        std::to_string(labels.size()) + " labels");
    check_binary_labels(labels);
    int64_t correct = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        const int pred = scores[i] >= threshold ? 1 : 0;
        if (pred == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

// ROC curve from a descending threshold sweep over the unique scores; samples
// tied on score enter as one group, so ties contribute diagonal segments and
// the trapezoidal area matches pair counting with half credit for ties.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                      std::vector<std::pair<double, double>>* roc_points = nullptr) {
    if (scores.size() != labels.size())
        throw DataError("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                        std::to_string(labels.size()) + " labels");
    check_binary_labels(labels);
    int64_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y == 1 ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0)
        throw DataError("roc_auc undefined: only one class present (" + std::to_string(n_pos) +
                        " positive, " + std::to_string(n_neg) + " negative)");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    std::vector<std::pair<double, double>> points;
    points.emplace_back(0.0, 0.0);
    int64_t tp = 0, fp = 0;
    double auc = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        for (size_t k = i; k < j; ++k) (labels[order[k]] == 1 ? tp : fp)++;
        const double x = static_cast<double>(fp) / static_cast<double>(n_neg);
        const double y = static_cast<double>(tp) / static_cast<double>(n_pos);
        auc += (x - points.back().first) * (y + points.back().second) * 0.5;
        points.emplace_back(x, y);
        i = j;
    }
    if (roc_points) *roc_points = std::move(points);
    return auc;
}

inline EvalReport evaluate_scores(const std::vector<double>& scores,
                                  const std::vector<int>& labels, double loss) {
    EvalReport r;
    r.n = static_cast<int64_t>(scores.size());
    r.accuracy = accuracy(scores, labels);
    r.auc = roc_auc(scores, labels, &r.roc_points);
    r.loss = loss;
    return r;
}

inline std::string eval_report_text(const EvalReport& r) {
    std::string out;
    out += "n=" + std::to_string(r.n) + "\n";
    out += "accuracy=" + fmt_g17(r.accuracy) + "\n";
    out += "auc=" + fmt_g17(r.auc) + "\n";
    out += "loss=" + fmt_g17(r.loss) + "\n";
    return out;
}

inline std::string roc_csv(const std::vector<std::pair<double, double>>& points) {
    std::string out = "fpr,tpr\n";
    for (const auto& [x, y] : points) out += fmt_g17(x) + "," + fmt_g17(y) + "\n";
    return out;
}

} // namespace fedgate
