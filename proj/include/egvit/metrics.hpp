#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "egvit/errors.hpp"
#include "egvit/vit.hpp"

namespace egvit {

struct ClassMetrics {
    int support = 0;
    double recall = 0.0;
    double precision = 0.0;
    double f1 = 0.0;
    double auc = std::numeric_limits<double>::quiet_NaN();  // NaN when degenerate
};

struct Metrics {
    double acc = 0.0;
    double f1 = 0.0;   // macro over classes with support
    double auc = std::numeric_limits<double>::quiet_NaN();  // macro one-vs-rest; NaN = undefined
    std::vector<ClassMetrics> per_class;
    bool auc_defined() const { return !std::isnan(auc); }
};

namespace detail {

// Mann-Whitney rank statistic with midranks for ties.
inline double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t t = i; t < j; ++t) {
            if (positive[order[t]]) {
                rank_sum_pos += midrank;
                ++n_pos;
            }
        }
        i = j;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::numeric_limits<double>::quiet_NaN();
    return (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace detail

// acc: argmax match rate (ties -> lowest class index).
// f1: unweighted mean of per-class F1, classes without support excluded.
// auc: unweighted mean of one-vs-rest rank-statistic AUCs; classes with zero
// positives or zero negatives are excluded, and the macro value is NaN when
// every class is excluded.
inline Metrics compute_metrics(const Mat<double>& scores, const std::vector<int>& labels) {
    const int n = static_cast<int>(scores.rows());
    const int num_classes = static_cast<int>(scores.cols());
    if (n == 0 || static_cast<int>(labels.size()) != n)
        throw ShapeMismatch("compute_metrics: labels do not match score rows");
    for (int i = 0; i < n; ++i) {
        if (std::abs(scores.row(i).sum() - 1.0) > 1e-3)
            throw ShapeMismatch("compute_metrics: score rows must sum to 1");
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= num_classes)
            throw ShapeMismatch("compute_metrics: label out of range");
    }

    Metrics m;
    m.per_class.resize(static_cast<std::size_t>(num_classes));

    // confusion counts from argmax decisions
    std::vector<int> tp(static_cast<std::size_t>(num_classes), 0), fp(tp), fn(tp), support(tp);
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        int pred = 0;
        for (int c = 1; c < num_classes; ++c)
            if (scores(i, c) > scores(i, pred)) pred = c;  // strict: ties keep the lowest index
        const int lab = labels[static_cast<std::size_t>(i)];
        ++support[static_cast<std::size_t>(lab)];
        if (pred == lab) {
            ++correct;
            ++tp[static_cast<std::size_t>(lab)];
        } else {
            ++fp[static_cast<std::size_t>(pred)];
            ++fn[static_cast<std::size_t>(lab)];
        }
    }
    m.acc = static_cast<double>(correct) / n;

    double f1_sum = 0.0;
    int f1_classes = 0;
    double auc_sum = 0.0;
    int auc_classes = 0;
    for (int c = 0; c < num_classes; ++c) {
        auto& pc = m.per_class[static_cast<std::size_t>(c)];
        pc.support = support[static_cast<std::size_t>(c)];
        const double denom_p = tp[static_cast<std::size_t>(c)] + fp[static_cast<std::size_t>(c)];
        const double denom_r = tp[static_cast<std::size_t>(c)] + fn[static_cast<std::size_t>(c)];
        pc.precision = denom_p > 0 ? tp[static_cast<std::size_t>(c)] / denom_p : 0.0;
        pc.recall = denom_r > 0 ? tp[static_cast<std::size_t>(c)] / denom_r : 0.0;
        const double f1_denom = 2.0 * tp[static_cast<std::size_t>(c)] + fp[static_cast<std::size_t>(c)] + fn[static_cast<std::size_t>(c)];
        pc.f1 = f1_denom > 0 ? 2.0 * tp[static_cast<std::size_t>(c)] / f1_denom : 0.0;
        if (pc.support > 0) {
            f1_sum += pc.f1;
            ++f1_classes;
        }
        std::vector<double> s(static_cast<std::size_t>(n));
        std::vector<bool> pos(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            s[static_cast<std::size_t>(i)] = scores(i, c);
            pos[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == c;
        }
        pc.auc = detail::binary_auc(s, pos);
        if (!std::isnan(pc.auc)) {
            auc_sum += pc.auc;
            ++auc_classes;
        }
    }
    m.f1 = f1_classes > 0 ? f1_sum / f1_classes : 0.0;
    m.auc = auc_classes > 0 ? auc_sum / auc_classes : std::numeric_limits<double>::quiet_NaN();
    return m;
}

}  // namespace egvit
