#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "egvit/metrics.hpp"
#include "egvit/rng.hpp"

using namespace egvit;

namespace {

// Brute-force oracle: accuracy by direct loop, F1 from explicit confusion
// counts, AUC by pairwise positive/negative comparison (ties count 1/2).
struct OracleResult {
    double acc = 0.0, f1 = 0.0;
    double auc = std::numeric_limits<double>::quiet_NaN();
};

OracleResult brute_force_metrics(const Mat<double>& scores, const std::vector<int>& labels) {
    const int n = static_cast<int>(scores.rows());
    const int classes = static_cast<int>(scores.cols());
    OracleResult out;

    int correct = 0;
    std::vector<int> preds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (scores(i, c) > scores(i, best)) best = c;
        preds[static_cast<std::size_t>(i)] = best;
        if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    out.acc = static_cast<double>(correct) / n;

    double f1_sum = 0.0;
    int f1_count = 0;
    for (int c = 0; c < classes; ++c) {
        int tp = 0, fp = 0, fn = 0, support = 0;
        for (int i = 0; i < n; ++i) {
            const bool is_c = labels[static_cast<std::size_t>(i)] == c;
            const bool pred_c = preds[static_cast<std::size_t>(i)] == c;
            support += is_c;
            tp += is_c && pred_c;
            fp += !is_c && pred_c;
            fn += is_c && !pred_c;
        }
        if (support == 0) continue;
        const double denom = 2.0 * tp + fp + fn;
        f1_sum += denom > 0 ? 2.0 * tp / denom : 0.0;
        ++f1_count;
    }
    out.f1 = f1_count ? f1_sum / f1_count : 0.0;

    double auc_sum = 0.0;
    int auc_count = 0;
    for (int c = 0; c < classes; ++c) {
        double wins = 0.0;
        long pairs = 0;
        for (int i = 0; i < n; ++i) {
            if (labels[static_cast<std::size_t>(i)] != c) continue;
            for (int j = 0; j < n; ++j) {
                if (labels[static_cast<std::size_t>(j)] == c) continue;
                ++pairs;
                if (scores(i, c) > scores(j, c))
                    wins += 1.0;
                else if (scores(i, c) == scores(j, c))
                    wins += 0.5;
            }
        }
        if (pairs == 0) continue;
        auc_sum += wins / static_cast<double>(pairs);
        ++auc_count;
    }
    if (auc_count) out.auc = auc_sum / auc_count;
    return out;
}

Mat<double> random_scores(Rng& rng, int n, int classes, bool quantize) {
    Mat<double> s(n, classes);
    for (int i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int c = 0; c < classes; ++c) {
            double v = quantize ? (1.0 + static_cast<double>(rng.below(4))) : rng.uniform(0.05, 1.0);
            s(i, c) = v;
            sum += v;
        }
        for (int c = 0; c < classes; ++c) s(i, c) /= sum;
    }
    return s;
}

}  // namespace

TEST(ComputeMetrics, PerfectOneHotScores) {
    Mat<double> s(4, 3);
    s.setZero();
    std::vector<int> labels = {0, 1, 2, 1};
    for (int i = 0; i < 4; ++i) s(i, labels[static_cast<std::size_t>(i)]) = 1.0;
    Metrics m = compute_metrics(s, labels);
    EXPECT_DOUBLE_EQ(m.acc, 1.0);
    EXPECT_DOUBLE_EQ(m.f1, 1.0);
    ASSERT_TRUE(m.auc_defined());
    EXPECT_DOUBLE_EQ(m.auc, 1.0);
}

TEST(ComputeMetrics, UniformScoresGiveHalfAuc) {
    Mat<double> s(8, 2);
    s.setConstant(0.5);
    std::vector<int> labels = {0, 1, 0, 1, 0, 1, 0, 1};
    Metrics m = compute_metrics(s, labels);
    ASSERT_TRUE(m.auc_defined());
    EXPECT_DOUBLE_EQ(m.auc, 0.5);       // all ties contribute exactly 1/2
    EXPECT_DOUBLE_EQ(m.acc, 0.5);       // argmax ties resolve to class 0
}

// Enumerated pairs: every positive score beats every negative score.
TEST(ComputeMetrics, SeparableTwoClassCase) {
    Mat<double> s(4, 2);
    s << 0.1, 0.9, 0.2, 0.8, 0.7, 0.3, 0.6, 0.4;
    std::vector<int> labels = {1, 1, 0, 0};
    Metrics m = compute_metrics(s, labels);
    EXPECT_DOUBLE_EQ(m.acc, 1.0);
    ASSERT_TRUE(m.auc_defined());
    EXPECT_DOUBLE_EQ(m.auc, 1.0);
}

TEST(ComputeMetrics, SingleClassSplitHasUndefinedAuc) {
    Mat<double> s(3, 2);
    s << 0.9, 0.1, 0.8, 0.2, 0.4, 0.6;
    std::vector<int> labels = {0, 0, 0};
    Metrics m = compute_metrics(s, labels);
    EXPECT_FALSE(m.auc_defined());
    EXPECT_TRUE(std::isnan(m.per_class[0].auc));
    EXPECT_TRUE(std::isnan(m.per_class[1].auc));
}

TEST(ComputeMetrics, AgreesWithBruteForceOracle) {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const int classes = 2 + static_cast<int>(rng.below(3));
        const int n = 4 + static_cast<int>(rng.below(17));
        const bool quantize = rng.bernoulli(0.5);  // quantized scores force ties
        Mat<double> s = random_scores(rng, n, classes, quantize);
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));

        Metrics m = compute_metrics(s, labels);
        OracleResult oracle = brute_force_metrics(s, labels);
        EXPECT_NEAR(m.acc, oracle.acc, 1e-12);
        EXPECT_NEAR(m.f1, oracle.f1, 1e-12);
        if (std::isnan(oracle.auc)) {
            EXPECT_FALSE(m.auc_defined());
        } else {
            ASSERT_TRUE(m.auc_defined());
            EXPECT_NEAR(m.auc, oracle.auc, 1e-12);
        }
    }
}

// acc must equal the support-weighted mean of per-class recalls
TEST(ComputeMetrics, AccEqualsWeightedRecall) {
    Rng rng(91);
    Mat<double> s = random_scores(rng, 20, 3, false);
    std::vector<int> labels(20);
    for (auto& l : labels) l = static_cast<int>(rng.below(3));
    Metrics m = compute_metrics(s, labels);
    double weighted = 0.0;
    for (const auto& pc : m.per_class) weighted += pc.recall * pc.support;
    EXPECT_NEAR(m.acc, weighted / 20.0, 1e-12);
}

TEST(ComputeMetrics, RejectsUnnormalizedRows) {
    Mat<double> s(2, 2);
    s << 0.9, 0.9, 0.5, 0.5;
    std::vector<int> labels = {0, 1};
    EXPECT_THROW(compute_metrics(s, labels), ShapeMismatch);
}
