#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "egvit/gaze.hpp"
#include "egvit/rng.hpp"

using namespace egvit;

namespace {

GazeTrace constant_trace(double x, double y, int n, double total_ms) {
    GazeTrace t;
    for (int i = 0; i < n; ++i)
        t.samples.push_back({total_ms * i / (n - 1), x, y, true});
    return t;
}

// Synthetic trace with planted clusters, separation far above the dispersion
// threshold and in-cluster scatter far below it.
struct Planted {
    GazeTrace trace;
    std::vector<std::pair<double, double>> centers;
};

Planted planted_trace(Rng& rng, int n_clusters, const FixationConfig& cfg) {
    Planted p;
    double t = 0.0;
    for (int c = 0; c < n_clusters; ++c) {
        const double cx = 100.0 + 6.0 * cfg.dispersion_px * c;
        const double cy = 80.0 + (c % 2 ? 5.0 * cfg.dispersion_px : 0.0);
        p.centers.emplace_back(cx, cy);
        const int n = 20 + static_cast<int>(rng.below(20));
        for (int i = 0; i < n; ++i) {
            p.trace.samples.push_back({t, cx + rng.uniform(-0.1, 0.1) * cfg.dispersion_px,
                                       cy + rng.uniform(-0.1, 0.1) * cfg.dispersion_px, true});
            t += 2.5 * cfg.min_duration_ms / n;
        }
        if (c + 1 < n_clusters) {
            // fast saccade: two transit samples
            for (int i = 1; i <= 2; ++i) {
                const double a = i / 3.0;
                p.trace.samples.push_back({t, cx + a * 6.0 * cfg.dispersion_px, cy, true});
                t += 4.0;
            }
        }
    }
    return p;
}

}  // namespace

TEST(DetectFixations, ConstantTraceSingleFixation) {
    GazeTrace t = constant_trace(120, 80, 50, 500.0);
    auto fix = detect_fixations(t, {});
    ASSERT_EQ(fix.size(), 1u);
    EXPECT_DOUBLE_EQ(fix[0].cx, 120.0);
    EXPECT_DOUBLE_EQ(fix[0].cy, 80.0);
    EXPECT_DOUBLE_EQ(fix[0].duration_ms(), 500.0);
}

// Hand-simulated I-DT on a two-cluster trace: 400 ms within +-1 px of
// (100,100), a 3-sample jump, 400 ms within +-1 px of (300,300). Every
// min-duration window containing a jump sample exceeds dispersion 20, so the
// detector must return exactly the two planted fixations.
TEST(DetectFixations, TwoClusterTrace) {
    GazeTrace t;
    double time = 0.0;
    const double offs[3] = {-1.0, 0.0, 1.0};
    for (int i = 0; i <= 40; ++i) {
        t.samples.push_back({time, 100.0 + offs[i % 3], 100.0 + offs[(i + 1) % 3], true});
        time += 10.0;
    }
    t.samples.push_back({time, 150, 150, true});
    time += 10.0;
    t.samples.push_back({time, 200, 200, true});
    time += 10.0;
    t.samples.push_back({time, 250, 250, true});
    time += 10.0;
    for (int i = 0; i <= 40; ++i) {
        t.samples.push_back({time, 300.0 + offs[i % 3], 300.0 + offs[(i + 1) % 3], true});
        time += 10.0;
    }
    FixationConfig cfg;
    cfg.dispersion_px = 20.0;
    cfg.min_duration_ms = 100.0;
    auto fix = detect_fixations(t, cfg);
    ASSERT_EQ(fix.size(), 2u);
    EXPECT_NEAR(fix[0].cx, 100.0, 2.0);
    EXPECT_NEAR(fix[0].cy, 100.0, 2.0);
    EXPECT_NEAR(fix[1].cx, 300.0, 2.0);
    EXPECT_NEAR(fix[1].cy, 300.0, 2.0);
    EXPECT_LT(fix[0].end_ms, fix[1].start_ms);
}

TEST(DetectFixations, NoValidSamplesThrows) {
    GazeTrace t;
    for (int i = 0; i < 10; ++i) t.samples.push_back({i * 10.0, 1.0 * i, 2.0 * i, false});
    EXPECT_THROW(detect_fixations(t, {}), EmptyTrace);
}

TEST(DetectFixations, AllSaccadesThrows) {
    GazeTrace t;
    for (int i = 0; i < 50; ++i) t.samples.push_back({i * 10.0, 50.0 * i, 40.0 * i, true});
    EXPECT_THROW(detect_fixations(t, {}), AllSaccades);
}

TEST(DetectFixations, WindowsRespectBoundsAndOrder) {
    Rng rng(7);
    FixationConfig cfg;
    for (int trial = 0; trial < 30; ++trial) {
        const int n_clusters = 1 + static_cast<int>(rng.below(4));
        Planted p = planted_trace(rng, n_clusters, cfg);
        auto fix = detect_fixations(p.trace, cfg);
        ASSERT_EQ(fix.size(), static_cast<std::size_t>(n_clusters));
        for (std::size_t i = 0; i < fix.size(); ++i) {
            EXPECT_GE(fix[i].duration_ms(), cfg.min_duration_ms);
            EXPECT_NEAR(fix[i].cx, p.centers[i].first, 2.0);
            EXPECT_NEAR(fix[i].cy, p.centers[i].second, 2.0);
            if (i > 0) EXPECT_GE(fix[i].start_ms, fix[i - 1].end_ms);
        }
    }
}

TEST(RenderHeatmap, SingleFixationPeak) {
    std::vector<Fixation> fix{{112, 112, 0, 300}};
    Heatmap hm = render_heatmap(fix, 224, 224, 25.0);
    EXPECT_DOUBLE_EQ(hm.at(112, 112), 1.0);
    const auto it = std::max_element(hm.values.begin(), hm.values.end());
    const auto idx = static_cast<int>(it - hm.values.begin());
    EXPECT_EQ(idx % 224, 112);
    EXPECT_EQ(idx / 224, 112);
}

// Closed-form check: at separation 160*sqrt(2) px with sigma 10 the cross
// terms are below 1e-30, so both centers normalize to exactly 1.
TEST(RenderHeatmap, TwoFarPeaksBothReachOne) {
    std::vector<Fixation> fix{{30, 30, 0, 100}, {190, 190, 100, 200}};
    Heatmap hm = render_heatmap(fix, 224, 224, 10.0, /*duration_weighted=*/false);
    EXPECT_NEAR(hm.at(30, 30), 1.0, 1e-12);
    EXPECT_NEAR(hm.at(190, 190), 1.0, 1e-12);
    for (double v : hm.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(RenderHeatmap, EmptyFixationsThrows) {
    EXPECT_THROW(render_heatmap({}, 224, 224, 25.0), NoFixations);
}

TEST(RenderHeatmap, PermutationInvariance) {
    Rng rng(11);
    std::vector<Fixation> fix;
    for (int i = 0; i < 8; ++i)
        fix.push_back({rng.uniform(5, 90), rng.uniform(5, 90), 100.0 * i, 100.0 * i + rng.uniform(80, 300)});
    Heatmap a = render_heatmap(fix, 96, 96, 12.0);
    std::reverse(fix.begin(), fix.end());
    std::swap(fix[1], fix[4]);
    Heatmap b = render_heatmap(fix, 96, 96, 12.0);
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
    EXPECT_DOUBLE_EQ(*std::max_element(a.values.begin(), a.values.end()), 1.0);
}

TEST(DownsampleHeatmap, ConstantMapStaysConstant) {
    Heatmap hm(224, 224, 1.0);
    GridHeatmap g = downsample_heatmap(hm, 14, 14);
    ASSERT_EQ(g.values.size(), 196u);
    for (double v : g.values) EXPECT_DOUBLE_EQ(v, 1.0);
}

// 224/14 divides evenly, so each cell is the plain mean of its 16x16 block.
TEST(DownsampleHeatmap, MatchesBlockMeanOracle) {
    Rng rng(3);
    Heatmap hm(224, 224);
    for (double& v : hm.values) v = rng.uniform();
    GridHeatmap g = downsample_heatmap(hm, 14, 14);

    std::vector<double> oracle(196, 0.0);
    double mx = 0.0;
    for (int gy = 0; gy < 14; ++gy)
        for (int gx = 0; gx < 14; ++gx) {
            double acc = 0.0;
            for (int y = gy * 16; y < (gy + 1) * 16; ++y)
                for (int x = gx * 16; x < (gx + 1) * 16; ++x) acc += hm.at(x, y);
            oracle[gy * 14 + gx] = acc / 256.0;
            mx = std::max(mx, oracle[gy * 14 + gx]);
        }
    for (int i = 0; i < 196; ++i) EXPECT_NEAR(g.values[i], oracle[i] / mx, 1e-9);
}

// 4x4 with one hot pixel at (0,0) down to 2x2: raw cell means are
// [0.25, 0, 0, 0]; renormalization rescales to [1, 0, 0, 0].
TEST(DownsampleHeatmap, HotCornerFrozenValues) {
    Heatmap hm(4, 4, 0.0);
    hm.at(0, 0) = 1.0;
    GridHeatmap g = downsample_heatmap(hm, 2, 2);
    EXPECT_DOUBLE_EQ(g.values[0], 1.0);
    EXPECT_DOUBLE_EQ(g.values[1], 0.0);
    EXPECT_DOUBLE_EQ(g.values[2], 0.0);
    EXPECT_DOUBLE_EQ(g.values[3], 0.0);
}

TEST(DownsampleHeatmap, CommutesWithScaling) {
    Rng rng(5);
    Heatmap hm(50, 70);
    for (double& v : hm.values) v = rng.uniform();
    Heatmap hm3 = hm;
    for (double& v : hm3.values) v *= 3.0;
    GridHeatmap a = downsample_heatmap(hm, 7, 9);
    GridHeatmap b = downsample_heatmap(hm3, 7, 9);
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
}

TEST(DownsampleHeatmap, ZeroDimsThrows) {
    Heatmap hm(4, 4, 1.0);
    EXPECT_THROW(downsample_heatmap(hm, 0, 2), ZeroDims);
}

namespace {

// Independent top-k construction: everything above the threshold value is
// selected; at the threshold, ascending row-major indices fill the remainder.
std::vector<int> topk_oracle(const GridHeatmap& g, int k) {
    std::vector<double> sorted = g.values;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    const double thresh = sorted[static_cast<std::size_t>(k - 1)];
    std::vector<int> sel;
    for (int i = 0; i < static_cast<int>(g.values.size()); ++i)
        if (g.values[static_cast<std::size_t>(i)] > thresh) sel.push_back(i);
    for (int i = 0; i < static_cast<int>(g.values.size()) && static_cast<int>(sel.size()) < k; ++i)
        if (g.values[static_cast<std::size_t>(i)] == thresh) sel.push_back(i);
    std::sort(sel.begin(), sel.end());
    return sel;
}

}  // namespace

TEST(SeparatedMask, DefaultKOnDefaultGrid) {
    Rng rng(9);
    GridHeatmap g(14, 14);
    for (double& v : g.values) v = rng.uniform();
    PatchMask m = separated_mask(g, 49);
    EXPECT_EQ(m.ones(), 49);
}

TEST(SeparatedMask, SupportMatchesPositives) {
    GridHeatmap g(4, 4, 0.0);
    g.values[2] = 0.5;
    g.values[7] = 0.9;
    g.values[11] = 0.1;
    PatchMask m = separated_mask(g, 3);
    EXPECT_EQ(m.bits[2], 1);
    EXPECT_EQ(m.bits[7], 1);
    EXPECT_EQ(m.bits[11], 1);
    EXPECT_EQ(m.ones(), 3);
}

TEST(SeparatedMask, UniformGridTieBreak) {
    GridHeatmap g(14, 14, 0.7);
    PatchMask m = separated_mask(g, 49);
    for (int i = 0; i < 196; ++i) EXPECT_EQ(m.bits[static_cast<std::size_t>(i)], i < 49 ? 1 : 0);
}

TEST(SeparatedMask, AgreesWithFullSortOracle) {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        GridHeatmap g(14, 14);
        // coarse quantization forces plenty of ties
        for (double& v : g.values) v = static_cast<double>(rng.below(8)) / 7.0;
        const int k = 1 + static_cast<int>(rng.below(196));
        PatchMask m = separated_mask(g, k);
        ASSERT_EQ(m.ones(), k);
        auto oracle = topk_oracle(g, k);
        double min_sel = 2.0, max_unsel = -1.0;
        for (int i = 0; i < 196; ++i) {
            if (m.bits[static_cast<std::size_t>(i)])
                min_sel = std::min(min_sel, g.values[static_cast<std::size_t>(i)]);
            else
                max_unsel = std::max(max_unsel, g.values[static_cast<std::size_t>(i)]);
            EXPECT_EQ(m.bits[static_cast<std::size_t>(i)] == 1,
                      std::binary_search(oracle.begin(), oracle.end(), i));
        }
        if (k < 196) EXPECT_GE(min_sel, max_unsel);
    }
}

TEST(SeparatedMask, BadKThrows) {
    GridHeatmap g(14, 14, 0.5);
    EXPECT_THROW(separated_mask(g, 0), BadK);
    EXPECT_THROW(separated_mask(g, 197), BadK);
}

TEST(GatheredMask, CenteredWindow) {
    GridHeatmap g(14, 14, 0.0);
    g.at(6, 6) = 1.0;
    PatchMask m = gathered_mask(g, 7, 7);
    EXPECT_EQ(m.ones(), 49);
    for (int r = 0; r < 14; ++r)
        for (int c = 0; c < 14; ++c)
            EXPECT_EQ(m.bits[static_cast<std::size_t>(r) * 14 + c] == 1,
                      r >= 3 && r <= 9 && c >= 3 && c <= 9);
}

TEST(GatheredMask, CornerClamped) {
    GridHeatmap g(14, 14, 0.0);
    g.at(0, 0) = 1.0;
    PatchMask m = gathered_mask(g, 7, 7);
    EXPECT_EQ(m.ones(), 49);
    for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 7; ++c) EXPECT_EQ(m.bits[static_cast<std::size_t>(r) * 14 + c], 1);
}

TEST(GatheredMask, SingleCellWindow) {
    GridHeatmap g(14, 14, 0.0);
    g.at(9, 5) = 1.0;  // column 9, row 5
    PatchMask m = gathered_mask(g, 1, 1);
    EXPECT_EQ(m.ones(), 1);
    EXPECT_EQ(m.bits[5 * 14 + 9], 1);
}

TEST(GatheredMask, AlwaysContiguousAndContainsArgmax) {
    Rng rng(33);
    for (int trial = 0; trial < 300; ++trial) {
        GridHeatmap g(14, 14);
        for (double& v : g.values) v = rng.uniform();
        const int ww = 1 + static_cast<int>(rng.below(14));
        const int wh = 1 + static_cast<int>(rng.below(14));
        PatchMask m = gathered_mask(g, ww, wh);
        ASSERT_EQ(m.ones(), ww * wh);
        int rmin = 14, rmax = -1, cmin = 14, cmax = -1;
        for (int r = 0; r < 14; ++r)
            for (int c = 0; c < 14; ++c)
                if (m.bits[static_cast<std::size_t>(r) * 14 + c]) {
                    rmin = std::min(rmin, r);
                    rmax = std::max(rmax, r);
                    cmin = std::min(cmin, c);
                    cmax = std::max(cmax, c);
                }
        EXPECT_EQ(rmax - rmin + 1, wh);
        EXPECT_EQ(cmax - cmin + 1, ww);
        const int am = grid_argmax(g);
        const int ar = am / 14, ac = am % 14;
        EXPECT_TRUE(ar >= rmin && ar <= rmax && ac >= cmin && ac <= cmax);
        // contiguity: the bounding box is exactly the support
        for (int r = rmin; r <= rmax; ++r)
            for (int c = cmin; c <= cmax; ++c) EXPECT_EQ(m.bits[static_cast<std::size_t>(r) * 14 + c], 1);
    }
}

TEST(GatheredMask, BadWindowThrows) {
    GridHeatmap g(14, 14, 0.5);
    EXPECT_THROW(gathered_mask(g, 15, 7), BadWindow);
    EXPECT_THROW(gathered_mask(g, 0, 7), BadWindow);
}

TEST(CropAndResize, IdentityCrop) {
    Rng rng(13);
    Image img(32, 32, 1);
    for (float& v : img.data) v = static_cast<float>(rng.uniform());
    Heatmap hm(32, 32);
    for (double& v : hm.values) v = rng.uniform();
    const double mx = *std::max_element(hm.values.begin(), hm.values.end());
    for (double& v : hm.values) v /= mx;

    auto [img_out, hm_out] = crop_and_resize(img, hm, {0, 0, 32, 32}, 32);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_EQ(img.data[i], img_out.data[i]);
    for (std::size_t i = 0; i < hm.values.size(); ++i) EXPECT_NEAR(hm.values[i], hm_out.values[i], 1e-6);
}

TEST(CropAndResize, RoiResizedToTarget) {
    Image img(1024, 1024, 1, 0.5f);
    Heatmap hm(1024, 1024, 0.25);
    hm.at(500, 500) = 1.0;
    auto [img_out, hm_out] = crop_and_resize(img, hm, {0, 0, 1024, 1024}, 224);
    EXPECT_EQ(img_out.width, 224);
    EXPECT_EQ(img_out.height, 224);
    EXPECT_EQ(hm_out.width, 224);
    const double peak = *std::max_element(hm_out.values.begin(), hm_out.values.end());
    EXPECT_DOUBLE_EQ(peak, 1.0);
}

TEST(CropAndResize, OutOfBoundsThrows) {
    Image img(64, 64, 1, 0.f);
    Heatmap hm(64, 64, 0.0);
    EXPECT_THROW(crop_and_resize(img, hm, {32, 0, 40, 10}, 16), RoiOutOfBounds);
}
