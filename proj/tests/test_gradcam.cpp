#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "egvit/gradcam.hpp"
#include "egvit/rng.hpp"

using namespace egvit;

namespace {

ModelConfig cam_config() {
    ModelConfig c;
    c.image_size = 16;
    c.patch_size = 4;  // 4x4 grid
    c.channels = 1;
    c.hidden_dim = 12;
    c.depth = 2;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.num_classes = 3;
    c.reinject_enabled = true;
    return c;
}

Image random_image(int size, std::uint64_t seed) {
    Image img(size, size, 1);
    Rng rng(seed);
    for (float& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

PatchMask first_k_mask(int n, int k) {
    PatchMask m;
    m.bits.assign(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < k; ++i) m.bits[static_cast<std::size_t>(i)] = 1;
    return m;
}

}  // namespace

TEST(GradCam, DefaultConfigGridIsFourteen) {
    ModelConfig cfg;  // ViT-S geometry, shallow depth to stay fast
    cfg.depth = 1;
    cfg.hidden_dim = 24;
    cfg.heads = 2;
    cfg.num_classes = 2;
    ModelParams<float> params = init_params<float>(cfg, 3);
    CamMap cam = grad_cam(params, cfg, random_image(224, 4), nullptr);
    EXPECT_EQ(cam.gw, 14);
    EXPECT_EQ(cam.gh, 14);
    EXPECT_EQ(cam.values.size(), 196u);
}

TEST(GradCam, NormalizedMaxIsOne) {
    ModelConfig cfg = cam_config();
    ModelParams<float> params = init_params<float>(cfg, 5);
    PatchMask m = first_k_mask(16, 6);
    CamMap cam = grad_cam(params, cfg, random_image(16, 6), &m);
    ASSERT_FALSE(cam.degenerate);
    double mx = 0.0;
    for (double v : cam.values) {
        EXPECT_GE(v, 0.0);
        mx = std::max(mx, v);
    }
    EXPECT_DOUBLE_EQ(mx, 1.0);
}

// Finite-difference oracle, double precision: the tapped activations A are
// perturbed entry-wise and the tail of the pipeline (final encoder layer,
// final LN, head) is re-run through the public single-sample ops. cam must
// equal ReLU(sum_d w_d A_d) with w the FD channel means, after normalization.
TEST(GradCam, MatchesFiniteDifferenceOracle) {
    ModelConfig cfg = cam_config();
    ModelParams<double> params = init_params<double>(cfg, 7);
    Image img = random_image(16, 8);
    PatchMask m = first_k_mask(16, 5);
    const int target = 1;

    CamMap cam = grad_cam<double>(params, cfg, img, &m, target);

    // tapped state: input to the final encoder layer
    ForwardTrace<double> trace;
    forward(img, &m, params, cfg, &trace);
    Mat<double> a0 = trace.layers.back().x;
    const int rows = static_cast<int>(a0.rows());
    const int d = cfg.hidden_dim;

    auto logit_from = [&](const Mat<double>& a) {
        TokenSequence<double> z;
        z.tokens = a;
        z.kept.resize(static_cast<std::size_t>(rows - 1));
        for (int i = 0; i + 1 < rows; ++i) z.kept[static_cast<std::size_t>(i)] = i;
        TokenSequence<double> out = encoder_layer_forward(z, params.layers.back(), cfg.heads);
        Vec<double> mu, inv;
        Mat<double> cls = out.tokens.row(0);
        Mat<double> yc = nn::layer_norm(cls, params.lnf_gamma, params.lnf_beta, mu, inv);
        Mat<double> logits = yc * params.head_w;
        logits.rowwise() += params.head_b.row(0);
        return logits(0, target);
    };

    const double h = 1e-5;
    Vec<double> w = Vec<double>::Zero(d);
    Mat<double> da(rows, d);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < d; ++c) {
            Mat<double> ap = a0;
            ap(r, c) += h;
            Mat<double> am = a0;
            am(r, c) -= h;
            da(r, c) = (logit_from(ap) - logit_from(am)) / (2.0 * h);
        }
    }
    for (int r = 1; r < rows; ++r) w += da.row(r).transpose();
    w /= static_cast<double>(rows - 1);

    std::vector<double> expected(16, 0.0);
    double mx = 0.0;
    for (int r = 1; r < rows; ++r) {
        const double raw = std::max(0.0, a0.row(r).dot(w.transpose().row(0)));
        expected[static_cast<std::size_t>(r - 1)] = raw;
        mx = std::max(mx, raw);
    }
    ASSERT_GT(mx, 0.0);
    for (auto& v : expected) v /= mx;

    for (int i = 0; i < 16; ++i) EXPECT_NEAR(cam.values[static_cast<std::size_t>(i)], expected[static_cast<std::size_t>(i)], 1e-5);
}

// cam depends only on A and d(logit[target])/dA: editing the head rows of
// non-target classes must leave the map bit-identical.
TEST(GradCam, InvariantToNonTargetHeadRows) {
    ModelConfig cfg = cam_config();
    ModelParams<float> params = init_params<float>(cfg, 9);
    Image img = random_image(16, 10);
    PatchMask m = first_k_mask(16, 6);
    CamMap a = grad_cam(params, cfg, img, &m, /*target_class=*/2);

    ModelParams<float> tweaked = params;
    tweaked.head_w.col(0).array() += 0.37f;
    tweaked.head_w.col(1).array() -= 1.21f;
    tweaked.head_b(0, 0) += 5.0f;
    CamMap b = grad_cam(tweaked, cfg, img, &m, /*target_class=*/2);

    ASSERT_EQ(a.values.size(), b.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_EQ(a.values[i], b.values[i]);
}

TEST(GradCam, ZeroHeadGivesDegenerateFlag) {
    ModelConfig cfg = cam_config();
    ModelParams<float> params = init_params<float>(cfg, 11);
    params.head_w.setZero();
    params.head_b.setZero();
    CamMap cam = grad_cam(params, cfg, random_image(16, 12), nullptr, 0);
    EXPECT_TRUE(cam.degenerate);
    for (double v : cam.values) EXPECT_EQ(v, 0.0);
}

TEST(ShortcutScore, FullRoiIsOne) {
    CamMap cam;
    cam.gw = cam.gh = 4;
    cam.values = {0.1, 0.2, 0.0, 0.4, 0.5, 1.0, 0.3, 0.2, 0.0, 0.0, 0.7, 0.1, 0.2, 0.3, 0.1, 0.0};
    PatchMask roi;
    roi.bits.assign(16, 1);
    EXPECT_DOUBLE_EQ(shortcut_score(cam, roi), 1.0);
}

TEST(ShortcutScore, SupportContainment) {
    CamMap cam;
    cam.gw = cam.gh = 3;
    cam.values = {0, 0, 0, 0, 0.8, 0.4, 0, 0.2, 0};
    PatchMask inside;   // covers exactly the cam support
    inside.bits = {0, 0, 0, 0, 1, 1, 0, 1, 0};
    PatchMask outside;  // disjoint from the support
    outside.bits = {1, 1, 1, 1, 0, 0, 1, 0, 1};
    EXPECT_DOUBLE_EQ(shortcut_score(cam, inside), 1.0);
    EXPECT_DOUBLE_EQ(shortcut_score(cam, outside), 0.0);
}

// Hand-summed 14x14 case: lesion block holds 0.9+0.8+0.7 = 2.4 of total 3.0.
TEST(ShortcutScore, PlantedGridHandArithmetic) {
    CamMap cam;
    cam.gw = cam.gh = 14;
    cam.values.assign(196, 0.0);
    cam.values[3 * 14 + 4] = 0.9;   // lesion block
    cam.values[3 * 14 + 5] = 0.8;
    cam.values[4 * 14 + 4] = 0.7;
    cam.values[13 * 14 + 13] = 0.6;  // shortcut corner
    PatchMask lesion;
    lesion.bits.assign(196, 0);
    for (int r = 3; r <= 4; ++r)
        for (int c = 4; c <= 5; ++c) lesion.bits[static_cast<std::size_t>(r) * 14 + c] = 1;
    PatchMask corner;
    corner.bits.assign(196, 0);
    corner.bits[13 * 14 + 13] = 1;
    EXPECT_NEAR(shortcut_score(cam, lesion), 2.4 / 3.0, 1e-12);
    EXPECT_NEAR(shortcut_score(cam, corner), 0.6 / 3.0, 1e-12);
}

TEST(ShortcutScore, ScaleInvariantPreNormalization) {
    Rng rng(13);
    CamMap cam;
    cam.gw = cam.gh = 5;
    cam.values.resize(25);
    for (double& v : cam.values) v = rng.uniform();  // deliberately unnormalized
    PatchMask roi;
    roi.bits.assign(25, 0);
    for (int i = 0; i < 25; ++i) roi.bits[static_cast<std::size_t>(i)] = rng.bernoulli(0.4);
    const double base = shortcut_score(cam, roi);
    CamMap scaled = cam;
    for (double& v : scaled.values) v *= 17.3;
    EXPECT_NEAR(shortcut_score(scaled, roi), base, 1e-12);
}

TEST(ShortcutScore, DimMismatchThrows) {
    CamMap cam;
    cam.gw = cam.gh = 4;
    cam.values.assign(16, 0.5);
    PatchMask roi;
    roi.bits.assign(9, 1);
    EXPECT_THROW(shortcut_score(cam, roi), DimMismatch);
}

TEST(CamOverlay, ProducesRgbAtImageResolution) {
    CamMap cam;
    cam.gw = cam.gh = 4;
    cam.values.assign(16, 0.0);
    cam.values[5] = 1.0;
    Image base(32, 32, 1, 0.5f);
    Image overlay = cam_overlay(cam, base);
    EXPECT_EQ(overlay.channels, 3);
    EXPECT_EQ(overlay.width, 32);
    EXPECT_EQ(overlay.height, 32);
}
