#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "egvit/errors.hpp"
#include "egvit/gaze.hpp"
#include "egvit/image.hpp"
#include "egvit/vit.hpp"

namespace egvit {

// Gradient-weighted class activation map over patch tokens, in [0,1].
struct CamMap {
    int gw = 0;
    int gh = 0;
    std::vector<double> values;  // row-major, max = 1 unless degenerate
    int target_class = 0;
    bool degenerate = false;  // cam identically zero after rectification

    double at(int col, int row) const { return values[static_cast<std::size_t>(row) * gw + col]; }
};

// Grad-CAM on the token state entering the final encoder layer (the post
// re-injection state, where all N patch positions exist in drop mode).
// tap_layer selects an earlier encoder layer's input instead when >= 0; in
// drop mode before re-injection only the kept cells receive attribution.
// target_class < 0 means the argmax class.
template <typename T = float>
CamMap grad_cam(const ModelParams<T>& params, const ModelConfig& cfg, const Image& image,
                const PatchMask* mask, int target_class = -1, int tap_layer = -1) {
    cfg.validate();
    if (cfg.depth < 1) throw ConfigMismatch("grad_cam needs at least one encoder layer");
    const int tap = tap_layer >= 0 ? tap_layer : cfg.depth - 1;
    if (tap >= cfg.depth) throw ConfigMismatch("grad_cam: tap layer out of range");

    ForwardTrace<T> trace;
    Vec<T> logits = forward(image, mask, params, cfg, &trace);
    int target = target_class;
    if (target < 0) {
        target = 0;
        for (int c = 1; c < cfg.num_classes; ++c)
            if (logits(c) > logits(target)) target = c;
    }
    if (target >= cfg.num_classes) throw ConfigMismatch("grad_cam: target class out of range");

    Mat<T> dlogits = Mat<T>::Zero(1, cfg.num_classes);
    dlogits(0, target) = T(1);  // gradient of the raw target logit
    Mat<T> dtap;
    backward_batch(params, cfg, trace, dlogits, static_cast<ModelParams<T>*>(nullptr), tap, &dtap);

    const Mat<T>& acts = trace.layers[static_cast<std::size_t>(tap)].x;
    const int rows = static_cast<int>(acts.rows());
    const int n_patch_rows = rows - 1;  // row 0 is the class token
    const int d = cfg.hidden_dim;

    // channel weights: spatial mean of d(logit)/d(A) over patch tokens
    Vec<T> w = Vec<T>::Zero(d);
    for (int r = 1; r < rows; ++r) w += dtap.row(r).transpose();
    w /= static_cast<T>(n_patch_rows);

    CamMap cam;
    cam.gw = cfg.grid();
    cam.gh = cfg.grid();
    cam.target_class = target;
    cam.values.assign(static_cast<std::size_t>(cfg.num_patches()), 0.0);

    // map token rows to grid cells (identity on the full-token state)
    const bool full = n_patch_rows == cfg.num_patches();
    const std::vector<int>* kept = full ? nullptr : &trace.kept[0];
    double mx = 0.0;
    for (int r = 1; r < rows; ++r) {
        const double raw = static_cast<double>(acts.row(r) * w);
        const double rectified = std::max(0.0, raw);
        const int cell = full ? r - 1 : (*kept)[static_cast<std::size_t>(r - 1)];
        cam.values[static_cast<std::size_t>(cell)] = rectified;
        mx = std::max(mx, rectified);
    }
    if (mx > 0.0) {
        for (double& v : cam.values) v /= mx;
    } else {
        cam.degenerate = true;  // all-zero map, flagged rather than thrown
    }
    return cam;
}

// Fraction of cam mass inside the region of interest; 0 for an all-zero cam.
// Scale-invariant: score(c * cam) == score(cam) for c > 0.
inline double shortcut_score(const CamMap& cam, const PatchMask& roi) {
    if (roi.size() != cam.values.size()) throw DimMismatch("shortcut_score: roi dims differ from cam");
    double inside = 0.0, total = 0.0;
    for (std::size_t i = 0; i < cam.values.size(); ++i) {
        total += cam.values[i];
        if (roi.bits[i]) inside += cam.values[i];
    }
    return total > 0.0 ? inside / total : 0.0;
}

inline Heatmap cam_to_heatmap(const CamMap& cam) {
    Heatmap hm(cam.gw, cam.gh);
    for (std::size_t i = 0; i < cam.values.size(); ++i) hm.values[i] = cam.values[i];
    return hm;
}

// Bilinear upsample of the cam grid to image resolution.
inline Heatmap upsample_cam(const CamMap& cam, int width, int height) {
    Image grid(cam.gw, cam.gh, 1);
    for (std::size_t i = 0; i < cam.values.size(); ++i) grid.data[i] = static_cast<float>(cam.values[i]);
    Image up = resize_bilinear(grid, width, height);
    Heatmap hm(width, height);
    for (std::size_t i = 0; i < hm.values.size(); ++i) hm.values[i] = up.data[i];
    return hm;
}

namespace detail {

// compact viridis approximation, linearly interpolated
inline void viridis(double t, float& r, float& g, float& b) {
    static constexpr float lut[9][3] = {
        {0.267f, 0.005f, 0.329f}, {0.283f, 0.141f, 0.458f}, {0.254f, 0.265f, 0.530f},
        {0.207f, 0.372f, 0.553f}, {0.164f, 0.471f, 0.558f}, {0.128f, 0.567f, 0.551f},
        {0.135f, 0.659f, 0.518f}, {0.267f, 0.749f, 0.441f}, {0.993f, 0.906f, 0.144f}};
    t = std::clamp(t, 0.0, 1.0) * 8.0;
    const int i = std::min(7, static_cast<int>(t));
    const float f = static_cast<float>(t - i);
    r = lut[i][0] + f * (lut[i + 1][0] - lut[i][0]);
    g = lut[i][1] + f * (lut[i + 1][1] - lut[i][1]);
    b = lut[i][2] + f * (lut[i + 1][2] - lut[i][2]);
}

}  // namespace detail

// Alpha-blended colormap overlay for qualitative inspection.
inline Image cam_overlay(const CamMap& cam, const Image& image, double alpha = 0.5) {
    Heatmap up = upsample_cam(cam, image.width, image.height);
    Image out(image.width, image.height, 3);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            float cr, cg, cb;
            detail::viridis(up.at(x, y), cr, cg, cb);
            const float base = image.at(x, y, 0);
            out.at(x, y, 0) = static_cast<float>((1.0 - alpha) * base + alpha * cr);
            out.at(x, y, 1) = static_cast<float>((1.0 - alpha) * base + alpha * cg);
            out.at(x, y, 2) = static_cast<float>((1.0 - alpha) * base + alpha * cb);
        }
    }
    return out;
}

}  // namespace egvit
