#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "egvit/errors.hpp"
#include "egvit/image.hpp"

namespace egvit {

// ---------------------------------------------------------------------------
// Raw gaze data
// ---------------------------------------------------------------------------

struct GazeSample {
    double t_ms = 0.0;  // milliseconds since trace start, non-decreasing
    double x = 0.0;     // image-frame pixels, column
    double y = 0.0;     // image-frame pixels, row
    bool valid = true;
};

struct GazeTrace {
    std::vector<GazeSample> samples;
    double sample_rate_hz = 0.0;  // informational
};

struct Fixation {
    double cx = 0.0;  // centroid, pixels
    double cy = 0.0;
    double start_ms = 0.0;
    double end_ms = 0.0;
    double duration_ms() const { return end_ms - start_ms; }
};

struct FixationConfig {
    double dispersion_px = 35.0;    // max (x range + y range) within a fixation window
    double min_duration_ms = 100.0;
};

// ---------------------------------------------------------------------------
// Heatmaps and masks
// ---------------------------------------------------------------------------

// Dense attention raster at image resolution. Values are kept in double so
// the rendering sum is permutation-stable well below 1e-12.
struct Heatmap {
    int width = 0;
    int height = 0;
    std::vector<double> values;  // row-major, all >= 0, max == 1 after normalization

    Heatmap() = default;
    Heatmap(int w, int h, double fill = 0.0)
        : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

    double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Heatmap reduced to the model's patch grid (14x14 for ViT-S at 224/16).
struct GridHeatmap {
    int gw = 0;
    int gh = 0;
    std::vector<double> values;  // row-major

    GridHeatmap() = default;
    GridHeatmap(int w, int h, double fill = 0.0)
        : gw(w), gh(h), values(static_cast<std::size_t>(w) * h, fill) {}

    double& at(int col, int row) { return values[static_cast<std::size_t>(row) * gw + col]; }
    double at(int col, int row) const { return values[static_cast<std::size_t>(row) * gw + col]; }
};

// Length-N binary patch selector, row-major over the patch grid.
struct PatchMask {
    std::vector<std::uint8_t> bits;
    int ones() const { return static_cast<int>(std::count(bits.begin(), bits.end(), std::uint8_t{1})); }
    std::size_t size() const { return bits.size(); }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

inline double window_dispersion(const std::vector<GazeSample>& s, std::size_t lo, std::size_t hi) {
    double min_x = std::numeric_limits<double>::infinity(), max_x = -min_x;
    double min_y = min_x, max_y = max_x;
    for (std::size_t i = lo; i < hi; ++i) {
        min_x = std::min(min_x, s[i].x);
        max_x = std::max(max_x, s[i].x);
        min_y = std::min(min_y, s[i].y);
        max_y = std::max(max_y, s[i].y);
    }
    return (max_x - min_x) + (max_y - min_y);
}

}  // namespace detail

// Dispersion-threshold (I-DT) fixation detector. Invalid samples are dropped
// first; saccade segments never satisfy the dispersion bound and are skipped.
inline std::vector<Fixation> detect_fixations(const GazeTrace& trace, const FixationConfig& cfg = {}) {
    std::vector<GazeSample> s;
    s.reserve(trace.samples.size());
    for (const auto& p : trace.samples)
        if (p.valid && std::isfinite(p.x) && std::isfinite(p.y)) s.push_back(p);
    if (s.empty()) throw EmptyTrace("detect_fixations: no valid samples");

    std::vector<Fixation> out;
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
        // grow a window from i until it spans min_duration
        std::size_t j = i + 1;
        while (j < n && s[j - 1].t_ms - s[i].t_ms < cfg.min_duration_ms) ++j;
        if (s[j - 1].t_ms - s[i].t_ms < cfg.min_duration_ms) break;  // tail too short
        if (detail::window_dispersion(s, i, j) <= cfg.dispersion_px) {
            // extend while the dispersion bound still holds
            while (j < n && detail::window_dispersion(s, i, j + 1) <= cfg.dispersion_px) ++j;
            Fixation f;
            double sx = 0.0, sy = 0.0;
            for (std::size_t t = i; t < j; ++t) {
                sx += s[t].x;
                sy += s[t].y;
            }
            f.cx = sx / static_cast<double>(j - i);
            f.cy = sy / static_cast<double>(j - i);
            f.start_ms = s[i].t_ms;
            f.end_ms = s[j - 1].t_ms;
            out.push_back(f);
            i = j;
        } else {
            ++i;  // saccade sample at the window head
        }
    }
    if (out.empty()) throw AllSaccades("detect_fixations: no window satisfies the thresholds");
    return out;
}

// heatmap(x,y) = sum_f w_f * exp(-((x-cx)^2+(y-cy)^2)/(2 sigma^2)), max-normalized.
// w_f is the fixation duration when duration_weighted, else 1.
inline Heatmap render_heatmap(const std::vector<Fixation>& fixations, int width, int height,
                              double sigma, bool duration_weighted = true) {
    if (fixations.empty()) throw NoFixations("render_heatmap: empty fixation list");
    if (width <= 0 || height <= 0 || sigma <= 0.0) throw ZeroDims("render_heatmap: bad dims or sigma");
    Heatmap hm(width, height, 0.0);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (const auto& f : fixations) {
        const double w = duration_weighted ? f.duration_ms() : 1.0;
        for (int y = 0; y < height; ++y) {
            const double dy = y - f.cy;
            double* row = &hm.values[static_cast<std::size_t>(y) * width];
            for (int x = 0; x < width; ++x) {
                const double dx = x - f.cx;
                row[x] += w * std::exp(-(dx * dx + dy * dy) * inv2s2);
            }
        }
    }
    const double mx = *std::max_element(hm.values.begin(), hm.values.end());
    if (mx > 0.0)
        for (double& v : hm.values) v /= mx;
    return hm;
}

// Area-weighted mean pooling onto a gw x gh grid; handles fractional cell
// boundaries, then renormalizes the output max to 1.
inline GridHeatmap downsample_heatmap(const Heatmap& hm, int gw, int gh) {
    if (gw <= 0 || gh <= 0 || hm.width <= 0 || hm.height <= 0) throw ZeroDims("downsample_heatmap: zero dims");
    GridHeatmap g(gw, gh, 0.0);
    const double cw = static_cast<double>(hm.width) / gw;
    const double ch = static_cast<double>(hm.height) / gh;
    for (int gy = 0; gy < gh; ++gy) {
        const double y0 = gy * ch, y1 = (gy + 1) * ch;
        for (int gx = 0; gx < gw; ++gx) {
            const double x0 = gx * cw, x1 = (gx + 1) * cw;
            double acc = 0.0, area = 0.0;
            for (int py = static_cast<int>(std::floor(y0)); py < static_cast<int>(std::ceil(y1)); ++py) {
                const double wy = std::min<double>(py + 1, y1) - std::max<double>(py, y0);
                if (wy <= 0.0) continue;
                for (int px = static_cast<int>(std::floor(x0)); px < static_cast<int>(std::ceil(x1)); ++px) {
                    const double wx = std::min<double>(px + 1, x1) - std::max<double>(px, x0);
                    if (wx <= 0.0) continue;
                    acc += wx * wy * hm.at(std::min(px, hm.width - 1), std::min(py, hm.height - 1));
                    area += wx * wy;
                }
            }
            g.at(gx, gy) = area > 0.0 ? acc / area : 0.0;
        }
    }
    const double mx = *std::max_element(g.values.begin(), g.values.end());
    if (mx > 0.0)
        for (double& v : g.values) v /= mx;
    return g;
}

// Top-k cells by value; ties broken by ascending row-major index.
inline PatchMask separated_mask(const GridHeatmap& gh, int k) {
    const int n = gh.gw * gh.gh;
    if (k < 1 || k > n) throw BadK("separated_mask: k outside [1, N]");
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (gh.values[a] != gh.values[b]) return gh.values[a] > gh.values[b];
        return a < b;
    });
    PatchMask m;
    m.bits.assign(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < k; ++i) m.bits[static_cast<std::size_t>(idx[i])] = 1;
    return m;
}

inline int grid_argmax(const GridHeatmap& gh) {
    // first occurrence wins = ascending row-major tie break
    return static_cast<int>(std::max_element(gh.values.begin(), gh.values.end()) - gh.values.begin());
}

// ww x wh window centered at the argmax cell, shifted to lie fully inside the
// grid, so the support always has exactly ww*wh cells.
inline PatchMask gathered_mask(const GridHeatmap& gh, int ww, int wh) {
    if (ww < 1 || wh < 1 || ww > gh.gw || wh > gh.gh) throw BadWindow("gathered_mask: window exceeds grid");
    const int am = grid_argmax(gh);
    const int ar = am / gh.gw, ac = am % gh.gw;
    const int r0 = std::clamp(ar - (wh - 1) / 2, 0, gh.gh - wh);
    const int c0 = std::clamp(ac - (ww - 1) / 2, 0, gh.gw - ww);
    PatchMask m;
    m.bits.assign(static_cast<std::size_t>(gh.gw) * gh.gh, 0);
    for (int r = r0; r < r0 + wh; ++r)
        for (int c = c0; c < c0 + ww; ++c) m.bits[static_cast<std::size_t>(r) * gh.gw + c] = 1;
    return m;
}

// Crop the same ROI from image and heatmap, resize both to out_size x out_size
// (bilinear), renormalize the heatmap max back to 1.
inline std::pair<Image, Heatmap> crop_and_resize(const Image& image, const Heatmap& hm,
                                                 const Rect& roi, int out_size) {
    if (image.width != hm.width || image.height != hm.height)
        throw ShapeMismatch("crop_and_resize: image and heatmap dims differ");
    Image img_roi = crop(image, roi);  // throws RoiOutOfBounds
    Image img_out = resize_bilinear(img_roi, out_size, out_size);

    Image hm_as_img(hm.width, hm.height, 1);
    for (std::size_t i = 0; i < hm.values.size(); ++i) hm_as_img.data[i] = static_cast<float>(hm.values[i]);
    Image hm_roi = resize_bilinear(crop(hm_as_img, roi), out_size, out_size);
    Heatmap hm_out(out_size, out_size, 0.0);
    double mx = 0.0;
    for (std::size_t i = 0; i < hm_out.values.size(); ++i) {
        hm_out.values[i] = hm_roi.data[i];
        mx = std::max(mx, hm_out.values[i]);
    }
    if (mx > 0.0)
        for (double& v : hm_out.values) v /= mx;
    return {std::move(img_out), std::move(hm_out)};
}

// Geometric transforms shared with images so augmented heatmaps stay aligned.
inline Heatmap flip_horizontal(const Heatmap& hm) {
    Heatmap out(hm.width, hm.height);
    for (int y = 0; y < hm.height; ++y)
        for (int x = 0; x < hm.width; ++x) out.at(x, y) = hm.at(hm.width - 1 - x, y);
    return out;
}

inline Heatmap translate_clamped(const Heatmap& hm, int dx, int dy) {
    Heatmap out(hm.width, hm.height);
    for (int y = 0; y < hm.height; ++y) {
        const int sy = std::clamp(y + dy, 0, hm.height - 1);
        for (int x = 0; x < hm.width; ++x)
            out.at(x, y) = hm.at(std::clamp(x + dx, 0, hm.width - 1), sy);
    }
    return out;
}

}  // namespace egvit
