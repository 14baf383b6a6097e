#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "egvit/errors.hpp"
#include "egvit/gaze.hpp"
#include "egvit/image.hpp"
#include "egvit/io.hpp"
#include "egvit/rng.hpp"
#include "egvit/train.hpp"

namespace egvit {

constexpr int kMarkerOffsetPx = 2;  // marker square sits at (2,2) in the corner

// Controlled spurious-correlation benchmark: the class label is carried only
// by the lesion texture; a corner marker correlates with the label at
// rho_train on the train split and rho_test on the (decorrelated) test split.
// Synthetic gaze always dwells on the lesion, never on the marker.
struct SynthSpec {
    int image_size = 224;
    int num_classes = 2;
    int n_train = 2000;
    int n_test = 500;
    int roi_grid = 14;  // grid used for the emitted lesion ROI (model patch grid)
    int mask_k = 49;    // separated-mask budget the construction must respect

    struct Lesion {
        double radius_min = 13.0;
        double radius_max = 25.0;
        double intensity_min = 0.55;
        double intensity_max = 0.85;
        std::vector<double> texture_freq = {0.10, 0.30, 0.18};  // cycles/px, one per class
        double texture_amp = 0.16;
    } lesion;

    struct Shortcut {
        int marker_px = 24;
        double rho_train = 0.95;
        double rho_test = 0.5;
    } shortcut;

    double noise_std = 0.06;
    double background = 0.25;

    struct Gaze {
        int fixations_per_image = 3;
        double jitter_px = 6.0;
        double sigma_px = 25.0;
    } gaze;

    // proportional scaling of the pixel-sized knobs for other resolutions
    static SynthSpec scaled(int image_size, int num_classes = 2, int roi_grid = 14) {
        SynthSpec s;
        s.image_size = image_size;
        s.num_classes = num_classes;
        s.roi_grid = roi_grid;
        s.mask_k = std::max(1, roi_grid * roi_grid / 4);
        const double f = image_size / 224.0;
        s.lesion.radius_min = std::max(3.0, 13.0 * f);
        s.lesion.radius_max = std::max(4.0, 25.0 * f);
        s.shortcut.marker_px = std::max(4, static_cast<int>(24 * f + 0.5));
        s.gaze.jitter_px = std::max(1.0, 6.0 * f);
        s.gaze.sigma_px = std::max(2.0, 25.0 * f);
        return s;
    }

    // The lesion center must stay far enough from the marker square that the
    // top-k cells of a lesion-centered heatmap can never reach a marker cell.
    double marker_clearance_px() const {
        const double cell = static_cast<double>(image_size) / roi_grid;
        return std::sqrt(static_cast<double>(mask_k) / 3.14159265358979323846) * cell + cell +
               gaze.jitter_px + 2.0;
    }

    void validate() const {
        if (image_size < 16 || n_train < 1 || n_test < 1) throw InfeasibleSpec("bad sizes");
        if (num_classes < 2 || num_classes > static_cast<int>(lesion.texture_freq.size()))
            throw InfeasibleSpec("num_classes needs a texture frequency per class");
        if (shortcut.rho_train < 0 || shortcut.rho_train > 1 || shortcut.rho_test < 0 || shortcut.rho_test > 1)
            throw InfeasibleSpec("rho values must lie in [0,1]");
        // the lesion must be placeable away from the marker corner
        const double r = lesion.radius_max;
        const double lo = r + 2.0, hi = image_size - r - 3.0;
        if (lo >= hi) throw InfeasibleSpec("lesion radius too large for the image");
        const double m1 = kMarkerOffsetPx + shortcut.marker_px;
        const double far_corner = std::hypot(hi - m1, hi - m1);
        if (far_corner < marker_clearance_px())
            throw InfeasibleSpec("marker and lesion regions cannot be kept disjoint");
    }
};

struct SynthRecord {
    int id = 0;
    std::string image_path;    // relative to the output dir
    std::string heatmap_path;
    int label = 0;
    std::string split;         // "train" | "test"
    double lesion_cx = 0.0, lesion_cy = 0.0, lesion_radius = 0.0;
    PatchMask lesion_roi;      // roi_grid cells the lesion disc touches
    PatchMask marker_roi;      // roi_grid cells the marker square touches
    bool shortcut_present = false;
};

namespace detail {

inline PatchMask cells_touching_disc(int grid, int image_size, double cx, double cy, double r) {
    PatchMask m;
    m.bits.assign(static_cast<std::size_t>(grid) * grid, 0);
    const double cell = static_cast<double>(image_size) / grid;
    for (int gr = 0; gr < grid; ++gr) {
        for (int gc = 0; gc < grid; ++gc) {
            const double x0 = gc * cell, x1 = (gc + 1) * cell;
            const double y0 = gr * cell, y1 = (gr + 1) * cell;
            const double nx = std::clamp(cx, x0, x1);
            const double ny = std::clamp(cy, y0, y1);
            const double dx = cx - nx, dy = cy - ny;
            if (dx * dx + dy * dy <= r * r) m.bits[static_cast<std::size_t>(gr) * grid + gc] = 1;
        }
    }
    return m;
}

inline PatchMask cells_touching_square(int grid, int image_size, int x0, int y0, int side) {
    PatchMask m;
    m.bits.assign(static_cast<std::size_t>(grid) * grid, 0);
    const double cell = static_cast<double>(image_size) / grid;
    for (int gr = 0; gr < grid; ++gr) {
        for (int gc = 0; gc < grid; ++gc) {
            const double cx0 = gc * cell, cx1 = (gc + 1) * cell;
            const double cy0 = gr * cell, cy1 = (gr + 1) * cell;
            const bool overlap = cx0 < x0 + side && cx1 > x0 && cy0 < y0 + side && cy1 > y0;
            if (overlap) m.bits[static_cast<std::size_t>(gr) * grid + gc] = 1;
        }
    }
    return m;
}

}  // namespace detail

// Place the lesion, draw its class-coded texture, optionally stamp the
// corner marker. Everything about the image that predicts the label is the
// lesion texture frequency; radius/intensity/orientation are class-agnostic.
inline Image render_synth_image(const SynthSpec& spec, int label, bool marker, double cx, double cy,
                                double radius, double intensity, double theta, double phase,
                                Rng& noise_rng) {
    const int sz = spec.image_size;
    Image img(sz, sz, 1);
    for (int y = 0; y < sz; ++y)
        for (int x = 0; x < sz; ++x)
            img.at(x, y) = static_cast<float>(
                std::clamp(spec.background + noise_rng.normal() * spec.noise_std, 0.0, 1.0));

    const double freq = spec.lesion.texture_freq[static_cast<std::size_t>(label)];
    const double ct = std::cos(theta), st = std::sin(theta);
    const int x0 = std::max(0, static_cast<int>(cx - radius - 2)), x1 = std::min(sz - 1, static_cast<int>(cx + radius + 2));
    const int y0 = std::max(0, static_cast<int>(cy - radius - 2)), y1 = std::min(sz - 1, static_cast<int>(cy + radius + 2));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double dist = std::sqrt(dx * dx + dy * dy);
            const double a = std::clamp((radius - dist) / 1.5, 0.0, 1.0);  // soft edge
            if (a <= 0.0) continue;
            const double tex = intensity + spec.lesion.texture_amp *
                                               std::sin(2.0 * 3.14159265358979323846 * freq * (dx * ct + dy * st) + phase);
            img.at(x, y) = static_cast<float>(
                std::clamp((1.0 - a) * img.at(x, y) + a * tex, 0.0, 1.0));
        }
    }

    if (marker) {
        const int m0 = kMarkerOffsetPx, m1 = kMarkerOffsetPx + spec.shortcut.marker_px;
        for (int y = m0; y < std::min(m1, sz); ++y)
            for (int x = m0; x < std::min(m1, sz); ++x) img.at(x, y) = 0.95f;
    }
    return img;
}

// Raw gaze samples: an entry saccade from the far corner, then fixation dwells
// near the lesion center with saccade transits in between. detect_fixations on
// this trace recovers the lesion location; the marker corner is never visited.
// With jitter 0 every dwell sample sits exactly on the lesion center.
inline GazeTrace generate_gaze_trace(const SynthRecord& record, const SynthSpec& spec, std::uint64_t seed) {
    Rng rng(substream(seed, "gaze", static_cast<std::uint64_t>(record.id)));
    GazeTrace trace;
    trace.sample_rate_hz = 250.0;
    const double dt = 1000.0 / trace.sample_rate_hz;
    double t = 0.0;

    auto emit = [&](double x, double y) {
        GazeSample s;
        s.t_ms = t;
        s.x = x;
        s.y = y;
        s.valid = rng.uniform() >= 0.01;  // rare tracker dropouts
        trace.samples.push_back(s);
        t += dt;
    };

    // fixation targets jittered around the lesion center (uniform disc whose
    // radius leaves room for sample scatter and pixel rounding)
    const double target_r = std::max(0.0, spec.gaze.jitter_px - 1.5);
    const double scatter = std::min(0.8, 0.4 * spec.gaze.jitter_px);
    std::vector<std::pair<double, double>> targets;
    for (int f = 0; f < std::max(1, spec.gaze.fixations_per_image); ++f) {
        const double rr = target_r * std::sqrt(rng.uniform());
        const double th = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        targets.emplace_back(record.lesion_cx + rr * std::cos(th), record.lesion_cy + rr * std::sin(th));
    }

    // entry sweep from the corner opposite the marker; samples are emitted
    // only while they stay outside the default dispersion threshold around
    // the target, so they always read as saccade and never bias a centroid
    const double ex = spec.image_size * 0.9, ey = spec.image_size * 0.9;
    constexpr double kSweepClearancePx = 45.0;  // default I-DT dispersion 35 px + margin
    for (int i = 0; i < 4; ++i) {
        const double a = i / 8.0;
        const double sx = ex + a * (targets[0].first - ex);
        const double sy = ey + a * (targets[0].second - ey);
        if (std::hypot(sx - targets[0].first, sy - targets[0].second) >= kSweepClearancePx)
            emit(sx, sy);
    }

    for (std::size_t f = 0; f < targets.size(); ++f) {
        const double dwell = rng.uniform(180.0, 320.0);
        const int n = std::max(2, static_cast<int>(dwell / dt));
        for (int i = 0; i < n; ++i)
            emit(targets[f].first + scatter * rng.uniform(-1.0, 1.0),
                 targets[f].second + scatter * rng.uniform(-1.0, 1.0));
        if (f + 1 < targets.size()) {
            for (int i = 1; i <= 3; ++i) {  // transit
                const double a = i / 4.0;
                emit(targets[f].first + a * (targets[f + 1].first - targets[f].first),
                     targets[f].second + a * (targets[f + 1].second - targets[f].second));
            }
        }
    }
    return trace;
}

struct SynthDataset {
    DatasetManifest manifest;
    std::vector<SynthRecord> records;
};

// Deterministic generation: all randomness flows through per-record
// substreams keyed by record index, so two runs with the same seed produce
// byte-identical files. Writes PNG images, EGHM heatmaps, manifest.json and
// ground_truth.csv under out_dir when given.
inline SynthDataset generate_dataset(const SynthSpec& spec, std::uint64_t seed,
                                     const std::filesystem::path& out_dir = {}) {
    spec.validate();
    const int total = spec.n_train + spec.n_test;
    SynthDataset out;
    for (int c = 0; c < spec.num_classes; ++c) out.manifest.classes.push_back("class_" + std::to_string(c));

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir / "images");
        std::filesystem::create_directories(out_dir / "heatmaps");
    }

    std::ofstream gt;
    if (!out_dir.empty()) {
        gt.open(out_dir / "ground_truth.csv", std::ios::binary);
        if (!gt) throw IoError("cannot open ground_truth.csv for writing");
        gt << "record_id,lesion_cx,lesion_cy,shortcut_present,label\n";
    }

    const double marker_x1 = kMarkerOffsetPx + spec.shortcut.marker_px;
    for (int id = 0; id < total; ++id) {
        const bool is_train = id < spec.n_train;
        Rng rng(substream(seed, "record", static_cast<std::uint64_t>(id)));

        SynthRecord rec;
        rec.id = id;
        rec.split = is_train ? "train" : "test";
        rec.label = id % spec.num_classes;  // balanced classes

        // marker-label agreement at the split's correlation level
        const double rho = is_train ? spec.shortcut.rho_train : spec.shortcut.rho_test;
        const bool agree = rng.bernoulli(rho);
        const bool label_is_marker_class = rec.label == spec.num_classes - 1;
        rec.shortcut_present = agree ? label_is_marker_class : !label_is_marker_class;

        // lesion placement: center kept clear of the marker square by enough
        // that top-k gaze masks can never reach a marker cell
        rec.lesion_radius = rng.uniform(spec.lesion.radius_min, spec.lesion.radius_max);
        const double r = rec.lesion_radius;
        const double clearance = std::max(spec.marker_clearance_px(), r + 4.0);
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const double cx = rng.uniform(r + 2.0, spec.image_size - r - 2.0);
            const double cy = rng.uniform(r + 2.0, spec.image_size - r - 2.0);
            const double dx = std::max(0.0, cx - marker_x1);  // distance to the marker square
            const double dy = std::max(0.0, cy - marker_x1);
            if (std::hypot(dx, dy) >= clearance) {
                rec.lesion_cx = cx;
                rec.lesion_cy = cy;
                placed = true;
            }
        }
        if (!placed) throw InfeasibleSpec("could not place a lesion disjoint from the marker");

        rec.lesion_roi = detail::cells_touching_disc(spec.roi_grid, spec.image_size, rec.lesion_cx,
                                                     rec.lesion_cy, rec.lesion_radius);
        rec.marker_roi = detail::cells_touching_square(spec.roi_grid, spec.image_size, kMarkerOffsetPx,
                                                       kMarkerOffsetPx, spec.shortcut.marker_px);

        const double intensity = rng.uniform(spec.lesion.intensity_min, spec.lesion.intensity_max);
        const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        Image img = render_synth_image(spec, rec.label, rec.shortcut_present, rec.lesion_cx, rec.lesion_cy,
                                       rec.lesion_radius, intensity, theta, phase, rng);

        // full gaze pipeline: raw trace -> fixations -> heatmap
        GazeTrace trace = generate_gaze_trace(rec, spec, seed);
        std::vector<Fixation> fix = detect_fixations(trace);
        Heatmap hm = render_heatmap(fix, spec.image_size, spec.image_size, spec.gaze.sigma_px, true);

        char name[64];
        std::snprintf(name, sizeof name, "images/rec_%05d.png", id);
        rec.image_path = name;
        std::snprintf(name, sizeof name, "heatmaps/rec_%05d.eghm", id);
        rec.heatmap_path = name;

        if (!out_dir.empty()) {
            write_png(out_dir / rec.image_path, img);
            write_eghm(out_dir / rec.heatmap_path, hm);
            char line[160];
            std::snprintf(line, sizeof line, "%d,%.4f,%.4f,%d,%d\n", id, rec.lesion_cx, rec.lesion_cy,
                          rec.shortcut_present ? 1 : 0, rec.label);
            gt << line;
        }

        ManifestRecord mr;
        mr.image = rec.image_path;
        mr.label = rec.label;
        mr.heatmap = rec.heatmap_path;
        mr.split = rec.split;
        out.manifest.records.push_back(mr);
        out.records.push_back(std::move(rec));
    }

    if (!out_dir.empty()) save_manifest(out_dir / "manifest.json", out.manifest);
    return out;
}

}  // namespace egvit
