#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "egvit/errors.hpp"

namespace egvit {

// Dense float raster, row-major, channels interleaved, values usually in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<float> data;  // height * width * channels

    Image() = default;
    Image(int w, int h, int c, float fill = 0.0f)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    float& at(int x, int y, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t size() const { return data.size(); }
};

struct Rect {
    int x = 0, y = 0, w = 0, h = 0;
};

// Bilinear sample with half-pixel alignment: scale 1 reproduces the input exactly.
inline Image resize_bilinear(const Image& src, int out_w, int out_h) {
    if (src.width <= 0 || src.height <= 0 || out_w <= 0 || out_h <= 0) throw ZeroDims("resize: zero dims");
    Image dst(out_w, out_h, src.channels);
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const double top = (1.0 - wx) * src.at(x0, y0, c) + wx * src.at(x1, y0, c);
                const double bot = (1.0 - wx) * src.at(x0, y1, c) + wx * src.at(x1, y1, c);
                dst.at(x, y, c) = static_cast<float>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return dst;
}

inline Image crop(const Image& src, const Rect& roi) {
    if (roi.w <= 0 || roi.h <= 0 || roi.x < 0 || roi.y < 0 ||
        roi.x + roi.w > src.width || roi.y + roi.h > src.height)
        throw RoiOutOfBounds("crop: roi outside image bounds");
    Image dst(roi.w, roi.h, src.channels);
    for (int y = 0; y < roi.h; ++y)
        for (int x = 0; x < roi.w; ++x)
            for (int c = 0; c < src.channels; ++c)
                dst.at(x, y, c) = src.at(roi.x + x, roi.y + y, c);
    return dst;
}

inline Image flip_horizontal(const Image& src) {
    Image dst(src.width, src.height, src.channels);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < src.channels; ++c)
                dst.at(x, y, c) = src.at(src.width - 1 - x, y, c);
    return dst;
}

// Translate by (dx, dy) with edge clamping; used for crop-jitter augmentation.
inline Image translate_clamped(const Image& src, int dx, int dy) {
    Image dst(src.width, src.height, src.channels);
    for (int y = 0; y < src.height; ++y) {
        const int sy = std::clamp(y + dy, 0, src.height - 1);
        for (int x = 0; x < src.width; ++x) {
            const int sx = std::clamp(x + dx, 0, src.width - 1);
            for (int c = 0; c < src.channels; ++c) dst.at(x, y, c) = src.at(sx, sy, c);
        }
    }
    return dst;
}

// gray -> replicated RGB, RGB -> channel mean; identity when counts match
inline Image convert_channels(const Image& src, int channels) {
    if (src.channels == channels) return src;
    Image dst(src.width, src.height, channels);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            if (src.channels == 1) {
                for (int c = 0; c < channels; ++c) dst.at(x, y, c) = src.at(x, y, 0);
            } else {
                float acc = 0.0f;
                for (int c = 0; c < src.channels; ++c) acc += src.at(x, y, c);
                const float mean = acc / static_cast<float>(src.channels);
                for (int c = 0; c < channels; ++c) dst.at(x, y, c) = mean;
            }
        }
    }
    return dst;
}

}  // namespace egvit
