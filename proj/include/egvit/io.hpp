#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "egvit/errors.hpp"
#include "egvit/gaze.hpp"
#include "egvit/image.hpp"

namespace egvit {

// ---------------------------------------------------------------------------
// Little-endian primitives (files are LE regardless of host)
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("unexpected end of file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& is) {
    const std::uint64_t lo = get_u32(is);
    const std::uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

inline float get_f32(std::istream& is) {
    const std::uint32_t u = get_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EGHM heatmap binary: magic "EGHM", u32 LE width, height, reserved(0),
// then width*height f32 LE values, row-major.
// ---------------------------------------------------------------------------

inline void write_eghm(const std::filesystem::path& path, const Heatmap& hm) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write("EGHM", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(hm.width));
    detail::put_u32(os, static_cast<std::uint32_t>(hm.height));
    detail::put_u32(os, 0);
    for (double v : hm.values) detail::put_f32(os, static_cast<float>(v));
    if (!os) throw IoError("write failed: " + path.string());
}

inline Heatmap read_eghm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "EGHM", 4) != 0) throw FormatError("bad EGHM magic: " + path.string());
    const std::uint32_t w = detail::get_u32(is);
    const std::uint32_t h = detail::get_u32(is);
    detail::get_u32(is);  // reserved
    Heatmap hm(static_cast<int>(w), static_cast<int>(h));
    for (double& v : hm.values) v = detail::get_f32(is);
    return hm;
}

// 16-bit big-endian PGM (P5) scaled to [0, 65535], for viewing.
inline void write_pgm16(const std::filesystem::path& path, const Heatmap& hm) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "P5\n" << hm.width << " " << hm.height << "\n65535\n";
    double mx = 0.0;
    for (double v : hm.values) mx = std::max(mx, v);
    const double scale = mx > 0.0 ? 65535.0 / mx : 0.0;
    for (double v : hm.values) {
        const auto q = static_cast<std::uint16_t>(std::clamp(v * scale, 0.0, 65535.0) + 0.5);
        const unsigned char b[2] = {static_cast<unsigned char>(q >> 8), static_cast<unsigned char>(q)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
}

// ---------------------------------------------------------------------------
// PGM images (P5, 8- or 16-bit grayscale), values mapped to [0,1] floats
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1) throw FormatError("PGM supports 1 channel only");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    for (float v : img.data)
        os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f)));
}

inline Image read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    std::string magic;
    is >> magic;
    if (magic != "P5") throw FormatError("not a P5 PGM: " + path.string());
    auto next_int = [&is]() {
        int c = is.get();
        while (c == '#' || std::isspace(c)) {
            if (c == '#')
                while (c != '\n' && c != EOF) c = is.get();
            c = is.get();
        }
        is.unget();
        int v;
        is >> v;
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    is.get();  // single whitespace after header
    Image img(w, h, 1);
    if (maxval < 256) {
        std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0f;
    } else {
        std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 2);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i) {
            const int v = (buf[2 * i] << 8) | buf[2 * i + 1];  // PGM 16-bit is big-endian
            img.data[i] = static_cast<float>(v) / static_cast<float>(maxval);
        }
    }
    if (!is) throw FormatError("truncated PGM: " + path.string());
    return img;
}

// ---------------------------------------------------------------------------
// PNG via libpng: 8/16-bit grayscale and 8-bit RGB
// ---------------------------------------------------------------------------

inline void write_png(const std::filesystem::path& path, const Image& img, int bit_depth = 8) {
    if (img.channels != 1 && img.channels != 3) throw FormatError("PNG writer: 1 or 3 channels");
    if (bit_depth != 8 && bit_depth != 16) throw FormatError("PNG writer: bit depth 8 or 16");
    if (bit_depth == 16 && img.channels != 1) throw FormatError("PNG writer: 16-bit only for grayscale");
    std::FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw IoError("libpng write failure: " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 bit_depth, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const double maxv = bit_depth == 8 ? 255.0 : 65535.0;
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * img.channels * (bit_depth / 8));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                const auto q = static_cast<std::uint32_t>(std::clamp(static_cast<double>(img.at(x, y, c)), 0.0, 1.0) * maxv + 0.5);
                if (bit_depth == 8) {
                    row[static_cast<std::size_t>(x) * img.channels + c] = static_cast<unsigned char>(q);
                } else {
                    row[2 * static_cast<std::size_t>(x)] = static_cast<unsigned char>(q >> 8);
                    row[2 * static_cast<std::size_t>(x) + 1] = static_cast<unsigned char>(q);
                }
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline Image read_png(const std::filesystem::path& path) {
    std::FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw IoError("cannot open: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw FormatError("libpng read failure: " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError("unsupported PNG channel count: " + path.string());
    }
    Image img(w, h, channels);
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * channels * (depth / 8));
    const float scale = depth == 8 ? 1.0f / 255.0f : 1.0f / 65535.0f;
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < channels; ++c) {
                int v;
                if (depth == 8) {
                    v = row[static_cast<std::size_t>(x) * channels + c];
                } else {  // PNG 16-bit samples are big-endian
                    const std::size_t o = 2 * (static_cast<std::size_t>(x) * channels + c);
                    v = (row[o] << 8) | row[o + 1];
                }
                img.at(x, y, c) = static_cast<float>(v) * scale;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

inline Image read_image(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".pgm") return read_pgm(path);
    return read_png(path);
}

// ---------------------------------------------------------------------------
// Gaze CSV: header "t_ms,x_px,y_px,valid", one sample per line, LF endings
// ---------------------------------------------------------------------------

inline void write_gaze_csv(const std::filesystem::path& path, const GazeTrace& trace) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "t_ms,x_px,y_px,valid\n";
    char line[128];
    for (const auto& s : trace.samples) {
        std::snprintf(line, sizeof line, "%.6g,%.6g,%.6g,%d\n", s.t_ms, s.x, s.y, s.valid ? 1 : 0);
        os << line;
    }
}

inline GazeTrace read_gaze_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty gaze CSV: " + path.string());
    if (line.rfind("t_ms,x_px,y_px,valid", 0) != 0)
        throw FormatError("bad gaze CSV header: " + path.string());
    GazeTrace trace;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        GazeSample s;
        int valid = 1;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%d", &s.t_ms, &s.x, &s.y, &valid) != 4)
            throw FormatError("bad gaze CSV line: " + line);
        s.valid = valid != 0;
        trace.samples.push_back(s);
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Mask text file: gh lines of gw space-separated 0/1 digits
// ---------------------------------------------------------------------------

inline void write_mask_text(const std::filesystem::path& path, const PatchMask& mask, int gw, int gh) {
    if (static_cast<std::size_t>(gw) * gh != mask.size()) throw DimMismatch("mask text: grid dims mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    for (int r = 0; r < gh; ++r) {
        for (int c = 0; c < gw; ++c) {
            if (c) os << ' ';
            os << static_cast<int>(mask.bits[static_cast<std::size_t>(r) * gw + c]);
        }
        os << '\n';
    }
}

inline PatchMask read_mask_text(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path.string());
    PatchMask m;
    int v;
    while (is >> v) {
        if (v != 0 && v != 1) throw FormatError("mask text: values must be 0/1");
        m.bits.push_back(static_cast<std::uint8_t>(v));
    }
    if (m.bits.empty()) throw FormatError("mask text: empty file " + path.string());
    return m;
}

}  // namespace egvit
