#pragma once

// 8-bit images, PNG codec (libpng) and bilinear resampling.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <tuple>
#include <vector>

#include "dala/error.hpp"
#include "dala/fsutil.hpp"

namespace dala {

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return pixels[(y * width + x) * channels + c];
    }
    bool operator==(const Image&) const = default;
};

namespace detail {

struct PngBuffer {
    const std::string* bytes;
    std::size_t pos;
};

inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
    auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
    if (buf->bytes->size() - buf->pos < n) png_error(png, "unexpected end of data");
    std::memcpy(out, buf->bytes->data() + buf->pos, n);
    buf->pos += n;
}

inline void png_write_mem(png_structp png, png_bytep data, png_size_t n) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), n);
}

inline void png_flush_mem(png_structp) {}

}  // namespace detail

/// Decodes any PNG into 8-bit gray or RGB (alpha dropped, palettes expanded,
/// 16-bit samples reduced).
inline Image decode_png(const std::string& bytes, const std::string& path) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        throw IoError(path + ": not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError(path + ": libpng initialisation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError(path + ": libpng initialisation failed");
    }
    Image img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path + ": corrupt PNG data");
    }
    detail::PngBuffer buf{&bytes, 0};
    png_set_read_fn(png, &buf, detail::png_read_mem);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    if (img.channels != 1 && img.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path + ": unsupported PNG channel layout");
    }
    img.pixels.resize(img.width * img.height * img.channels);
    rows.resize(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline Image read_png(const std::filesystem::path& path) { return decode_png(read_file(path), path.string()); }

inline std::string encode_png(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw InputError("encode_png: only gray and RGB images are supported");
    if (img.width == 0 || img.height == 0) throw InputError("encode_png: empty image");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng initialisation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::string out;
    std::vector<png_bytep> rows(img.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed");
    }
    png_set_write_fn(png, &out, detail::png_write_mem, detail::png_flush_mem);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
    std::string bytes;
    try {
        bytes = encode_png(img);
    } catch (const Error& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    write_file_atomic(path, bytes);
}

/// Width and height of a decodable PNG file.
inline std::pair<std::size_t, std::size_t> png_dimensions(const std::filesystem::path& path) {
    const auto img = read_png(path);
    return {img.width, img.height};
}

/// Bilinear resampling of one plane with half-pixel centres:
/// source coordinate = (dst + 0.5) * src_size / dst_size - 0.5, clamped to the
/// valid range (edge samples replicate).
inline void resize_bilinear_plane(const double* src, std::size_t sw, std::size_t sh, double* dst, std::size_t dw,
                                  std::size_t dh) {
    auto axis = [](std::size_t d, std::size_t src_n, std::size_t dst_n) {
        double s = (static_cast<double>(d) + 0.5) * static_cast<double>(src_n) / static_cast<double>(dst_n) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        const auto i1 = std::min(i0 + 1, src_n - 1);
        return std::tuple{i0, i1, s - static_cast<double>(i0)};
    };
    for (std::size_t y = 0; y < dh; ++y) {
        const auto [y0, y1, fy] = axis(y, sh, dh);
        for (std::size_t x = 0; x < dw; ++x) {
            const auto [x0, x1, fx] = axis(x, sw, dw);
            const double top = fx == 0.0 ? src[y0 * sw + x0] : src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            const double bot = fx == 0.0 ? src[y1 * sw + x0] : src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            dst[y * dw + x] = fy == 0.0 ? top : top * (1.0 - fy) + bot * fy;
        }
    }
}

/// Value in [0,1] to an 8-bit level, round half up.
inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

/// Piecewise-linear "jet" colormap: blue (0) through cyan, yellow to red (1).
/// r = clamp(1.5 - |4v - 3|), g = clamp(1.5 - |4v - 2|), b = clamp(1.5 - |4v - 1|).
inline std::array<double, 3> jet(double v) {
    auto ch = [v](double c) { return std::clamp(1.5 - std::abs(4.0 * v - c), 0.0, 1.0); };
    return {ch(3.0), ch(2.0), ch(1.0)};
}

}  // namespace dala
