#pragma once

#include <png.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dinomaly/common.hpp"

namespace dinomaly {

struct ImageU8 {
    int h = 0, w = 0, c = 0;  // c is 1 or 3
    std::vector<std::uint8_t> data;  // row-major, interleaved channels

    ImageU8() = default;
    ImageU8(int h_, int w_, int c_)
        : h(h_), w(w_), c(c_),
          data(static_cast<std::size_t>(h_) * static_cast<std::size_t>(w_) *
               static_cast<std::size_t>(c_)) {}

    std::uint8_t& at(int y, int x, int ch) {
        return data[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) +
                     static_cast<std::size_t>(x)) * static_cast<std::size_t>(c) +
                    static_cast<std::size_t>(ch)];
    }
    std::uint8_t at(int y, int x, int ch) const {
        return data[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) +
                     static_cast<std::size_t>(x)) * static_cast<std::size_t>(c) +
                    static_cast<std::size_t>(ch)];
    }
};

namespace detail {

struct PngReadHandle {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngReadHandle() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngWriteHandle {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngWriteHandle() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

}  // namespace detail

inline ImageU8 read_png(const std::string& path) {
    detail::PngReadHandle h;
    h.fp = std::fopen(path.c_str(), "rb");
    if (!h.fp) throw DataError("read_png: cannot open " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, h.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw DataError("read_png: not a PNG file: " + path);
    h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!h.png) throw DataError("read_png: init failure: " + path);
    h.info = png_create_info_struct(h.png);
    if (!h.info) throw DataError("read_png: init failure: " + path);
    if (setjmp(png_jmpbuf(h.png))) throw DataError("read_png: corrupt image: " + path);
    png_init_io(h.png, h.fp);
    png_set_sig_bytes(h.png, 8);
    png_read_info(h.png, h.info);

    const png_uint_32 w = png_get_image_width(h.png, h.info);
    const png_uint_32 hh = png_get_image_height(h.png, h.info);
    const int color = png_get_color_type(h.png, h.info);
    const int depth = png_get_bit_depth(h.png, h.info);

    if (depth == 16) png_set_strip_16(h.png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(h.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(h.png);
    if (png_get_valid(h.png, h.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(h.png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(h.png);
    png_read_update_info(h.png, h.info);

    const int channels = png_get_channels(h.png, h.info);
    if (channels != 1 && channels != 3)
        throw DataError("read_png: unsupported channel count in " + path);
    ImageU8 img(static_cast<int>(hh), static_cast<int>(w), channels);
    std::vector<png_bytep> rows(hh);
    for (png_uint_32 y = 0; y < hh; ++y)
        rows[y] = img.data.data() +
                  static_cast<std::size_t>(y) * static_cast<std::size_t>(w) * static_cast<std::size_t>(channels);
    png_read_image(h.png, rows.data());
    png_read_end(h.png, nullptr);
    return img;
}

inline void write_png(const std::string& path, const ImageU8& img) {
    if (img.c != 1 && img.c != 3) throw ConfigError("write_png: channels must be 1 or 3");
    detail::PngWriteHandle h;
    h.fp = std::fopen(path.c_str(), "wb");
    if (!h.fp) throw DataError("write_png: cannot open " + path);
    h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!h.png) throw DataError("write_png: init failure: " + path);
    h.info = png_create_info_struct(h.png);
    if (!h.info) throw DataError("write_png: init failure: " + path);
    if (setjmp(png_jmpbuf(h.png))) throw DataError("write_png: write failure: " + path);
    png_init_io(h.png, h.fp);
    png_set_IHDR(h.png, h.info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h),
                 8, img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(h.png, h.info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
    for (int y = 0; y < img.h; ++y)
        rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
            img.data.data() +
            static_cast<std::size_t>(y) * static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.c));
    png_write_image(h.png, rows.data());
    png_write_end(h.png, nullptr);
}

// perceptually-uniform ramp (viridis anchor points), domain [0, 2]
inline std::array<std::uint8_t, 3> heat_color(double v) {
    static constexpr double anchors[9][3] = {
        {0.267004, 0.004874, 0.329415}, {0.282623, 0.140926, 0.457517},
        {0.253935, 0.265254, 0.529983}, {0.206756, 0.371758, 0.553117},
        {0.163625, 0.471133, 0.558148}, {0.127568, 0.566949, 0.550556},
        {0.134692, 0.658636, 0.517649}, {0.477504, 0.821444, 0.318195},
        {0.993248, 0.906157, 0.143936}};
    double t = v / 2.0;
    if (t < 0.0) t = 0.0;
    if (t > 1.0) t = 1.0;
    const double pos = t * 8.0;
    const int lo = pos >= 8.0 ? 7 : static_cast<int>(pos);
    const double frac = pos - lo;
    std::array<std::uint8_t, 3> out{};
    for (int ch = 0; ch < 3; ++ch) {
        const double c = anchors[lo][ch] * (1.0 - frac) + anchors[lo + 1][ch] * frac;
        out[static_cast<std::size_t>(ch)] = static_cast<std::uint8_t>(c * 255.0 + 0.5);
    }
    return out;
}

}  // namespace dinomaly
