#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "c2fdft/tensor.hpp"

namespace c2fdft {

// 8-bit RGB PNG in, (3,H,W) float in [0,1] out. Gray/palette/alpha/16-bit
// inputs are expanded or stripped to RGB8 on read.
inline TensorF read_png(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) fail("cannot open image: " + path);
    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        fail("not a PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("libpng init failed");
    }
    std::vector<png_byte> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("undecodable image: " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("unsupported PNG channel layout: " + path);
    }
    pixels.resize(static_cast<size_t>(w) * h * 3);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    TensorF img({3, static_cast<int64_t>(h), static_cast<int64_t>(w)});
    for (int64_t y = 0; y < static_cast<int64_t>(h); ++y)
        for (int64_t x = 0; x < static_cast<int64_t>(w); ++x)
            for (int64_t c = 0; c < 3; ++c)
                img[(c * h + y) * w + x] =
                    static_cast<float>(pixels[static_cast<size_t>((y * w + x) * 3 + c)]) / 255.0f;
    return img;
}

// Writes (3,H,W) float as 8-bit RGB, clipping to [0,1] and rounding.
inline void write_png(const std::string& path, const TensorF& img) {
    require(img.rank() == 3 && img.dim(0) == 3, "write_png: (3,H,W) image required");
    const int64_t h = img.dim(1), w = img.dim(2);
    std::vector<png_byte> pixels(static_cast<size_t>(h) * w * 3);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                float v = img[(c * h + y) * w + x];
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                pixels[static_cast<size_t>((y * w + x) * 3 + c)] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }

    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) fail("cannot write image: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        fail("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail("PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = pixels.data() + static_cast<size_t>(y) * w * 3;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace c2fdft
