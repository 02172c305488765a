#include "popgrid/png_io.hpp"

#include "popgrid/common.hpp"

#include <png.h>

#include <cstring>
#include <string>

namespace popgrid::png {

namespace {

struct ReadCursor {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

[[noreturn]] void on_error(png_structp, png_const_charp msg) {
    throw Error(std::string("png: ") + msg);
}

void on_warning(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode(const Image& image) {
    if (image.width <= 0 || image.height <= 0 || (image.channels != 1 && image.channels != 3 && image.channels != 4)) {
        throw Error("png: invalid image shape");
    }
    if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
        throw Error("png: pixel buffer does not match image shape");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
    png_infop info = png_create_info_struct(png);
    std::vector<std::uint8_t> out;
    try {
        png_set_write_fn(
            png, &out,
            [](png_structp p, png_bytep data, png_size_t len) {
                auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
                buf->insert(buf->end(), data, data + len);
            },
            nullptr);
        const int color = image.channels == 1 ? PNG_COLOR_TYPE_GRAY
                          : image.channels == 3 ? PNG_COLOR_TYPE_RGB
                                                : PNG_COLOR_TYPE_RGBA;
        png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8, color,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
        for (int y = 0; y < image.height; ++y) {
            png_write_row(png, const_cast<png_bytep>(image.pixels.data() + y * stride));
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

Image decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw Error("png: not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
    png_infop info = png_create_info_struct(png);
    ReadCursor cursor{bytes, 0};
    Image image;
    try {
        png_set_read_fn(png, &cursor, [](png_structp p, png_bytep data, png_size_t len) {
            auto* c = static_cast<ReadCursor*>(png_get_io_ptr(p));
            if (c->pos + len > c->bytes.size()) png_error(p, "truncated stream");
            std::memcpy(data, c->bytes.data() + c->pos, len);
            c->pos += len;
        });
        png_read_info(png, info);
        png_set_strip_16(png);
        png_set_packing(png);
        png_set_expand(png);
        const auto color = png_get_color_type(png, info);
        if (color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_strip_alpha(png);
        png_read_update_info(png, info);
        image.width = static_cast<int>(png_get_image_width(png, info));
        image.height = static_cast<int>(png_get_image_height(png, info));
        image.channels = png_get_channels(png, info);
        image.pixels.resize(static_cast<std::size_t>(image.width) * image.height * image.channels);
        std::vector<png_bytep> rows(image.height);
        for (int y = 0; y < image.height; ++y) {
            rows[y] = image.pixels.data() + static_cast<std::size_t>(y) * image.width * image.channels;
        }
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return image;
}

void write(const std::filesystem::path& path, const Image& image) {
    write_file_atomic(path, encode(image));
}

Image read(const std::filesystem::path& path) {
    return decode(read_binary_file(path));
}

}  // namespace popgrid::png
