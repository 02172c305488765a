#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace popgrid::png {

/// 8-bit image with `channels` interleaved samples per pixel (1 = gray, 3 = RGB).
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<std::uint8_t> pixels;
};

std::vector<std::uint8_t> encode(const Image& image);
Image decode(std::span<const std::uint8_t> bytes);

void write(const std::filesystem::path& path, const Image& image);
Image read(const std::filesystem::path& path);

}  // namespace popgrid::png
