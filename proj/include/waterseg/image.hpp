#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace waterseg {

// Interleaved 8-bit image, row-major, RGB when channels == 3.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

    uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    uint8_t at(int x, int y, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    bool operator==(const Image&) const = default;
};

// Binary label map: 1 = water, 0 = background.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> labels;

    Mask() = default;
    Mask(int w, int h, uint8_t fill = 0) : width(w), height(h), labels(static_cast<std::size_t>(w) * h, fill) {}

    uint8_t& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }
    uint8_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    int64_t water_pixels() const;

    bool operator==(const Mask&) const = default;
};

// Decodes PNG/JPEG to RGB. Throws IoError naming the path on failure.
Image read_image(const std::filesystem::path& path);

// Decodes a single-channel mask and binarizes at >= 128.
Mask read_mask(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image& image, int compression = 3);

// Writes 0 / 255.
void write_mask_png(const std::filesystem::path& path, const Mask& mask, int compression = 3);

Image resize_bilinear(const Image& image, int width, int height);
Mask resize_nearest(const Mask& mask, int width, int height);

Mask mask_from_gray(const Image& gray, uint8_t threshold = 128);

} // namespace waterseg
