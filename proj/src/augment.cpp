#include "waterseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "waterseg/errors.hpp"

namespace waterseg {

namespace {

Image crop(const Image& img, int x0, int y0, int w, int h) {
    Image out(w, h, img.channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
    return out;
}

Mask crop(const Mask& m, int x0, int y0, int w, int h) {
    Mask out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(x, y) = m.at(x0 + x, y0 + y);
    return out;
}

void flip_horizontal(Image& img) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width / 2; ++x)
            for (int c = 0; c < img.channels; ++c) std::swap(img.at(x, y, c), img.at(img.width - 1 - x, y, c));
}

void flip_horizontal(Mask& m) {
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width / 2; ++x) std::swap(m.at(x, y), m.at(m.width - 1 - x, y));
}

} // namespace

AugmentedPair augment(const Image& image, const Mask& mask, uint64_t seed, const AugmentOptions& options) {
    if (image.width != mask.width || image.height != mask.height) {
        throw ShapeError("augment: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                         " and mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) + " differ");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentedPair out{image, mask};

    if (unit(rng) < options.flip_probability) {
        flip_horizontal(out.image);
        flip_horizontal(out.mask);
    }

    const double area_fraction =
        options.min_crop_area + (options.max_crop_area - options.min_crop_area) * unit(rng);
    const double log_ratio = std::log(3.0 / 4.0) + (std::log(4.0 / 3.0) - std::log(3.0 / 4.0)) * unit(rng);
    if (area_fraction < 1.0) {
        const double area = area_fraction * image.width * image.height;
        const double ratio = std::exp(log_ratio);
        const int cw = std::clamp(static_cast<int>(std::lround(std::sqrt(area * ratio))), 1, image.width);
        const int ch = std::clamp(static_cast<int>(std::lround(std::sqrt(area / ratio))), 1, image.height);
        const int x0 = static_cast<int>(unit(rng) * (image.width - cw + 1));
        const int y0 = static_cast<int>(unit(rng) * (image.height - ch + 1));
        out.image = resize_bilinear(crop(out.image, std::min(x0, image.width - cw), std::min(y0, image.height - ch),
                                         cw, ch),
                                    image.width, image.height);
        out.mask = resize_nearest(crop(out.mask, std::min(x0, image.width - cw), std::min(y0, image.height - ch), cw,
                                       ch),
                                  image.width, image.height);
    }

    if (options.photometric) {
        const double brightness = 1.0 - options.brightness + 2.0 * options.brightness * unit(rng);
        const double contrast = 1.0 - options.contrast + 2.0 * options.contrast * unit(rng);
        double mean = 0;
        for (uint8_t v : out.image.pixels) mean += v * brightness;
        mean /= static_cast<double>(std::max<std::size_t>(1, out.image.pixels.size()));
        for (auto& v : out.image.pixels) {
            const double b = v * brightness;
            v = static_cast<uint8_t>(std::clamp(std::lround((b - mean) * contrast + mean), 0L, 255L));
        }
    }
    return out;
}

} // namespace waterseg
