#pragma once

#include <cstdint>

#include "waterseg/image.hpp"

namespace waterseg {

struct AugmentOptions {
    double flip_probability = 0.5;
    double min_crop_area = 0.7;
    double max_crop_area = 1.0;
    double brightness = 0.2; // factor drawn from [1 - b, 1 + b]
    double contrast = 0.2;
    bool photometric = true;
};

struct AugmentedPair {
    Image image;
    Mask mask;
};

// Same geometric transform (horizontal flip, random resized crop) on image
// and mask; photometric jitter on the image only. Masks are resampled with
// nearest neighbour so they stay binary. Deterministic in seed.
AugmentedPair augment(const Image& image, const Mask& mask, uint64_t seed, const AugmentOptions& options = {});

} // namespace waterseg
