#pragma once

#include "waterseg/image.hpp"
#include "waterseg/metrics.hpp"

namespace waterseg {

// Error map: true positives tinted blue, false positives green, false
// negatives red, true negatives untouched. Each tinted channel is
// floor((1 - alpha) * pixel + alpha * colour).
Image render_overlay(const Image& image, const Mask& pred, const Mask& gt, double alpha = 0.5);

} // namespace waterseg
