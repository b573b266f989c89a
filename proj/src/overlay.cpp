#include "waterseg/overlay.hpp"

#include <cmath>

#include "waterseg/errors.hpp"

namespace waterseg {

Image render_overlay(const Image& image, const Mask& pred, const Mask& gt, double alpha) {
    if (image.channels != 3) throw ShapeError("overlay needs an RGB image");
    if (pred.width != image.width || pred.height != image.height || gt.width != image.width ||
        gt.height != image.height) {
        throw ShapeError("overlay: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                         ", prediction " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                         ", ground truth " + std::to_string(gt.width) + "x" + std::to_string(gt.height));
    }
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("overlay alpha must lie in [0, 1]");

    // indexed by 2*pred + gt; TN stays untouched
    static constexpr uint8_t colours[4][3] = {{0, 0, 0}, {255, 0, 0}, {0, 255, 0}, {0, 0, 255}};
    Image out = image;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const uint8_t p = pred.labels[i], g = gt.labels[i];
        if ((p | g) > 1) throw ValidationError("overlay masks must be binary (0/1)");
        const int cls = 2 * p + g;
        if (cls == 0) continue;
        for (int c = 0; c < 3; ++c) {
            const double v = (1.0 - alpha) * image.pixels[i * 3 + c] + alpha * colours[cls][c];
            out.pixels[i * 3 + c] = static_cast<uint8_t>(std::floor(v + 1e-9));
        }
    }
    return out;
}

} // namespace waterseg
