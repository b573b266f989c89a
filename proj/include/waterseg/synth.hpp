#pragma once

#include <cstdint>
#include <filesystem>

#include "waterseg/image.hpp"

namespace waterseg {

struct SynthScene {
    Image image;
    Mask mask;
};

// One procedural river/coast scene. The mask is built first and the image is
// rendered from it, so labels are exact. Water fraction lies in [0.1, 0.6].
SynthScene render_scene(int size, uint64_t seed);

struct SynthOptions {
    int count = 20;
    int image_size = 64;
    uint64_t seed = 0;
    double train_fraction = 0.70;
    double val_fraction = 0.15; // remainder goes to test
};

// Writes <out>/<split>/{images,masks}/scene_NNNN.png and returns out.
std::filesystem::path synth_generate(const SynthOptions& options, const std::filesystem::path& out_dir);

} // namespace waterseg
