#include "waterseg/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "waterseg/dataset.hpp"
#include "waterseg/errors.hpp"

namespace waterseg {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

class SceneRng {
public:
    explicit SceneRng(uint64_t seed) : engine_(seed) {}
    double unit() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
    double normal(double sd) { return std::normal_distribution<double>(0.0, sd)(engine_); }

private:
    std::mt19937_64 engine_;
};

// Smooth value noise in [0,1]: random lattice values, bilinear in between.
std::vector<double> value_noise(SceneRng& rng, int size, int cell) {
    const int lattice = size / cell + 2;
    std::vector<double> grid(static_cast<std::size_t>(lattice * lattice));
    for (auto& v : grid) v = rng.unit();
    std::vector<double> out(static_cast<std::size_t>(size * size));
    for (int y = 0; y < size; ++y) {
        const double gy = static_cast<double>(y) / cell;
        const int y0 = static_cast<int>(gy);
        const double ty = gy - y0;
        for (int x = 0; x < size; ++x) {
            const double gx = static_cast<double>(x) / cell;
            const int x0 = static_cast<int>(gx);
            const double tx = gx - x0;
            const double a = grid[y0 * lattice + x0], b = grid[y0 * lattice + x0 + 1];
            const double c = grid[(y0 + 1) * lattice + x0], d = grid[(y0 + 1) * lattice + x0 + 1];
            out[y * size + x] = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
        }
    }
    return out;
}

// Piecewise-linear curve through control points spaced evenly over [0, size).
double polyline(const std::vector<double>& knots, int size, double u) {
    const double pos = u / (size - 1) * static_cast<double>(knots.size() - 1);
    const auto i = std::min(static_cast<std::size_t>(pos), knots.size() - 2);
    const double t = pos - static_cast<double>(i);
    return (1 - t) * knots[i] + t * knots[i + 1];
}

uint8_t to_byte(double v) { return static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

struct Layout {
    Mask mask;
    std::vector<uint8_t> bridge;
};

Layout draw_layout(SceneRng& rng, int size) {
    const int knots = 5;
    Layout layout{Mask(size, size), std::vector<uint8_t>(static_cast<std::size_t>(size * size), 0)};
    const bool river = rng.unit() < 0.6;
    const bool vertical = rng.unit() < 0.5;
    std::vector<double> a(knots), b(knots);
    for (int k = 0; k < knots; ++k) {
        if (river) {
            a[k] = size * rng.uniform(0.3, 0.7);       // centre line
            b[k] = size * rng.uniform(0.07, 0.22);     // half width
        } else {
            a[k] = size * rng.uniform(0.25, 0.6);      // shore line
        }
    }
    const bool water_below = rng.unit() < 0.5;
    for (int v = 0; v < size; ++v) {
        for (int u = 0; u < size; ++u) {
            bool water;
            if (river) {
                water = std::abs(v + 0.5 - polyline(a, size, u)) < polyline(b, size, u);
            } else {
                water = (v + 0.5 < polyline(a, size, u)) != water_below;
            }
            const int x = vertical ? v : u;
            const int y = vertical ? u : v;
            layout.mask.at(x, y) = water ? 1 : 0;
        }
    }
    if (rng.unit() < 0.4) {
        const int width = rng.integer(3, std::max(3, size / 12));
        const int start = rng.integer(size / 5, size - size / 5 - width);
        for (int v = 0; v < size; ++v) {
            for (int u = start; u < start + width; ++u) {
                const int x = vertical ? v : u;
                const int y = vertical ? u : v;
                layout.mask.at(x, y) = 0;
                layout.bridge[y * size + x] = 1;
            }
        }
    }
    return layout;
}

} // namespace

SynthScene render_scene(int size, uint64_t seed) {
    if (size < 32 || size % 32 != 0) {
        throw ConfigError("synthetic image size must be a positive multiple of 32, got " + std::to_string(size));
    }
    SceneRng rng(splitmix64(seed));
    Layout layout;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
        layout = draw_layout(rng, size);
        const double fraction = static_cast<double>(layout.mask.water_pixels()) / (size * size);
        ok = fraction >= 0.1 && fraction <= 0.6;
    }
    if (!ok) {
        layout = Layout{Mask(size, size), std::vector<uint8_t>(static_cast<std::size_t>(size * size), 0)};
        for (int y = size * 3 / 8; y < size * 5 / 8; ++y)
            for (int x = 0; x < size; ++x) layout.mask.at(x, y) = 1;
    }

    static constexpr std::array<std::array<double, 3>, 3> land_palette{
        {{{120, 100, 70}}, {{90, 120, 60}}, {{140, 130, 110}}}};
    const auto& land_base = land_palette[static_cast<std::size_t>(rng.integer(0, 2))];
    std::array<double, 3> land{};
    for (int c = 0; c < 3; ++c) land[c] = land_base[c] + rng.uniform(-15, 15);
    const std::array<double, 3> water{rng.uniform(30, 70), rng.uniform(70, 120), rng.uniform(140, 210)};
    const double bridge_gray = rng.uniform(120, 170);

    const auto land_noise = value_noise(rng, size, std::max(4, size / 4));
    const auto water_noise = value_noise(rng, size, std::max(4, size / 8));

    std::vector<uint8_t> blob(static_cast<std::size_t>(size * size), 0);
    const int blobs = rng.integer(0, 3);
    for (int i = 0; i < blobs; ++i) {
        const double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
        const double rx = rng.uniform(size / 32.0, size / 8.0), ry = rng.uniform(size / 32.0, size / 8.0);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double dx = (x - cx) / rx, dy = (y - cy) / ry;
                if (dx * dx + dy * dy <= 1.0) blob[y * size + x] = 1;
            }
    }

    SynthScene scene{Image(size, size, 3), layout.mask};
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * size + x;
            std::array<double, 3> px{};
            if (scene.mask.labels[i]) {
                const double m = 0.85 + 0.3 * water_noise[i];
                for (int c = 0; c < 3; ++c) px[c] = water[c] * m + rng.normal(5);
            } else if (layout.bridge[i]) {
                for (int c = 0; c < 3; ++c) px[c] = bridge_gray + rng.normal(4);
            } else if (blob[i]) {
                px = {50 + rng.normal(6), 140 + rng.normal(8), 50 + rng.normal(6)};
            } else {
                const double m = 0.75 + 0.5 * land_noise[i];
                for (int c = 0; c < 3; ++c) px[c] = land[c] * m + rng.normal(6);
            }
            for (int c = 0; c < 3; ++c) scene.image.at(x, y, c) = to_byte(px[c]);
        }
    }
    return scene;
}

std::filesystem::path synth_generate(const SynthOptions& options, const std::filesystem::path& out_dir) {
    if (options.count < 1) throw ConfigError("synthetic corpus needs n >= 1");
    if (options.image_size < 32 || options.image_size % 32 != 0) {
        throw ConfigError("synthetic image size must be a positive multiple of 32, got " +
                          std::to_string(options.image_size));
    }
    if (options.train_fraction < 0 || options.val_fraction < 0 || options.train_fraction + options.val_fraction > 1) {
        throw ConfigError("split fractions must be non-negative and sum to at most 1");
    }
    const int n = options.count;
    const int n_train = std::min(n, static_cast<int>(std::lround(options.train_fraction * n)));
    const int n_val = std::min(n - n_train, static_cast<int>(std::lround(options.val_fraction * n)));

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(splitmix64(options.seed ^ 0x5EEDF00DULL));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (int rank = 0; rank < n; ++rank) {
        const int index = order[static_cast<std::size_t>(rank)];
        const Split split = rank < n_train ? Split::Train : (rank < n_train + n_val ? Split::Val : Split::Test);
        const auto scene = render_scene(options.image_size, options.seed * 1000003ULL + static_cast<uint64_t>(index));
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d.png", index);
        const auto base = out_dir / to_string(split);
        write_png(base / "images" / name, scene.image);
        write_mask_png(base / "masks" / name, scene.mask);
    }
    nlohmann::json meta{{"generator", "waterseg-synth"},
                        {"count", n},
                        {"image_size", options.image_size},
                        {"seed", options.seed},
                        {"train", n_train},
                        {"val", n_val},
                        {"test", n - n_train - n_val}};
    std::ofstream(out_dir / "synth.json") << meta.dump(2) << '\n';
    return out_dir;
}

} // namespace waterseg
