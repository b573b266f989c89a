#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "waterseg/augment.hpp"
#include "waterseg/dataset.hpp"
#include "waterseg/errors.hpp"
#include "waterseg/image.hpp"
#include "waterseg/synth.hpp"

using namespace waterseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const char* env = std::getenv("WATERSEG_TEST_TMP");
    fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "waterseg_test_datasets";
    auto dir = root / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put_pair(const fs::path& root, Split split, const std::string& stem, const SynthScene& scene,
              int compression = 3) {
    const auto base = root / to_string(split);
    fs::create_directories(base / "images");
    fs::create_directories(base / "masks");
    write_png(base / "images" / (stem + ".png"), scene.image, compression);
    write_mask_png(base / "masks" / (stem + ".png"), scene.mask);
}

// root with `train` train scenes, one val, `test` test scenes, seeds offset by `base`
fs::path make_tree(const fs::path& root, int train, int val, int test, uint64_t base) {
    uint64_t seed = base;
    for (int i = 0; i < train; ++i) put_pair(root, Split::Train, "tr" + std::to_string(i), render_scene(32, seed++));
    for (int i = 0; i < val; ++i) put_pair(root, Split::Val, "va" + std::to_string(i), render_scene(32, seed++));
    for (int i = 0; i < test; ++i) put_pair(root, Split::Test, "te" + std::to_string(i), render_scene(32, seed++));
    return root;
}

} // namespace

TEST_CASE("split names") {
    CHECK(to_string(Split::Train) == "train");
    CHECK(split_from_string("val") == Split::Val);
    CHECK(split_from_string("test") == Split::Test);
    CHECK_THROWS_AS(split_from_string("holdout"), ValidationError);
}

TEST_CASE("average hash of a half-bright thumbnail") {
    Image img(8, 8, 3, 0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = 200;
    CHECK(average_hash(img) == 0xF0F0F0F0F0F0F0F0ull);
    CHECK(hamming_distance(0xF0F0F0F0F0F0F0F0ull, 0x0F0F0F0F0F0F0F0Full) == 64);
    CHECK(hamming_distance(5, 4) == 1);
}

TEST_CASE("content hash follows pixels, not file bytes") {
    const auto dir = scratch("hash");
    const auto scene = render_scene(32, 1);
    write_png(dir / "a.png", scene.image, 0);
    write_png(dir / "b.png", scene.image, 9);
    CHECK(file_bytes(dir / "a.png") != file_bytes(dir / "b.png"));
    const auto a = read_image(dir / "a.png"), b = read_image(dir / "b.png");
    CHECK(a == scene.image);
    CHECK(content_hash(a) == content_hash(b));
    CHECK(content_hash(a).size() == 64);
    Image c = a;
    c.pixels[0] ^= 1;
    CHECK(content_hash(c) != content_hash(a));
}

TEST_CASE("masks are binarized at 128") {
    const auto dir = scratch("binarize");
    Image gray(4, 1, 1);
    gray.pixels = {0, 127, 128, 255};
    write_png(dir / "m.png", gray);
    const auto m = read_mask(dir / "m.png");
    CHECK(m.labels == std::vector<uint8_t>{0, 0, 1, 1});
    CHECK(m.water_pixels() == 2);
}

TEST_CASE("load_manifest on a six-sample tree") {
    const auto root = make_tree(scratch("tree") / "lufi", 3, 1, 2, 10);
    const auto m = load_manifest(root);
    CHECK(m.samples.size() == 6);
    CHECK(m.count(Split::Train) == 3);
    CHECK(m.count(Split::Val) == 1);
    CHECK(m.count(Split::Test) == 2);
    for (const auto& s : m.samples) {
        CHECK(s.source == "lufi");
        CHECK(s.width == 32);
        CHECK(fs::path(s.image_path).stem() == fs::path(s.mask_path).stem());
    }
    CHECK(splits_disjoint(m));

    nlohmann::json a = load_manifest(root), b = load_manifest(root);
    CHECK(a == b);

    const auto path = root.parent_path() / "manifest.json";
    save_manifest(path, m);
    CHECK(nlohmann::json(read_manifest(path)) == a);
}

TEST_CASE("load_manifest reports orphans and bad files") {
    const auto dir = scratch("orphans");
    const auto root = make_tree(dir / "src", 2, 0, 1, 20);
    write_png(root / "train" / "images" / "lonely.png", render_scene(32, 99).image);
    try {
        load_manifest(root);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("lonely.png") != std::string::npos);
    }
    fs::remove(root / "train" / "images" / "lonely.png");

    write_mask_png(root / "train" / "masks" / "tr0.png", Mask(16, 16));
    CHECK_THROWS_AS(load_manifest(root), ValidationError);
    write_mask_png(root / "train" / "masks" / "tr0.png", render_scene(32, 20).mask);

    {
        std::ofstream bad(root / "test" / "images" / "te0.png", std::ios::binary);
        bad << "not a png";
    }
    try {
        load_manifest(root);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("te0.png") != std::string::npos);
    }
    CHECK_THROWS_AS(load_manifest(dir / "missing"), IoError);
}

TEST_CASE("cross-split dedup") {
    const auto dir = scratch("dedup");
    const auto root = make_tree(dir / "a", 4, 1, 2, 30);

    SUBCASE("no overlap is the identity") {
        const auto m = load_manifest(root);
        const auto d = dedup_cross_split(m);
        CHECK(nlohmann::json(d.samples) == nlohmann::json(m.samples));
        CHECK(d.dedup_report.empty());
    }

    SUBCASE("byte-identical and re-encoded copies are removed") {
        const auto test_scene = render_scene(32, 30 + 5); // te0
        fs::copy_file(root / "test" / "images" / "te0.png", root / "train" / "images" / "dup.png");
        fs::copy_file(root / "test" / "masks" / "te0.png", root / "train" / "masks" / "dup.png");
        put_pair(root, Split::Val, "reenc", test_scene, 9);
        const auto m = load_manifest(root);
        CHECK_FALSE(splits_disjoint(m));
        const auto d = dedup_cross_split(m);
        CHECK(splits_disjoint(d));
        CHECK(d.samples.size() == m.samples.size() - 2);
        CHECK(d.count(Split::Test) == 2);
        REQUIRE(d.dedup_report.size() == 2);
        for (const auto& r : d.dedup_report) {
            CHECK(r.reason == "exact");
            CHECK(fs::path(r.matched_test_image).filename() == "te0.png");
        }
    }

    SUBCASE("perceptual mode catches near duplicates") {
        auto near = render_scene(32, 30 + 6); // te1
        for (int i = 0; i < 12; ++i) near.image.pixels[static_cast<std::size_t>(i) * 7] ^= 1;
        put_pair(root, Split::Train, "near", near);
        const auto m = load_manifest(root);
        CHECK(dedup_cross_split(m).samples.size() == m.samples.size());
        const auto d = dedup_cross_split(m, {DedupMode::Perceptual, 5});
        REQUIRE(d.dedup_report.size() == 1);
        CHECK(d.dedup_report[0].reason == "perceptual");
        CHECK(d.dedup_report[0].hamming <= 5);
        CHECK(fs::path(d.dedup_report[0].image_path).stem() == "near");
    }

    CHECK(dedup_mode_from_string("perceptual") == DedupMode::Perceptual);
    CHECK_THROWS_AS(dedup_mode_from_string("fuzzy"), ConfigError);
}

TEST_CASE("merging sources") {
    const auto dir = scratch("merge");
    const auto a = load_manifest(make_tree(dir / "A", 10, 2, 3, 100), "A");

    SUBCASE("single source merge equals its own dedup") {
        const DatasetManifest one[] = {a};
        CHECK(nlohmann::json(merge_datasets(one).samples) == nlohmann::json(dedup_cross_split(a).samples));
    }

    SUBCASE("train splits combine; test split stays from the evaluation source") {
        const auto b_root = make_tree(dir / "B", 5, 0, 0, 200);
        fs::copy_file(dir / "A" / "test" / "images" / "te0.png", b_root / "train" / "images" / "leak.png");
        fs::copy_file(dir / "A" / "test" / "masks" / "te0.png", b_root / "train" / "masks" / "leak.png");
        const auto b = load_manifest(b_root, "B");
        const DatasetManifest both[] = {a, b};
        const auto m = merge_datasets(both);
        CHECK(m.count(Split::Train) == 15);
        CHECK(m.count(Split::Test) == a.count(Split::Test));
        CHECK(splits_disjoint(m));
        REQUIRE(m.dedup_report.size() == 1);
        CHECK(m.dedup_report[0].source == "B");
        int from_b = 0;
        for (const auto& s : m.samples) from_b += s.source == "B";
        CHECK(from_b == 5);
    }

    SUBCASE("several test sources need an explicit choice") {
        const auto c = load_manifest(make_tree(dir / "C", 2, 0, 2, 300), "C");
        const DatasetManifest both[] = {a, c};
        CHECK_THROWS_AS(merge_datasets(both), ConfigError);
        MergeOptions opt;
        opt.eval_source = "C";
        const auto m = merge_datasets(both, opt);
        CHECK(m.count(Split::Test) == 2);
        for (const auto& s : m.split(Split::Test)) CHECK(s.source == "C");
        CHECK(m.count(Split::Train) == 12);
        opt.eval_source = "Z";
        CHECK_THROWS_AS(merge_datasets(both, opt), ConfigError);
    }

    CHECK_THROWS_AS(merge_datasets(std::span<const DatasetManifest>{}), ConfigError);
}

TEST_CASE("augmentation") {
    const auto scene = render_scene(64, 4);

    SUBCASE("deterministic in seed") {
        const auto a = augment(scene.image, scene.mask, 77), b = augment(scene.image, scene.mask, 77);
        CHECK(a.image == b.image);
        CHECK(a.mask == b.mask);
        bool any_diff = false;
        for (uint64_t s = 0; s < 8 && !any_diff; ++s) any_diff = !(augment(scene.image, scene.mask, s).image == a.image);
        CHECK(any_diff);
    }

    SUBCASE("pure flip mirrors both and keeps the water area") {
        AugmentOptions opt;
        opt.flip_probability = 1.0;
        opt.min_crop_area = opt.max_crop_area = 1.0;
        opt.photometric = false;
        const auto out = augment(scene.image, scene.mask, 3, opt);
        CHECK(out.mask.water_pixels() == scene.mask.water_pixels());
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                CHECK(out.mask.at(x, y) == scene.mask.at(63 - x, y));
                for (int c = 0; c < 3; ++c) CHECK(out.image.at(x, y, c) == scene.image.at(63 - x, y, c));
            }
    }

    SUBCASE("masks stay binary and sizes are preserved") {
        for (uint64_t s = 0; s < 20; ++s) {
            const auto out = augment(scene.image, scene.mask, s);
            CHECK(out.image.width == 64);
            CHECK(out.mask.height == 64);
            for (auto v : out.mask.labels) CHECK(v <= 1);
        }
    }

    CHECK_THROWS_AS(augment(scene.image, Mask(10, 10), 0), ShapeError);
}

TEST_CASE("synthetic scenes") {
    SUBCASE("labels agree with the rendered water") {
        for (uint64_t seed = 0; seed < 10; ++seed) {
            const auto s = render_scene(64, seed);
            const double frac = static_cast<double>(s.mask.water_pixels()) / (64.0 * 64.0);
            CHECK(frac >= 0.1);
            CHECK(frac <= 0.6);
            int disagree = 0;
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x) {
                    const bool bluish = s.image.at(x, y, 2) - s.image.at(x, y, 0) > 40;
                    disagree += bluish != (s.mask.at(x, y) == 1);
                }
            CHECK(disagree == 0);
        }
    }

    SUBCASE("generation is byte-identical and split 70/15/15") {
        const auto dir = scratch("synth");
        SynthOptions opt;
        opt.count = 20;
        opt.image_size = 32;
        opt.seed = 7;
        synth_generate(opt, dir / "one");
        synth_generate(opt, dir / "two");
        const auto m = load_manifest(dir / "one");
        CHECK(m.count(Split::Train) == 14);
        CHECK(m.count(Split::Val) == 3);
        CHECK(m.count(Split::Test) == 3);
        for (const auto& s : m.samples) {
            const auto rel = fs::relative(s.image_path, dir / "one");
            CHECK(file_bytes(s.image_path) == file_bytes(dir / "two" / rel));
            const auto mrel = fs::relative(s.mask_path, dir / "one");
            CHECK(file_bytes(s.mask_path) == file_bytes(dir / "two" / mrel));
        }
        opt.image_size = 4;
        CHECK_THROWS_AS(synth_generate(opt, dir / "bad"), ConfigError);
    }
}
