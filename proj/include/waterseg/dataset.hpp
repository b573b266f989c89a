#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "waterseg/image.hpp"

namespace waterseg {

enum class Split { Train, Val, Test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

// SHA-256 over the decoded pixel buffer (with its dimensions), so files that
// re-encode identical pixels hash identically.
std::string content_hash(const Image& image);

// 64-bit average hash of the 8x8 grayscale thumbnail, row-major, MSB first.
uint64_t average_hash(const Image& image);

int hamming_distance(uint64_t a, uint64_t b);

struct Sample {
    std::string image_path;
    std::string mask_path;
    std::string source;
    Split split = Split::Train;
    std::string content_hash;
    uint64_t phash = 0;
    int width = 0;
    int height = 0;
};

struct DedupRemoval {
    std::string image_path;
    std::string source;
    Split split = Split::Train;
    std::string matched_test_image;
    std::string reason; // "exact" or "perceptual"
    int hamming = 0;
};

struct DatasetManifest {
    std::vector<Sample> samples;
    std::vector<std::string> provenance;
    std::vector<DedupRemoval> dedup_report;

    std::vector<Sample> split(Split which) const;
    std::size_t count(Split which) const;
};

void to_json(nlohmann::json& j, const Sample& s);
void from_json(const nlohmann::json& j, Sample& s);
void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Scans <root>/<split>/images/*.{png,jpg,jpeg} and <root>/<split>/masks/*.png,
// pairing files by stem. source defaults to the root directory name.
DatasetManifest load_manifest(const std::filesystem::path& root, const std::string& source = "");

enum class DedupMode { Exact, Perceptual };

struct DedupOptions {
    DedupMode mode = DedupMode::Exact;
    int hamming_threshold = 5;
};

DedupMode dedup_mode_from_string(const std::string& name);

// Drops train/val samples that duplicate any test sample. Test samples are
// never touched.
DatasetManifest dedup_cross_split(const DatasetManifest& manifest, const DedupOptions& options = {});

struct MergeOptions {
    // Source whose test split is kept. Required when several inputs carry test samples.
    std::string eval_source;
    DedupOptions dedup;
};

DatasetManifest merge_datasets(std::span<const DatasetManifest> manifests, const MergeOptions& options = {});

// True when no train/val content hash also appears in the test split.
bool splits_disjoint(const DatasetManifest& manifest);

} // namespace waterseg
