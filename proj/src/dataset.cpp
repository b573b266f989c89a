#include "waterseg/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <openssl/evp.h>
#include <opencv2/imgproc.hpp>

#include "waterseg/errors.hpp"

namespace waterseg {

namespace fs = std::filesystem;

std::string to_string(Split split) {
    switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "val" || name == "validation") return Split::Val;
    if (name == "test") return Split::Test;
    throw ValidationError("unknown split '" + name + "'");
}

std::string content_hash(const Image& image) {
    const std::string header = std::to_string(image.width) + "x" + std::to_string(image.height) + "x" +
                               std::to_string(image.channels) + "\n";
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx, image.pixels.data(), image.pixels.size()) != 1 ||
        EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error("hash", "sha256 digest failed");
    }
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

uint64_t average_hash(const Image& image) {
    cv::Mat gray(image.height, image.width, CV_8UC1);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            int v;
            if (image.channels >= 3) {
                v = (299 * image.at(x, y, 0) + 587 * image.at(x, y, 1) + 114 * image.at(x, y, 2) + 500) / 1000;
            } else {
                v = image.at(x, y, 0);
            }
            gray.at<uint8_t>(y, x) = static_cast<uint8_t>(v);
        }
    }
    cv::Mat thumb;
    cv::resize(gray, thumb, cv::Size(8, 8), 0, 0, cv::INTER_AREA);
    int total = 0;
    for (int i = 0; i < 64; ++i) total += thumb.at<uint8_t>(i / 8, i % 8);
    uint64_t bits = 0;
    for (int i = 0; i < 64; ++i) {
        bits <<= 1;
        if (thumb.at<uint8_t>(i / 8, i % 8) * 64 > total) bits |= 1;
    }
    return bits;
}

int hamming_distance(uint64_t a, uint64_t b) { return std::popcount(a ^ b); }

std::vector<Sample> DatasetManifest::split(Split which) const {
    std::vector<Sample> out;
    for (const auto& s : samples)
        if (s.split == which) out.push_back(s);
    return out;
}

std::size_t DatasetManifest::count(Split which) const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.split == which; }));
}

namespace {

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

} // namespace

void to_json(nlohmann::json& j, const Sample& s) {
    j = nlohmann::json{{"image", s.image_path}, {"mask", s.mask_path},   {"source", s.source},
                       {"split", to_string(s.split)}, {"content_hash", s.content_hash},
                       {"phash", hex64(s.phash)}, {"width", s.width}, {"height", s.height}};
}

void from_json(const nlohmann::json& j, Sample& s) {
    j.at("image").get_to(s.image_path);
    j.at("mask").get_to(s.mask_path);
    j.at("source").get_to(s.source);
    s.split = split_from_string(j.at("split").get<std::string>());
    j.at("content_hash").get_to(s.content_hash);
    s.phash = std::stoull(j.at("phash").get<std::string>(), nullptr, 16);
    s.width = j.value("width", 0);
    s.height = j.value("height", 0);
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
    nlohmann::json report = nlohmann::json::array();
    for (const auto& r : m.dedup_report) {
        report.push_back({{"image", r.image_path},
                          {"source", r.source},
                          {"split", to_string(r.split)},
                          {"matched_test_image", r.matched_test_image},
                          {"reason", r.reason},
                          {"hamming", r.hamming}});
    }
    j = nlohmann::json{{"samples", m.samples}, {"provenance", m.provenance}, {"dedup_report", report}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
    j.at("samples").get_to(m.samples);
    m.provenance = j.value("provenance", std::vector<std::string>{});
    m.dedup_report.clear();
    for (const auto& r : j.value("dedup_report", nlohmann::json::array())) {
        DedupRemoval d;
        r.at("image").get_to(d.image_path);
        r.at("source").get_to(d.source);
        d.split = split_from_string(r.at("split").get<std::string>());
        r.at("matched_test_image").get_to(d.matched_test_image);
        r.at("reason").get_to(d.reason);
        d.hamming = r.value("hamming", 0);
        m.dedup_report.push_back(std::move(d));
    }
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << nlohmann::json(manifest).dump(2) << '\n';
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest " + path.string());
    try {
        return nlohmann::json::parse(in).get<DatasetManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
    }
}

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::map<std::string, fs::path> list_by_stem(const fs::path& dir, const std::set<std::string>& extensions) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto ext = lower(entry.path().extension().string());
        if (extensions.count(ext)) out[entry.path().stem().string()] = entry.path();
    }
    return out;
}

} // namespace

DatasetManifest load_manifest(const fs::path& root, const std::string& source) {
    if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
    const std::string tag = source.empty() ? fs::weakly_canonical(root).filename().string() : source;
    DatasetManifest manifest;
    std::vector<std::string> orphans;
    for (Split split : {Split::Train, Split::Val, Split::Test}) {
        const fs::path base = root / to_string(split);
        const auto images = list_by_stem(base / "images", {".png", ".jpg", ".jpeg"});
        const auto masks = list_by_stem(base / "masks", {".png"});
        for (const auto& [stem, path] : images)
            if (!masks.count(stem)) orphans.push_back("image without mask: " + path.string());
        for (const auto& [stem, path] : masks)
            if (!images.count(stem)) orphans.push_back("mask without image: " + path.string());
        for (const auto& [stem, image_path] : images) {
            auto mask_it = masks.find(stem);
            if (mask_it == masks.end()) continue;
            const Image image = read_image(image_path);
            const Mask mask = read_mask(mask_it->second);
            if (mask.width != image.width || mask.height != image.height) {
                throw ValidationError("mask " + mask_it->second.string() + " is " + std::to_string(mask.width) + "x" +
                                      std::to_string(mask.height) + " but image is " + std::to_string(image.width) +
                                      "x" + std::to_string(image.height));
            }
            Sample s;
            s.image_path = image_path.string();
            s.mask_path = mask_it->second.string();
            s.source = tag;
            s.split = split;
            s.content_hash = content_hash(image);
            s.phash = average_hash(image);
            s.width = image.width;
            s.height = image.height;
            manifest.samples.push_back(std::move(s));
        }
    }
    if (!orphans.empty()) {
        std::string msg = std::to_string(orphans.size()) + " unpaired file(s) under " + root.string() + ": ";
        for (std::size_t i = 0; i < orphans.size(); ++i) msg += (i ? "; " : "") + orphans[i];
        throw ValidationError(msg);
    }
    manifest.provenance.push_back("loaded " + std::to_string(manifest.samples.size()) + " samples from " +
                                  root.string() + " as source '" + tag + "'");
    return manifest;
}

DedupMode dedup_mode_from_string(const std::string& name) {
    if (name == "exact") return DedupMode::Exact;
    if (name == "perceptual") return DedupMode::Perceptual;
    throw ConfigError("unknown dedup mode '" + name + "' (expected exact or perceptual)");
}

DatasetManifest dedup_cross_split(const DatasetManifest& manifest, const DedupOptions& options) {
    std::unordered_map<std::string, const Sample*> test_by_hash;
    std::vector<const Sample*> tests;
    for (const auto& s : manifest.samples) {
        if (s.split != Split::Test) continue;
        test_by_hash.emplace(s.content_hash, &s);
        tests.push_back(&s);
    }
    DatasetManifest out;
    out.provenance = manifest.provenance;
    out.dedup_report = manifest.dedup_report;
    std::size_t removed = 0;
    for (const auto& s : manifest.samples) {
        if (s.split == Split::Test) {
            out.samples.push_back(s);
            continue;
        }
        const Sample* match = nullptr;
        std::string reason;
        int distance = 0;
        if (auto it = test_by_hash.find(s.content_hash); it != test_by_hash.end()) {
            match = it->second;
            reason = "exact";
        } else if (options.mode == DedupMode::Perceptual) {
            int best = options.hamming_threshold + 1;
            for (const Sample* t : tests) {
                const int d = hamming_distance(s.phash, t->phash);
                if (d < best) {
                    best = d;
                    match = t;
                }
            }
            if (match) {
                reason = "perceptual";
                distance = best;
            }
        }
        if (match) {
            out.dedup_report.push_back(
                DedupRemoval{s.image_path, s.source, s.split, match->image_path, reason, distance});
            ++removed;
        } else {
            out.samples.push_back(s);
        }
    }
    out.provenance.push_back(std::string("cross-split dedup (") +
                             (options.mode == DedupMode::Exact ? "exact" : "perceptual, hamming <= " +
                                                                              std::to_string(options.hamming_threshold)) +
                             "): removed " + std::to_string(removed) + " train/val sample(s)");
    return out;
}

DatasetManifest merge_datasets(std::span<const DatasetManifest> manifests, const MergeOptions& options) {
    if (manifests.empty()) throw ConfigError("merge_datasets needs at least one manifest");
    std::set<std::string> test_sources;
    for (const auto& m : manifests)
        for (const auto& s : m.samples)
            if (s.split == Split::Test) test_sources.insert(s.source);
    std::string eval = options.eval_source;
    if (eval.empty()) {
        if (test_sources.size() > 1) {
            std::string names;
            for (const auto& n : test_sources) names += (names.empty() ? "" : ", ") + n;
            throw ConfigError("several sources carry test splits (" + names + "); choose an evaluation source");
        }
        if (!test_sources.empty()) eval = *test_sources.begin();
    } else if (!test_sources.empty() && !test_sources.count(eval)) {
        throw ConfigError("evaluation source '" + eval + "' has no test split");
    }
    DatasetManifest merged;
    std::vector<std::string> names;
    for (const auto& m : manifests) {
        for (const auto& s : m.samples) {
            if (s.split == Split::Test && s.source != eval) continue;
            merged.samples.push_back(s);
        }
        merged.provenance.insert(merged.provenance.end(), m.provenance.begin(), m.provenance.end());
        merged.dedup_report.insert(merged.dedup_report.end(), m.dedup_report.begin(), m.dedup_report.end());
    }
    merged.provenance.push_back("merged " + std::to_string(manifests.size()) + " manifest(s); evaluation source '" +
                                eval + "'");
    return dedup_cross_split(merged, options.dedup);
}

bool splits_disjoint(const DatasetManifest& manifest) {
    std::unordered_set<std::string> test;
    for (const auto& s : manifest.samples)
        if (s.split == Split::Test) test.insert(s.content_hash);
    return std::none_of(manifest.samples.begin(), manifest.samples.end(),
                        [&](const Sample& s) { return s.split != Split::Test && test.count(s.content_hash); });
}

} // namespace waterseg
