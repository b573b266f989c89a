#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "waterseg/augment.hpp"
#include "waterseg/checkpoint.hpp"
#include "waterseg/dataset.hpp"
#include "waterseg/lora.hpp"
#include "waterseg/metrics.hpp"
#include "waterseg/optim.hpp"
#include "waterseg/segformer.hpp"

namespace waterseg {

struct DataConfig {
    std::vector<std::string> roots;   // dataset trees, merged in order
    std::vector<std::string> sources; // optional names, one per root
    std::string manifest;             // prebuilt manifest JSON, used instead of roots when set
    std::string eval_source;
    std::string dedup = "exact"; // exact | perceptual
    int hamming_threshold = 5;
    double train_fraction = 1.0; // keep this share of the training split
    uint64_t subset_seed = 0;    // nested subsets: 25% is a prefix of 50%
};

struct RunConfig {
    nlohmann::json model = "nano";
    int image_size = 64;
    DataConfig data;
    LoraSettings lora;
    AdamWConfig optimizer;
    int epochs = 10;
    int batch_size = 8;
    uint64_t seed = 0;
    bool augment = true;
    AugmentOptions augment_options;
    double threshold = 0.5;
    std::string averaging = "micro";
    std::string init_checkpoint; // full checkpoint to start from (weights only)
    bool save_checkpoints = true;
    std::string out = "runs/default";

    ModelConfig model_config() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

struct EpochRecord {
    int epoch = 0;
    double seconds = 0;
    double loss = 0;
    int steps = 0;
    std::optional<double> val_iou;
};

struct RunRecord {
    RunConfig config;
    std::vector<EpochRecord> epochs;
    int64_t steps = 0;
    int selected_epoch = 0; // epoch whose weights produced `metrics`
    std::map<std::string, MetricsReport> metrics; // keyed by split name
    int64_t total_params = 0;
    int64_t trainable_params = 0;
    std::vector<std::string> lora_warnings;
    std::string best_checkpoint;
    std::string final_checkpoint;

    double seconds_per_epoch() const;
    const MetricsReport& primary_metrics() const; // test when present, else val, else train
};

void to_json(nlohmann::json& j, const RunRecord& r);

// Loads, merges, dedups and subsets the configured data.
DatasetManifest prepare_manifest(const DataConfig& data);

// Normalized [1,3,H,W] input for the network.
Tensor image_to_tensor(const Image& image);

// Thresholded prediction at the model's working size, resized back to the
// image's own size with nearest neighbour.
Mask predict_mask(const SegFormerModel<float>& model, const Image& image, int image_size, double threshold = 0.5);

Predictor make_predictor(const SegFormerModel<float>& model, int image_size, double threshold = 0.5);

// Writes run.json, report.txt and checkpoints under config.out.
RunRecord train(const RunConfig& config);

MetricsReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const DatasetManifest& manifest, Split split,
                                  int image_size, double threshold = 0.5, Averaging averaging = Averaging::Micro);

// Binary 0/255 PNG at the input image's resolution.
Mask predict_file(const std::filesystem::path& checkpoint, const std::filesystem::path& image_path,
                  const std::filesystem::path& out_png, int image_size, double threshold = 0.5);

std::string format_run_report(const RunRecord& record);

} // namespace waterseg
