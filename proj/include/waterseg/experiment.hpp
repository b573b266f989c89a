#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "waterseg/harness.hpp"

namespace waterseg {

struct VariantSpec {
    std::string name;
    std::string label;          // "Configuration" column
    double train_fraction = 1.0;
    bool lora = false;
    bool from_pretrained = false; // start from the shared pretrained base
    nlohmann::json data;          // optional overrides of the base data section
};

// Built-ins: subset-<pct>, full, full-ft, lora.
VariantSpec variant_from_name(const std::string& name);
VariantSpec variant_from_json(const nlohmann::json& j);

struct ExperimentConfig {
    RunConfig base;
    std::vector<VariantSpec> variants;
    std::vector<uint64_t> seeds; // empty: base.seed only
    // Overrides applied to `base` for the pretraining run shared by variants
    // with from_pretrained. Defaults to a quarter of the training split.
    nlohmann::json pretrain = nlohmann::json::object();
    std::string datasets_label; // "Datasets" column; defaults to the source names
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

struct VariantResult {
    VariantSpec spec;
    std::string datasets;
    std::vector<RunRecord> runs;
    double median_iou = 0;
    double seconds_per_epoch = 0;
    int64_t trainable_params = 0;
    int64_t total_params = 0;
};

struct ExperimentResult {
    std::vector<VariantResult> variants;
    std::optional<RunRecord> pretrain;
    std::string comparison_table; // Configuration | Datasets | IoU
    std::string resource_table;   // seconds/epoch and parameter counts
};

// Needs at least two variants; all of them must evaluate on the same test
// split. Runs land in <base.out>/<variant>/seed-<s>.
ExperimentResult experiment_matrix(const ExperimentConfig& config);

std::string format_comparison_table(const std::vector<VariantResult>& rows);
std::string format_resource_table(const std::vector<VariantResult>& rows);

double median(std::vector<double> values);

void to_json(nlohmann::json& j, const ExperimentResult& r);

} // namespace waterseg
