#include "waterseg/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "waterseg/errors.hpp"
#include "waterseg/report.hpp"

namespace waterseg {

namespace fs = std::filesystem;
using nlohmann::json;

VariantSpec variant_from_name(const std::string& name) {
    VariantSpec v;
    v.name = name;
    if (name == "full") {
        v.label = "Full Dataset";
    } else if (name == "full-ft") {
        v.label = "Full Fine-Tune";
        v.from_pretrained = true;
    } else if (name == "lora") {
        v.label = "LoRA Training";
        v.lora = true;
        v.from_pretrained = true;
    } else if (name.rfind("subset-", 0) == 0) {
        const std::string pct = name.substr(7);
        char* end = nullptr;
        const double value = std::strtod(pct.c_str(), &end);
        if (pct.empty() || *end != '\0' || !(value > 0 && value <= 100))
            throw ConfigError("bad subset variant '" + name + "' (expected subset-<percent>)");
        v.train_fraction = value / 100.0;
        v.label = pct + "% Subset";
    } else {
        throw ConfigError("unknown variant '" + name + "' (known: subset-<pct>, full, full-ft, lora)");
    }
    return v;
}

VariantSpec variant_from_json(const json& j) {
    if (j.is_string()) return variant_from_name(j.get<std::string>());
    if (!j.is_object() || !j.contains("name")) throw ConfigError("variant must be a name or an object with a name");
    VariantSpec v;
    const auto name = j.at("name").get<std::string>();
    try {
        v = variant_from_name(name);
    } catch (const ConfigError&) {
        v.name = name;
        v.label = name;
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "name") continue;
        if (key == "label") v.label = value.get<std::string>();
        else if (key == "train_fraction") v.train_fraction = value.get<double>();
        else if (key == "lora") v.lora = value.get<bool>();
        else if (key == "from_pretrained") v.from_pretrained = value.get<bool>();
        else if (key == "data") v.data = value;
        else throw ConfigError("unknown key '" + key + "' in variant " + name);
    }
    return v;
}

ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    json base = j;
    for (const char* key : {"variants", "seeds", "pretrain", "datasets_label"}) base.erase(key);
    c.base = base.get<RunConfig>();
    if (j.contains("variants")) {
        const auto& vs = j.at("variants");
        if (vs.is_string()) {
            std::string list = vs.get<std::string>();
            std::size_t pos = 0;
            while (pos <= list.size()) {
                const auto comma = list.find(',', pos);
                const auto item = list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
                if (!item.empty()) c.variants.push_back(variant_from_name(item));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
        } else {
            for (const auto& v : vs) c.variants.push_back(variant_from_json(v));
        }
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("pretrain")) c.pretrain = j.at("pretrain");
    if (j.contains("datasets_label")) c.datasets_label = j.at("datasets_label").get<std::string>();
    return c;
}

double median(std::vector<double> values) {
    if (values.empty()) throw ValidationError("median of nothing");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

RunConfig variant_config(const RunConfig& base, const VariantSpec& v, uint64_t seed, const std::string& out,
                         const std::string& init) {
    json j = base;
    if (!v.data.is_null()) j["data"].merge_patch(v.data);
    if (!v.data.is_object() || !v.data.contains("train_fraction")) j["data"]["train_fraction"] = v.train_fraction;
    j["lora"]["enabled"] = v.lora;
    j["seed"] = seed;
    j["out"] = out;
    j["init_checkpoint"] = init;
    return j.get<RunConfig>();
}

std::vector<std::string> test_hashes(const DataConfig& data) {
    std::vector<std::string> hashes;
    for (const auto& s : prepare_manifest(data).split(Split::Test)) hashes.push_back(s.content_hash);
    std::sort(hashes.begin(), hashes.end());
    return hashes;
}

std::string datasets_column(const ExperimentConfig& config, const RunConfig& run) {
    std::string label = config.datasets_label;
    if (label.empty()) {
        const auto& names = run.data.sources.empty() ? run.data.roots : run.data.sources;
        for (const auto& n : names) {
            const std::string shown = run.data.sources.empty() ? fs::path(n).lexically_normal().filename().string() : n;
            label += (label.empty() ? "" : " + ") + (shown.empty() ? n : shown);
        }
        if (label.empty()) label = fs::path(run.data.manifest).stem().string();
    }
    if (run.data.train_fraction < 1.0) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), " (%g%%)", run.data.train_fraction * 100.0);
        label += buf;
    }
    return label;
}

} // namespace

ExperimentResult experiment_matrix(const ExperimentConfig& config) {
    if (config.variants.size() < 2) throw ConfigError("experiment needs at least two variants");
    const std::vector<uint64_t> seeds = config.seeds.empty() ? std::vector<uint64_t>{config.base.seed} : config.seeds;
    const fs::path root(config.base.out);

    std::vector<std::string> reference;
    for (std::size_t i = 0; i < config.variants.size(); ++i) {
        const auto& v = config.variants[i];
        const auto hashes = test_hashes(variant_config(config.base, v, seeds[0], "", "").data);
        if (i == 0) {
            reference = hashes;
        } else if (hashes != reference) {
            throw ValidationError("variants " + config.variants[0].name + " and " + v.name +
                                  " evaluate on different test splits (" + std::to_string(reference.size()) + " vs " +
                                  std::to_string(hashes.size()) + " images); the comparison would be invalid");
        }
    }
    if (reference.empty()) throw ValidationError("experiment variants have no test split");

    ExperimentResult result;
    std::string init;
    const bool needs_base = std::any_of(config.variants.begin(), config.variants.end(),
                                        [](const VariantSpec& v) { return v.from_pretrained; });
    if (needs_base) {
        json j = config.base;
        j["lora"]["enabled"] = false;
        j["init_checkpoint"] = "";
        j["save_checkpoints"] = true;
        j["data"]["train_fraction"] = 0.25;
        j.merge_patch(config.pretrain);
        j["out"] = (root / "pretrain").string();
        result.pretrain = train(j.get<RunConfig>());
        init = result.pretrain->best_checkpoint;
    }

    for (const auto& v : config.variants) {
        VariantResult vr;
        vr.spec = v;
        std::vector<double> ious;
        std::vector<double> secs;
        for (const auto seed : seeds) {
            const auto run_cfg = variant_config(config.base, v, seed,
                                                (root / v.name / ("seed-" + std::to_string(seed))).string(),
                                                v.from_pretrained ? init : "");
            if (vr.datasets.empty()) vr.datasets = datasets_column(config, run_cfg);
            auto record = train(run_cfg);
            ious.push_back(record.primary_metrics().iou.value_or(0.0));
            secs.push_back(record.seconds_per_epoch());
            vr.trainable_params = record.trainable_params;
            vr.total_params = record.total_params;
            vr.runs.push_back(std::move(record));
        }
        vr.median_iou = median(ious);
        vr.seconds_per_epoch = median(secs);
        result.variants.push_back(std::move(vr));
    }
    result.comparison_table = format_comparison_table(result.variants);
    result.resource_table = format_resource_table(result.variants);

    fs::create_directories(root);
    std::ofstream(root / "experiment.json") << json(result).dump(2) << '\n';
    std::ofstream(root / "tables.txt") << result.comparison_table << '\n' << result.resource_table;
    return result;
}

std::string format_comparison_table(const std::vector<VariantResult>& rows) {
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) cells.push_back({r.spec.label, r.datasets, format_fraction(r.median_iou)});
    return format_table({"Configuration", "Datasets", "IoU"}, cells);
}

std::string format_resource_table(const std::vector<VariantResult>& rows) {
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) {
        char secs[32], millions[32];
        std::snprintf(secs, sizeof(secs), "%.2f", r.seconds_per_epoch);
        std::snprintf(millions, sizeof(millions), "%.3f", static_cast<double>(r.trainable_params) / 1e6);
        cells.push_back({r.spec.label, secs, millions, std::to_string(r.trainable_params), std::to_string(r.total_params)});
    }
    return format_table({"Configuration", "Training Time (seconds/epoch)", "Parameter Count (M)", "Trainable Parameters",
                         "Total Parameters"},
                        cells);
}

void to_json(json& j, const ExperimentResult& r) {
    json variants = json::array();
    for (const auto& v : r.variants) {
        json runs = json::array();
        for (const auto& run : v.runs)
            runs.push_back({{"seed", run.config.seed},
                            {"iou", run.primary_metrics().iou ? json(*run.primary_metrics().iou) : json(nullptr)},
                            {"seconds_per_epoch", run.seconds_per_epoch()},
                            {"out", run.config.out}});
        variants.push_back({{"name", v.spec.name},
                            {"label", v.spec.label},
                            {"datasets", v.datasets},
                            {"median_iou", v.median_iou},
                            {"seconds_per_epoch", std::round(v.seconds_per_epoch * 1000.0) / 1000.0},
                            {"trainable_params", v.trainable_params},
                            {"total_params", v.total_params},
                            {"runs", runs}});
    }
    j = json{{"variants", variants},
             {"pretrain", r.pretrain ? json(r.pretrain->config.out) : json(nullptr)},
             {"comparison_table", r.comparison_table},
             {"resource_table", r.resource_table}};
}

} // namespace waterseg
