#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "waterseg/checkpoint.hpp"
#include "waterseg/dataset.hpp"
#include "waterseg/errors.hpp"
#include "waterseg/experiment.hpp"
#include "waterseg/harness.hpp"
#include "waterseg/lora.hpp"
#include "waterseg/overlay.hpp"
#include "waterseg/segformer.hpp"
#include "waterseg/synth.hpp"

namespace waterseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
    std::string config;
    std::optional<uint64_t> seed;
    std::string out;
};

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + " is not valid JSON: " + e.what());
    }
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

std::string dedup_summary(const DatasetManifest& m) {
    std::string s = "train " + std::to_string(m.count(Split::Train)) + ", val " + std::to_string(m.count(Split::Val)) +
                    ", test " + std::to_string(m.count(Split::Test)) + "; removed " +
                    std::to_string(m.dedup_report.size()) + " duplicate(s)\n";
    for (const auto& r : m.dedup_report) {
        s += "  " + to_string(r.split) + " " + r.image_path + " ~ " + r.matched_test_image + " (" + r.reason;
        if (r.reason == "perceptual") s += ", hamming " + std::to_string(r.hamming);
        s += ")\n";
    }
    return s;
}

// Shared by dedup and merge: load every root, merge (a single root merges
// with itself trivially) and apply the cross-split dedup.
DatasetManifest build_manifest(const std::vector<std::string>& roots, const std::vector<std::string>& sources,
                               const std::string& eval_source, const std::string& mode, int hamming) {
    DataConfig data;
    data.roots = roots;
    data.sources = sources;
    data.eval_source = eval_source;
    data.dedup = mode;
    data.hamming_threshold = hamming;
    if (!sources.empty() && sources.size() != roots.size()) throw ConfigError("--source must name every --root");
    return prepare_manifest(data);
}

RunConfig run_config_from(const Globals& g) {
    RunConfig config = g.config.empty() ? RunConfig{} : load_run_config(g.config);
    if (g.seed) config.seed = *g.seed;
    if (!g.out.empty()) config.out = g.out;
    return config;
}

} // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"waterseg: SegFormer water segmentation toolkit", "waterseg"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "JSON config file");
    app.add_option("--seed", g.seed, "Override the seed");
    app.add_option("--out", g.out, "Output directory");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic water corpus");
    SynthOptions synth_opts;
    synth->add_option("--n", synth_opts.count, "Number of scenes")->check(CLI::PositiveNumber);
    synth->add_option("--size", synth_opts.image_size, "Image side (multiple of 32)");
    synth->add_option("--train-fraction", synth_opts.train_fraction);
    synth->add_option("--val-fraction", synth_opts.val_fraction);

    // dedup / merge
    std::vector<std::string> roots, sources;
    std::string eval_source, dedup_mode = "exact";
    int hamming = 5;
    auto* dedup = app.add_subcommand("dedup", "Remove train/val images that duplicate test images");
    dedup->add_option("--root", roots, "Dataset root")->required();
    dedup->add_option("--mode", dedup_mode)->check(CLI::IsMember({"exact", "perceptual"}));
    dedup->add_option("--hamming", hamming, "Perceptual-hash distance threshold");
    auto* merge = app.add_subcommand("merge", "Merge dataset roots, keeping one evaluation test split");
    merge->add_option("--root", roots, "Dataset roots (repeatable)")->required();
    merge->add_option("--source", sources, "Source names, one per root");
    merge->add_option("--eval-source", eval_source, "Source whose test split is kept");
    merge->add_option("--mode", dedup_mode)->check(CLI::IsMember({"exact", "perceptual"}));
    merge->add_option("--hamming", hamming);

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON run config");

    // eval
    std::string checkpoint, data_root, split_name = "test", averaging = "micro";
    int size = 0;
    double threshold = 0.5;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint manifest (.json)")->required();
    eval->add_option("--data", data_root, "Dataset root (defaults to the config's data)");
    eval->add_option("--split", split_name)->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--size", size, "Working resolution (defaults to the config's image_size)");
    eval->add_option("--averaging", averaging)->check(CLI::IsMember({"micro", "macro"}));
    eval->add_option("--threshold", threshold);

    // predict
    std::string image_path;
    auto* predict = app.add_subcommand("predict", "Write a binary water mask for one image");
    predict->add_option("--checkpoint", checkpoint)->required();
    predict->add_option("--image", image_path)->required();
    predict->add_option("--size", size);
    predict->add_option("--threshold", threshold);

    // experiment
    std::string variants;
    std::vector<uint64_t> seeds;
    auto* experiment = app.add_subcommand("experiment", "Run the data-scaling / LoRA comparison matrix");
    experiment->add_option("--variants", variants, "Comma-separated variants, e.g. subset-25,full,lora");
    experiment->add_option("--seeds", seeds, "Seeds for repeated runs")->delimiter(',');

    // overlay
    std::string gt_path, pred_path;
    double alpha = 0.5;
    auto* overlay = app.add_subcommand("overlay", "Render a TP/FP/FN error overlay");
    overlay->add_option("--image", image_path)->required();
    overlay->add_option("--gt", gt_path, "Ground-truth mask")->required();
    overlay->add_option("--pred", pred_path, "Predicted mask (or use --checkpoint)");
    overlay->add_option("--checkpoint", checkpoint);
    overlay->add_option("--size", size);
    overlay->add_option("--alpha", alpha)->check(CLI::Range(0.0, 1.0));

    // summary
    std::string model_name;
    bool with_lora = false;
    auto* summary = app.add_subcommand("summary", "Print the layer / parameter table");
    summary->add_option("--model", model_name, "nano or b0-like (defaults to the config's model)");
    summary->add_flag("--lora", with_lora, "Inject the configured LoRA adapters first");

    std::vector<const char*> argv{"waterseg"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            app.exit(e, out, err);
            return 0;
        }
        err << "usage error: " << e.what() << "\n\n";
        const CLI::App* shown = &app;
        for (const auto* sub : app.get_subcommands()) shown = sub;
        err << shown->help();
        return 2;
    }

    try {
        if (synth->parsed()) {
            if (g.out.empty()) throw ConfigError("synth needs --out");
            if (g.seed) synth_opts.seed = *g.seed;
            synth_generate(synth_opts, g.out);
            out << "wrote " << synth_opts.count << " scenes to " << g.out << "\n";
        } else if (dedup->parsed() || merge->parsed()) {
            const auto manifest = build_manifest(roots, sources, eval_source, dedup_mode, hamming);
            const fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
            save_manifest(dir / "manifest.json", manifest);
            const auto text = dedup_summary(manifest);
            write_file(dir / "dedup_report.txt", text);
            out << text;
        } else if (train_cmd->parsed()) {
            if (g.config.empty()) throw ConfigError("train needs --config");
            const auto record = train(run_config_from(g));
            out << format_run_report(record);
        } else if (eval->parsed()) {
            RunConfig config = run_config_from(g);
            if (!data_root.empty()) {
                config.data = DataConfig{};
                config.data.roots = {data_root};
            }
            const int working = size > 0 ? size : config.image_size;
            const auto manifest = prepare_manifest(config.data);
            const auto report = evaluate_checkpoint(checkpoint, manifest, split_from_string(split_name), working,
                                                    threshold, averaging_from_string(averaging));
            const auto table = format_metrics_table({{split_name, report}});
            if (!g.out.empty()) {
                write_file(fs::path(g.out) / "eval.json", json(report).dump(2) + "\n");
                write_file(fs::path(g.out) / "eval.txt", table);
            }
            out << table;
        } else if (predict->parsed()) {
            const RunConfig config = run_config_from(g);
            const int working = size > 0 ? size : config.image_size;
            const fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
            const auto target = dir / (fs::path(image_path).stem().string() + "_mask.png");
            const auto mask = predict_file(checkpoint, image_path, target, working, threshold);
            out << "wrote " << target.string() << " (" << mask.water_pixels() << " water pixels)\n";
        } else if (experiment->parsed()) {
            json j = g.config.empty() ? json::object() : read_json_file(g.config);
            if (!variants.empty()) j["variants"] = variants;
            if (!seeds.empty()) j["seeds"] = seeds;
            if (g.seed) j["seed"] = *g.seed;
            if (!g.out.empty()) j["out"] = g.out;
            if (!j.contains("variants")) j["variants"] = "subset-25,subset-50,full,lora";
            const auto result = experiment_matrix(experiment_config_from_json(j));
            out << result.comparison_table << "\n" << result.resource_table;
        } else if (overlay->parsed()) {
            const Image image = read_image(image_path);
            const Mask gt = read_mask(gt_path);
            Mask pred;
            if (!pred_path.empty()) {
                pred = read_mask(pred_path);
            } else if (!checkpoint.empty()) {
                const RunConfig config = run_config_from(g);
                const auto model = load_model(checkpoint);
                pred = predict_mask(model, image, size > 0 ? size : config.image_size, threshold);
            } else {
                throw ConfigError("overlay needs --pred or --checkpoint");
            }
            const fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
            const auto target = dir / (fs::path(image_path).stem().string() + "_overlay.png");
            write_png(target, render_overlay(image, pred, gt, alpha));
            out << "wrote " << target.string() << "\n";
        } else if (summary->parsed()) {
            RunConfig config = g.config.empty() ? RunConfig{} : load_run_config(g.config);
            if (!model_name.empty()) config.model = model_name;
            SegFormerModel<float> model(config.model_config(), g.seed.value_or(config.seed));
            if (with_lora || config.lora.enabled) {
                std::mt19937_64 rng(0);
                for (const auto& w : inject_lora(model, config.lora, rng).warnings) err << "warning: " << w << "\n";
            }
            const auto text = format_summary(model.summary());
            if (!g.out.empty()) write_file(fs::path(g.out) / "summary.txt", text);
            out << text;
        }
    } catch (const Error& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: " << e.kind() << ": " << msg << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        err << "error: internal: " << msg << "\n";
        return 1;
    }
    return 0;
}

} // namespace waterseg
