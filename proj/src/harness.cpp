#include "waterseg/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "waterseg/errors.hpp"
#include "waterseg/ops.hpp"
#include "waterseg/report.hpp"

namespace waterseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return key == k; }))
            throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename V>
void read_opt(const json& j, const char* key, V& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<V>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
        }
    }
}

uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};

struct Loaded {
    std::vector<Image> images;
    std::vector<Mask> masks;
};

Loaded load_split(const std::vector<Sample>& samples, int size) {
    Loaded out;
    for (const auto& s : samples) {
        Image img = read_image(s.image_path);
        Mask mask = read_mask(s.mask_path);
        if (img.width != size || img.height != size) img = resize_bilinear(img, size, size);
        if (mask.width != size || mask.height != size) mask = resize_nearest(mask, size, size);
        out.images.push_back(std::move(img));
        out.masks.push_back(std::move(mask));
    }
    return out;
}

void fill_batch(std::vector<float>& dst, std::size_t offset, const Image& image) {
    const std::size_t plane = static_cast<std::size_t>(image.width) * image.height;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            dst[offset + c * plane + i] = (image.pixels[i * 3 + c] / 255.0f - kMean[c]) / kStd[c];
}

MetricsReport evaluate_loaded(const SegFormerModel<float>& model, const Loaded& data, double threshold,
                              Averaging averaging) {
    if (data.images.empty()) throw ValidationError("evaluate: split is empty");
    const float cut = static_cast<float>(std::log(threshold / (1.0 - threshold)));
    ConfusionMatrix total;
    std::vector<MetricsReport> per_image;
    NoGradGuard guard;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        const auto logits = model.forward(image_to_tensor(data.images[i]));
        const auto d = logits.data();
        Mask pred(data.images[i].width, data.images[i].height);
        for (std::size_t p = 0; p < pred.labels.size(); ++p) pred.labels[p] = d[p] > cut ? 1 : 0;
        ConfusionMatrix cm;
        confusion_accumulate(cm, pred, data.masks[i]);
        total += cm;
        if (averaging == Averaging::Macro) per_image.push_back(compute_metrics(cm));
    }
    reset_tape<float>();
    return averaging == Averaging::Macro ? macro_average(per_image) : compute_metrics(total);
}

json lora_to_json(const LoraSettings& s) {
    return {{"enabled", s.enabled}, {"targets", s.targets}, {"rank", s.rank}, {"alpha", s.alpha}, {"init_std", s.init_std}};
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

} // namespace

ModelConfig RunConfig::model_config() const { return model_config_from_json(model); }

void to_json(json& j, const RunConfig& c) {
    j = json{{"model", c.model},
             {"image_size", c.image_size},
             {"data",
              {{"roots", c.data.roots},
               {"sources", c.data.sources},
               {"manifest", c.data.manifest},
               {"eval_source", c.data.eval_source},
               {"dedup", c.data.dedup},
               {"hamming_threshold", c.data.hamming_threshold},
               {"train_fraction", c.data.train_fraction},
               {"subset_seed", c.data.subset_seed}}},
             {"lora", lora_to_json(c.lora)},
             {"optimizer",
              {{"lr", c.optimizer.lr},
               {"beta1", c.optimizer.beta1},
               {"beta2", c.optimizer.beta2},
               {"eps", c.optimizer.eps},
               {"weight_decay", c.optimizer.weight_decay}}},
             {"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"seed", c.seed},
             {"augment", c.augment},
             {"augment_options",
              {{"flip_probability", c.augment_options.flip_probability},
               {"min_crop_area", c.augment_options.min_crop_area},
               {"max_crop_area", c.augment_options.max_crop_area},
               {"brightness", c.augment_options.brightness},
               {"contrast", c.augment_options.contrast},
               {"photometric", c.augment_options.photometric}}},
             {"threshold", c.threshold},
             {"averaging", c.averaging},
             {"init_checkpoint", c.init_checkpoint},
             {"save_checkpoints", c.save_checkpoints},
             {"out", c.out}};
}

void from_json(const json& j, RunConfig& c) {
    check_keys(j,
               {"model", "image_size", "data", "lora", "optimizer", "epochs", "batch_size", "seed", "augment",
                "augment_options", "threshold", "averaging", "init_checkpoint", "save_checkpoints", "out"},
               "run config");
    if (j.contains("model")) c.model = j.at("model");
    read_opt(j, "image_size", c.image_size);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d,
                   {"roots", "sources", "manifest", "eval_source", "dedup", "hamming_threshold", "train_fraction",
                    "subset_seed"},
                   "data");
        if (d.contains("roots") && d.at("roots").is_string())
            c.data.roots = {d.at("roots").get<std::string>()};
        else
            read_opt(d, "roots", c.data.roots);
        read_opt(d, "sources", c.data.sources);
        read_opt(d, "manifest", c.data.manifest);
        read_opt(d, "eval_source", c.data.eval_source);
        read_opt(d, "dedup", c.data.dedup);
        read_opt(d, "hamming_threshold", c.data.hamming_threshold);
        read_opt(d, "train_fraction", c.data.train_fraction);
        read_opt(d, "subset_seed", c.data.subset_seed);
    }
    if (j.contains("lora")) {
        const auto& l = j.at("lora");
        check_keys(l, {"enabled", "targets", "rank", "alpha", "init_std"}, "lora");
        read_opt(l, "enabled", c.lora.enabled);
        read_opt(l, "targets", c.lora.targets);
        read_opt(l, "rank", c.lora.rank);
        if (l.contains("alpha"))
            read_opt(l, "alpha", c.lora.alpha);
        else if (l.contains("rank"))
            c.lora.alpha = 2.0 * c.lora.rank;
        read_opt(l, "init_std", c.lora.init_std);
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        check_keys(o, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
        read_opt(o, "lr", c.optimizer.lr);
        read_opt(o, "beta1", c.optimizer.beta1);
        read_opt(o, "beta2", c.optimizer.beta2);
        read_opt(o, "eps", c.optimizer.eps);
        read_opt(o, "weight_decay", c.optimizer.weight_decay);
    }
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "seed", c.seed);
    read_opt(j, "augment", c.augment);
    if (j.contains("augment_options")) {
        const auto& a = j.at("augment_options");
        check_keys(a, {"flip_probability", "min_crop_area", "max_crop_area", "brightness", "contrast", "photometric"},
                   "augment_options");
        read_opt(a, "flip_probability", c.augment_options.flip_probability);
        read_opt(a, "min_crop_area", c.augment_options.min_crop_area);
        read_opt(a, "max_crop_area", c.augment_options.max_crop_area);
        read_opt(a, "brightness", c.augment_options.brightness);
        read_opt(a, "contrast", c.augment_options.contrast);
        read_opt(a, "photometric", c.augment_options.photometric);
    }
    read_opt(j, "threshold", c.threshold);
    read_opt(j, "averaging", c.averaging);
    read_opt(j, "init_checkpoint", c.init_checkpoint);
    read_opt(j, "save_checkpoints", c.save_checkpoints);
    read_opt(j, "out", c.out);

    if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (c.image_size < 32 || c.image_size % 32 != 0)
        throw ConfigError("image_size must be a positive multiple of 32, got " + std::to_string(c.image_size));
    if (!(c.threshold > 0 && c.threshold < 1)) throw ConfigError("threshold must lie in (0, 1)");
    if (!(c.data.train_fraction > 0 && c.data.train_fraction <= 1)) throw ConfigError("train_fraction must lie in (0, 1]");
    if (!c.data.sources.empty() && c.data.sources.size() != c.data.roots.size())
        throw ConfigError("data.sources must name every root");
    averaging_from_string(c.averaging);
    dedup_mode_from_string(c.data.dedup);
    c.model_config().validate();
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return j.get<RunConfig>();
}

double RunRecord::seconds_per_epoch() const {
    if (epochs.empty()) return 0;
    double total = 0;
    for (const auto& e : epochs) total += e.seconds;
    return total / static_cast<double>(epochs.size());
}

const MetricsReport& RunRecord::primary_metrics() const {
    for (const char* split : {"test", "val", "train"}) {
        const auto it = metrics.find(split);
        if (it != metrics.end()) return it->second;
    }
    throw StateError("run record holds no metrics");
}

void to_json(json& j, const RunRecord& r) {
    json epochs = json::array();
    for (const auto& e : r.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"seconds", std::round(e.seconds * 1000.0) / 1000.0},
                          {"loss", e.loss},
                          {"steps", e.steps},
                          {"val_iou", e.val_iou ? json(*e.val_iou) : json(nullptr)}});
    }
    json metrics = json::object();
    for (const auto& [split, report] : r.metrics) metrics[split] = report;
    j = json{{"config", r.config},
             {"epochs", epochs},
             {"steps", r.steps},
             {"seconds_per_epoch", std::round(r.seconds_per_epoch() * 1000.0) / 1000.0},
             {"selected_epoch", r.selected_epoch},
             {"metrics", metrics},
             {"params", {{"total", r.total_params}, {"trainable", r.trainable_params}}},
             {"lora_warnings", r.lora_warnings},
             {"checkpoints", {{"best", r.best_checkpoint}, {"final", r.final_checkpoint}}}};
}

DatasetManifest prepare_manifest(const DataConfig& data) {
    DatasetManifest manifest;
    MergeOptions merge;
    merge.eval_source = data.eval_source;
    merge.dedup.mode = dedup_mode_from_string(data.dedup);
    merge.dedup.hamming_threshold = data.hamming_threshold;
    if (!data.manifest.empty()) {
        const DatasetManifest stored = read_manifest(data.manifest);
        manifest = merge_datasets(std::span(&stored, 1), merge);
    } else {
        if (data.roots.empty()) throw ConfigError("no data roots configured");
        std::vector<DatasetManifest> parts;
        for (std::size_t i = 0; i < data.roots.size(); ++i)
            parts.push_back(load_manifest(data.roots[i], data.sources.empty() ? "" : data.sources[i]));
        manifest = merge_datasets(parts, merge);
    }
    if (data.train_fraction < 1.0) {
        std::vector<std::size_t> train_idx;
        for (std::size_t i = 0; i < manifest.samples.size(); ++i)
            if (manifest.samples[i].split == Split::Train) train_idx.push_back(i);
        // Order by hash before shuffling so the subset does not depend on
        // directory listing order.
        std::sort(train_idx.begin(), train_idx.end(), [&](std::size_t a, std::size_t b) {
            return manifest.samples[a].content_hash < manifest.samples[b].content_hash;
        });
        std::mt19937_64 rng(mix(data.subset_seed, 0x5B5E7));
        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        const auto keep = static_cast<std::size_t>(
            std::max<long>(1, std::lround(data.train_fraction * static_cast<double>(train_idx.size()))));
        std::set<std::size_t> dropped(train_idx.begin() + static_cast<long>(std::min(keep, train_idx.size())),
                                      train_idx.end());
        DatasetManifest subset;
        subset.provenance = manifest.provenance;
        subset.dedup_report = manifest.dedup_report;
        for (std::size_t i = 0; i < manifest.samples.size(); ++i)
            if (!dropped.count(i)) subset.samples.push_back(manifest.samples[i]);
        subset.provenance.push_back("kept " + std::to_string(std::min(keep, train_idx.size())) + " of " +
                                    std::to_string(train_idx.size()) + " training samples");
        manifest = std::move(subset);
    }
    return manifest;
}

Tensor image_to_tensor(const Image& image) {
    if (image.channels != 3) throw ShapeError("expected an RGB image, got " + std::to_string(image.channels) + " channels");
    std::vector<float> data(static_cast<std::size_t>(3) * image.width * image.height);
    fill_batch(data, 0, image);
    return Tensor::from_data({1, 3, image.height, image.width}, std::move(data));
}

Mask predict_mask(const SegFormerModel<float>& model, const Image& image, int image_size, double threshold) {
    const Image input =
        (image.width == image_size && image.height == image_size) ? image : resize_bilinear(image, image_size, image_size);
    const float cut = static_cast<float>(std::log(threshold / (1.0 - threshold)));
    Mask pred(image_size, image_size);
    {
        NoGradGuard guard;
        const auto logits = model.forward(image_to_tensor(input));
        const auto d = logits.data();
        for (std::size_t p = 0; p < pred.labels.size(); ++p) pred.labels[p] = d[p] > cut ? 1 : 0;
    }
    reset_tape<float>();
    if (image.width != image_size || image.height != image_size) pred = resize_nearest(pred, image.width, image.height);
    return pred;
}

Predictor make_predictor(const SegFormerModel<float>& model, int image_size, double threshold) {
    return [&model, image_size, threshold](const Image& image) { return predict_mask(model, image, image_size, threshold); };
}

RunRecord train(const RunConfig& config) {
    const ModelConfig model_config = config.model_config();
    model_config.validate();
    const Averaging averaging = averaging_from_string(config.averaging);
    const fs::path out(config.out);

    const DatasetManifest manifest = prepare_manifest(config.data);
    const auto train_samples = manifest.split(Split::Train);
    if (train_samples.empty()) throw ValidationError("training split is empty");
    const Loaded train_data = load_split(train_samples, config.image_size);
    const Loaded val_data = load_split(manifest.split(Split::Val), config.image_size);
    const Loaded test_data = load_split(manifest.split(Split::Test), config.image_size);

    SegFormerModel<float> model(model_config, config.seed);
    if (!config.init_checkpoint.empty()) {
        const auto init = read_checkpoint(config.init_checkpoint);
        if (checkpoint_model_config(init) != model_config)
            throw ConfigError("init checkpoint " + config.init_checkpoint + " was built for a different model config");
        apply_checkpoint(model, init);
    }
    RunRecord record;
    record.config = config;
    if (config.lora.enabled) {
        std::mt19937_64 lora_rng(mix(config.seed, 0x10A));
        record.lora_warnings = inject_lora(model, config.lora, lora_rng).warnings;
    }
    const auto report = trainable_param_report(model);
    record.trainable_params = report.trainable;
    record.total_params = model.param_count(false);

    auto params = model.parameter_tensors();
    std::vector<Tensor> trainable;
    for (auto& p : params)
        if (p.requires_grad()) trainable.push_back(p);
    AdamWState<float> opt_state;

    const int n = static_cast<int>(train_data.images.size());
    const int size = config.image_size;
    const std::size_t per_image = static_cast<std::size_t>(3) * size * size;
    std::optional<Checkpoint> best;
    std::optional<double> best_iou;

    std::vector<int> order(static_cast<std::size_t>(n));
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle_rng(mix(config.seed, static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochRecord er;
        er.epoch = epoch;
        double loss_sum = 0;
        const auto start = std::chrono::steady_clock::now();
        for (int first = 0; first < n; first += config.batch_size) {
            const int b = std::min(config.batch_size, n - first);
            std::vector<float> x(per_image * b);
            std::vector<float> y(static_cast<std::size_t>(size) * size * b);
            for (int k = 0; k < b; ++k) {
                const int idx = order[static_cast<std::size_t>(first + k)];
                const Image* img = &train_data.images[idx];
                const Mask* mask = &train_data.masks[idx];
                AugmentedPair aug;
                if (config.augment) {
                    aug = augment(*img, *mask, mix(mix(config.seed, epoch), static_cast<uint64_t>(idx)),
                                  config.augment_options);
                    img = &aug.image;
                    mask = &aug.mask;
                }
                fill_batch(x, per_image * k, *img);
                std::transform(mask->labels.begin(), mask->labels.end(), y.begin() + static_cast<long>(size) * size * k,
                               [](uint8_t v) { return static_cast<float>(v); });
            }
            reset_tape<float>();
            const auto input = Tensor::from_data({b, 3, size, size}, std::move(x));
            const auto target = Tensor::from_data({b, 1, size, size}, std::move(y));
            const auto logits = model.forward(input);
            const auto loss = ops::binary_cross_entropy_with_logits(logits, target);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw DivergenceError("loss became " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                                      ", step " + std::to_string(record.steps + 1) + " (lr " +
                                      std::to_string(config.optimizer.lr) + ")");
            }
            for (auto& p : trainable) p.zero_grad();
            backward(loss);
            adamw_step(std::span<Tensor>(trainable), opt_state, config.optimizer);
            reset_tape<float>();
            loss_sum += value * b;
            ++er.steps;
            ++record.steps;
        }
        er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        er.loss = loss_sum / n;
        if (!val_data.images.empty()) {
            const auto val = evaluate_loaded(model, val_data, config.threshold, averaging);
            er.val_iou = val.iou.value_or(0.0);
            if (!best_iou || *er.val_iou > *best_iou) {
                best_iou = er.val_iou;
                best = make_checkpoint(model, json{{"epoch", epoch}, {"seed", config.seed}});
                record.selected_epoch = epoch;
            }
        }
        record.epochs.push_back(er);
    }

    const Checkpoint final_ckpt = make_checkpoint(model, json{{"epoch", config.epochs}, {"seed", config.seed}});
    if (!best) {
        best = final_ckpt;
        record.selected_epoch = config.epochs;
    }
    if (config.save_checkpoints) {
        record.final_checkpoint = (out / "checkpoints" / "final.json").string();
        record.best_checkpoint = (out / "checkpoints" / "best.json").string();
        write_checkpoint(final_ckpt, record.final_checkpoint);
        write_checkpoint(*best, record.best_checkpoint);
        if (config.lora.enabled) save_adapters(model, out / "checkpoints" / "final_adapter.json");
    }

    apply_checkpoint(model, *best);
    record.metrics["train"] = evaluate_loaded(model, train_data, config.threshold, averaging);
    if (!val_data.images.empty()) record.metrics["val"] = evaluate_loaded(model, val_data, config.threshold, averaging);
    if (!test_data.images.empty())
        record.metrics["test"] = evaluate_loaded(model, test_data, config.threshold, averaging);

    write_text(out / "run.json", json(record).dump(2) + "\n");
    write_text(out / "report.txt", format_run_report(record));
    save_manifest(out / "manifest.json", manifest);
    return record;
}

MetricsReport evaluate_checkpoint(const fs::path& checkpoint, const DatasetManifest& manifest, Split split,
                                  int image_size, double threshold, Averaging averaging) {
    const auto model = load_model(checkpoint);
    const auto samples = manifest.split(split);
    if (samples.empty()) throw ValidationError("evaluate: " + to_string(split) + " split is empty");
    return evaluate_dataset(make_predictor(model, image_size, threshold), samples, EvalOptions{image_size, averaging});
}

Mask predict_file(const fs::path& checkpoint, const fs::path& image_path, const fs::path& out_png, int image_size,
                  double threshold) {
    const auto model = load_model(checkpoint);
    const Mask mask = predict_mask(model, read_image(image_path), image_size, threshold);
    write_mask_png(out_png, mask);
    return mask;
}

std::string format_run_report(const RunRecord& r) {
    std::ostringstream os;
    os << "model: " << (r.config.model.is_string() ? r.config.model.get<std::string>() : r.config.model.dump()) << "\n";
    os << "parameters: " << r.total_params << " total, " << r.trainable_params << " trainable\n";
    os << "steps: " << r.steps << ", selected epoch: " << r.selected_epoch << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", r.seconds_per_epoch());
    os << "seconds/epoch: " << buf << "\n\n";
    std::vector<MetricsRow> rows;
    for (const char* split : {"train", "val", "test"}) {
        const auto it = r.metrics.find(split);
        if (it != r.metrics.end()) rows.push_back({split, it->second});
    }
    os << format_metrics_table(rows);
    return os.str();
}

} // namespace waterseg
