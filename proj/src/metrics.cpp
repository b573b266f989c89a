#include "waterseg/metrics.hpp"

#include <cstdio>

#include "waterseg/errors.hpp"
#include "waterseg/report.hpp"

namespace waterseg {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    tp += other.tp;
    fp += other.fp;
    fn += other.fn;
    tn += other.tn;
    return *this;
}

ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }

void confusion_accumulate(ConfusionMatrix& cm, std::span<const uint8_t> pred, std::span<const uint8_t> gt) {
    if (pred.size() != gt.size()) {
        throw ShapeError("confusion: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                         std::to_string(gt.size()));
    }
    // counts[2*pred + gt]: 0 TN, 1 FN, 2 FP, 3 TP
    uint64_t counts[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const uint8_t p = pred[i], g = gt[i];
        if ((p | g) > 1) throw ValidationError("confusion: masks must be binary (0/1)");
        ++counts[2 * p + g];
    }
    cm.tn += counts[0];
    cm.fn += counts[1];
    cm.fp += counts[2];
    cm.tp += counts[3];
}

void confusion_accumulate(ConfusionMatrix& cm, const Mask& pred, const Mask& gt) {
    if (pred.width != gt.width || pred.height != gt.height) {
        throw ShapeError("confusion: prediction " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                         " and ground truth " + std::to_string(gt.width) + "x" + std::to_string(gt.height) +
                         " differ");
    }
    confusion_accumulate(cm, pred.labels, gt.labels);
}

namespace {

std::optional<double> ratio(uint64_t num, uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

} // namespace

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ValidationError("metrics: empty confusion matrix");
    MetricsReport r;
    r.counts = cm;
    r.overall_accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
    r.precision = ratio(cm.tp, cm.tp + cm.fp);
    r.recall = ratio(cm.tp, cm.tp + cm.fn);
    r.f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn);
    r.iou = ratio(cm.tp, cm.tp + cm.fp + cm.fn);
    return r;
}

MetricsReport macro_average(std::span<const MetricsReport> reports) {
    if (reports.empty()) throw ValidationError("metrics: nothing to average");
    MetricsReport out;
    double oa = 0;
    struct Acc {
        double sum = 0;
        int n = 0;
        void add(const std::optional<double>& v) {
            if (v) {
                sum += *v;
                ++n;
            }
        }
        std::optional<double> value() const { return n ? std::optional<double>(sum / n) : std::nullopt; }
    } precision, recall, f1, iou;
    for (const auto& r : reports) {
        out.counts += r.counts;
        oa += r.overall_accuracy;
        precision.add(r.precision);
        recall.add(r.recall);
        f1.add(r.f1);
        iou.add(r.iou);
    }
    out.overall_accuracy = oa / static_cast<double>(reports.size());
    out.precision = precision.value();
    out.recall = recall.value();
    out.f1 = f1.value();
    out.iou = iou.value();
    return out;
}

Averaging averaging_from_string(const std::string& name) {
    if (name == "micro") return Averaging::Micro;
    if (name == "macro") return Averaging::Macro;
    throw ConfigError("unknown averaging '" + name + "' (expected micro or macro)");
}

MetricsReport evaluate_dataset(const Predictor& predict, std::span<const Sample> samples, const EvalOptions& options) {
    if (samples.empty()) throw ValidationError("evaluate: split is empty");
    ConfusionMatrix total;
    std::vector<MetricsReport> per_image;
    for (const auto& s : samples) {
        Image image = read_image(s.image_path);
        Mask gt = read_mask(s.mask_path);
        if (options.image_size > 0) {
            image = resize_bilinear(image, options.image_size, options.image_size);
            gt = resize_nearest(gt, options.image_size, options.image_size);
        }
        const Mask pred = predict(image);
        ConfusionMatrix cm;
        confusion_accumulate(cm, pred, gt);
        total += cm;
        if (options.averaging == Averaging::Macro) per_image.push_back(compute_metrics(cm));
    }
    if (options.averaging == Averaging::Macro) return macro_average(per_image);
    return compute_metrics(total);
}

std::string format_fraction(const std::optional<double>& value) {
    if (!value) return "undefined";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.5f", *value);
    return buf;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    j = nlohmann::json{{"oa", r.overall_accuracy},
                       {"iou", opt(r.iou)},
                       {"precision", opt(r.precision)},
                       {"recall", opt(r.recall)},
                       {"f1", opt(r.f1)},
                       {"tp", r.counts.tp},
                       {"fp", r.counts.fp},
                       {"fn", r.counts.fn},
                       {"tn", r.counts.tn}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
    auto opt = [&](const char* key) {
        return j.contains(key) && !j.at(key).is_null() ? std::optional<double>(j.at(key).get<double>())
                                                       : std::nullopt;
    };
    MetricsReport r;
    r.overall_accuracy = j.at("oa").get<double>();
    r.iou = opt("iou");
    r.precision = opt("precision");
    r.recall = opt("recall");
    r.f1 = opt("f1");
    r.counts = ConfusionMatrix{j.value("tp", uint64_t{0}), j.value("fp", uint64_t{0}), j.value("fn", uint64_t{0}),
                               j.value("tn", uint64_t{0})};
    return r;
}

std::string format_metrics_table(const std::vector<MetricsRow>& rows) {
    std::vector<std::vector<std::string>> cells;
    for (const auto& row : rows) {
        cells.push_back({row.model, format_fraction(row.report.overall_accuracy), format_fraction(row.report.iou),
                         format_fraction(row.report.precision), format_fraction(row.report.recall),
                         format_fraction(row.report.f1)});
    }
    return format_table({"Model", "OA", "IoU", "Precision", "Recall", "F_S"}, cells);
}

} // namespace waterseg
