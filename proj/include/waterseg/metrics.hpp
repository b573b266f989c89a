#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "waterseg/dataset.hpp"
#include "waterseg/image.hpp"

namespace waterseg {

// Pixel counts with water as the positive class.
struct ConfusionMatrix {
    uint64_t tp = 0;
    uint64_t fp = 0;
    uint64_t fn = 0;
    uint64_t tn = 0;

    uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b);

// pred/gt hold 0 or 1 per pixel. Throws ShapeError on length mismatch and
// ValidationError on any other value.
void confusion_accumulate(ConfusionMatrix& cm, std::span<const uint8_t> pred, std::span<const uint8_t> gt);
void confusion_accumulate(ConfusionMatrix& cm, const Mask& pred, const Mask& gt);

// Metrics whose denominator is zero are left empty ("undefined").
struct MetricsReport {
    ConfusionMatrix counts;
    double overall_accuracy = 0;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
    std::optional<double> iou;
};

// OA = (TP+TN)/N, Precision = TP/(TP+FP), Recall = TP/(TP+FN),
// F1 = 2TP/(2TP+FP+FN), IoU = TP/(TP+FP+FN). Throws on an empty matrix.
MetricsReport compute_metrics(const ConfusionMatrix& cm);

// Mean of per-image reports, skipping undefined entries; counts are summed.
MetricsReport macro_average(std::span<const MetricsReport> reports);

enum class Averaging { Micro, Macro };

Averaging averaging_from_string(const std::string& name);

using Predictor = std::function<Mask(const Image&)>;

struct EvalOptions {
    int image_size = 0; // 0 keeps native resolution
    Averaging averaging = Averaging::Micro;
};

MetricsReport evaluate_dataset(const Predictor& predict, std::span<const Sample> samples,
                               const EvalOptions& options = {});

std::string format_fraction(const std::optional<double>& value);

void to_json(nlohmann::json& j, const MetricsReport& r);
MetricsReport metrics_from_json(const nlohmann::json& j);

struct MetricsRow {
    std::string model;
    MetricsReport report;
};

// Columns: Model | OA | IoU | Precision | Recall | F_S
std::string format_metrics_table(const std::vector<MetricsRow>& rows);

} // namespace waterseg
