#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fruitgrader/cascade.hpp"
#include "fruitgrader/image.hpp"

namespace fruitgrader::eval {

using imaging::BBox;
using imaging::iou;

/// Rows are true classes, columns predictions.
struct ConfusionMatrix {
    std::vector<std::string> class_names;
    std::vector<std::vector<std::size_t>> counts;

    std::size_t size() const noexcept { return counts.size(); }
    std::size_t total() const noexcept;
    std::size_t trace() const noexcept;
    std::size_t row_sum(std::size_t k) const noexcept;
    bool operator==(const ConfusionMatrix&) const = default;
};

/// Throws LengthMismatch, IdOutOfRange. Names default to "class<k>".
ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> preds, int num_classes,
                                 std::vector<std::string> class_names = {});

struct AccuracyMetrics {
    double overall = 0.0;
    std::vector<std::optional<double>> per_class;  // nullopt for classes with no samples
};

/// Throws EmptyMatrix when the matrix holds no samples.
AccuracyMetrics accuracy_metrics(const ConfusionMatrix& cm);

struct Match {
    std::size_t image = 0;
    std::size_t detection = 0;
    std::size_t truth = 0;
    double iou = 0.0;
};

struct DetectionMetrics {
    double precision = 1.0;  // 1 when nothing was detected
    double recall = 1.0;     // 1 when there is nothing to find
    std::size_t true_positives = 0;
    std::size_t false_positives = 0;
    std::size_t false_negatives = 0;
    std::vector<Match> matches;
};

/// Per image, detections are taken by descending score (ties by x, y) and
/// each claims the unmatched truth box with the highest IoU >= threshold.
/// Throws LengthMismatch, InvalidArgument (threshold outside (0,1]).
DetectionMetrics detection_pr(const std::vector<std::vector<cascade::Detection>>& detections,
                              const std::vector<std::vector<BBox>>& truths, double iou_threshold = 0.5);

/// Counts with a per-class accuracy column and an overall line.
std::string confusion_text(const ConfusionMatrix& cm);
/// `true,pred,count` rows by class name, every cell included.
std::string confusion_csv(const ConfusionMatrix& cm);
/// {class_names, counts, overall, per_class}; empty classes are "undefined".
nlohmann::json confusion_json(const ConfusionMatrix& cm);
ConfusionMatrix confusion_from_json(const nlohmann::json& j);

std::string detection_text(const DetectionMetrics& m, double iou_threshold);
nlohmann::json detection_json(const DetectionMetrics& m, double iou_threshold);

}  // namespace fruitgrader::eval
