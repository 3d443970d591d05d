#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fruitgrader/dataset.hpp"
#include "fruitgrader/image.hpp"

namespace fruitgrader::cascade {

using imaging::BBox;
using imaging::Image;
using imaging::IntegralImage;
using dataset::WindowSize;

inline constexpr int kCascadeFormatVersion = 1;

enum class HaarKind { TwoRectH, TwoRectV, ThreeRectH, ThreeRectV, FourRect };

/// Rectangle feature inside the training window. The rect is split into
/// 2 (side by side or stacked), 3 (outer white, middle black) or 2x2
/// (diagonal white) equal parts.
struct HaarFeature {
    HaarKind kind = HaarKind::TwoRectH;
    int x = 0;
    int y = 0;
    int w = 2;
    int h = 1;

    bool operator==(const HaarFeature&) const = default;
};

/// Parts along x and y for a kind (e.g. ThreeRectH -> {3, 1}).
std::pair<int, int> haar_parts(HaarKind kind) noexcept;
std::string to_string(HaarKind kind);
HaarKind haar_kind_from_string(const std::string& text);

struct WeightedRect {
    int x, y, w, h;
    double weight;  // +1 white, negative for black
};

/// Sub-rectangles of f scaled by `scale` (endpoints rounded to the nearest
/// pixel) relative to the window origin. Black weights are -A_white/A_black
/// so a constant patch sums to zero even after rounding.
std::vector<WeightedRect> scaled_rects(const HaarFeature& f, double scale);

/// Every feature of the five kinds that fits in the window.
std::vector<HaarFeature> enumerate_features(int window_w, int window_h);

/// Full enumeration, then a seeded uniform subsample of `budget` when it
/// exceeds the budget. Throws WindowTooSmall below 8x8.
std::vector<HaarFeature> generate_feature_pool(int window_w, int window_h, std::size_t budget, std::uint64_t seed);

/// Location of a detection window inside an integral image.
struct WindowRef {
    std::shared_ptr<const IntegralImage> ii;
    int x = 0;
    int y = 0;
    double scale = 1.0;
};

/// Standard deviation of the scaled window (population form).
double window_std(const IntegralImage& ii, int x, int y, int w, int h);

/// (sum of white - weighted black) / (window std * area scale). The area
/// scale is the scaled white area over the unscaled one, so values are
/// comparable across scales. Windows with std < 1e-6 give 0. Throws
/// OutOfBounds when the scaled window leaves the image.
double eval_feature(const HaarFeature& f, const IntegralImage& ii, int origin_x, int origin_y, double scale,
                    int window_w, int window_h);

/// Same, with the window std supplied by the caller (no bounds checks).
double eval_feature_unchecked(const HaarFeature& f, const IntegralImage& ii, int origin_x, int origin_y, double scale,
                              double std);

/// Feature values stored feature-major: value(sample, feature).
class FeatureMatrix {
public:
    FeatureMatrix() = default;
    FeatureMatrix(std::size_t samples, std::size_t features)
        : samples_(samples), features_(features), values_(samples * features) {}

    std::size_t samples() const noexcept { return samples_; }
    std::size_t features() const noexcept { return features_; }
    float& at(std::size_t sample, std::size_t feature) noexcept { return values_[feature * samples_ + sample]; }
    float at(std::size_t sample, std::size_t feature) const noexcept { return values_[feature * samples_ + sample]; }
    std::span<const float> column(std::size_t feature) const noexcept {
        return {values_.data() + feature * samples_, samples_};
    }
    bool operator==(const FeatureMatrix&) const = default;

private:
    std::size_t samples_ = 0;
    std::size_t features_ = 0;
    std::vector<float> values_;
};

/// Parallel over samples; each value computed independently, so the result
/// does not depend on the thread count.
FeatureMatrix compute_feature_matrix(std::span<const HaarFeature> pool, std::span<const WindowRef> windows,
                                     int window_w, int window_h);

namespace reference {
FeatureMatrix compute_feature_matrix(std::span<const HaarFeature> pool, std::span<const WindowRef> windows,
                                     int window_w, int window_h);
}

struct Stump {
    int feature_index = 0;
    double threshold = 0.0;
    int polarity = 1;  // +1: positive when value >= threshold; -1: when value < threshold
    double alpha = 0.0;
    double weighted_error = 0.0;

    /// +1 / -1 vote. Values are compared at the float precision they are
    /// stored with during training.
    int vote(float value) const noexcept {
        return ((static_cast<double>(value) >= threshold) != (polarity < 0)) ? 1 : -1;
    }
    bool operator==(const Stump&) const = default;
};

/// Per-feature ascending sample order, reused across boosting rounds.
std::vector<std::vector<std::uint32_t>> sort_columns(const FeatureMatrix& values);

/// Weighted 0-1 error minimizer over all (feature, threshold, polarity)
/// via a sorted prefix-sum sweep. Thresholds are the distinct values and
/// +infinity. Ties: lowest feature, then lowest threshold, then polarity +1.
/// alpha uses the error clamped to >= 1e-10. Throws InvalidArgument (weights
/// not a simplex), DegenerateWeights (a label side weighs zero) and
/// DegenerateSplit (best error >= 0.5).
Stump train_stump(const FeatureMatrix& values, std::span<const int> labels, std::span<const double> weights);
Stump train_stump(const FeatureMatrix& values, const std::vector<std::vector<std::uint32_t>>& order,
                  std::span<const int> labels, std::span<const double> weights);

struct Stage {
    std::vector<Stump> stumps;
    double threshold = 0.0;
    double trained_far = 0.0;
    double trained_tpr = 0.0;
    bool target_met = true;
    /// prod 2 sqrt(eps (1 - eps)) after each added stump.
    std::vector<double> loss_bound;

    bool operator==(const Stage&) const = default;
};

struct StageConfig {
    double false_alarm_rate = 0.5;
    double tpr_floor = 0.995;
    int max_stumps = 50;
};

/// AdaBoost on a labelled matrix (+1 positives, -1 negatives). After each
/// stump the threshold is the largest score keeping TPR >= floor. Stops
/// when FAR <= target on all negatives and, when given, on the subset
/// `tracked_negatives` (row indices), or at max_stumps with target_met false.
Stage train_stage(const FeatureMatrix& values, std::span<const int> labels, const StageConfig& config,
                  std::span<const std::size_t> tracked_negatives = {});

struct CascadeModel {
    int window_w = 24;
    int window_h = 24;
    std::vector<Stage> stages;
    std::vector<HaarFeature> feature_pool;
    int format_version = kCascadeFormatVersion;

    bool operator==(const CascadeModel&) const = default;
};

struct CascadeTrainConfig {
    double false_alarm_rate = 0.1;
    int num_cascade_stages = 5;
    std::optional<WindowSize> object_training_size;  // nullopt = auto
    double per_stage_tpr_floor = 0.995;
    int max_stumps_per_stage = 50;
    std::size_t feature_budget = 5000;
    std::uint64_t seed = 0;
    /// Negative windows per stage; 0 means twice the positive count.
    std::size_t negatives_per_stage = 0;
    /// Random window draws allowed when mining one stage's negatives.
    std::size_t max_mining_attempts = 2'000'000;
    /// Scale pyramid step used when drawing negative windows.
    double mining_scale_factor = 1.25;

    /// Throws InvalidArgument.
    void validate() const;
};

/// Image that supplies negative windows. Windows overlapping an avoid box
/// with IoU >= avoid_iou are never used.
struct NegativeSource {
    Image image;
    std::vector<BBox> avoid;
};

struct CascadeTrainReport {
    std::vector<std::string> warnings;
    std::vector<std::size_t> negatives_per_stage;
    /// Fraction of the first stage's negatives accepted by the full cascade.
    double training_negative_far = 0.0;
};

/// Auto size: median positive aspect ratio, longer side 24, sides >= 8.
/// Boxes with zero area are ignored. Throws NoPositives.
WindowSize auto_window_size(std::span<const BBox> positive_boxes);

/// Positives are window-sized gray images. Throws NoPositives / NoNegatives.
CascadeModel train_cascade(const std::vector<Image>& positives, const std::vector<NegativeSource>& negative_sources,
                           const CascadeTrainConfig& config, WindowSize window, CascadeTrainReport* report = nullptr,
                           double avoid_iou = 0.3);

/// Extracts positive windows from annotated samples (boxes of class_filter),
/// resolves the window size, builds negative sources (every image, with its
/// class_filter boxes as avoid boxes, plus the extra sources) and trains.
CascadeModel train_cascade(const std::vector<dataset::DetectionSample>& samples, const std::vector<Image>& images,
                           const std::string& class_filter, const std::vector<NegativeSource>& extra_negatives,
                           const CascadeTrainConfig& config, CascadeTrainReport* report = nullptr);

struct WindowDecision {
    bool accepted = false;
    double score = 0.0;
    int stages_evaluated = 0;
};

/// Stages in order with early exit; score sums stage margins (stage score
/// minus stage threshold) over the evaluated stages. Throws OutOfBounds.
WindowDecision classify_window(const CascadeModel& model, const IntegralImage& ii, int origin_x, int origin_y,
                               double scale);

/// Same decision on a window-sized image at scale 1.
WindowDecision classify_window(const CascadeModel& model, const Image& window);

struct Detection {
    BBox box;
    double score = 0.0;
    bool operator==(const Detection&) const = default;
};

struct ScanOptions {
    double scale_factor = 1.1;
    int stride = 2;
    double nms_iou = 0.3;
    /// Minimum number of raw candidates (itself included) with IoU >= 0.5
    /// around a kept box; 1 keeps every NMS survivor.
    int min_neighbors = 1;
};

/// Raw accepted windows before suppression, in scale-major scan order.
std::vector<Detection> scan_windows(const CascadeModel& model, const Image& image, const ScanOptions& options);

/// Greedy suppression by descending score (ties: x, then y, then w); a box
/// is dropped when its IoU with a kept box exceeds iou_threshold.
std::vector<Detection> non_max_suppression(std::vector<Detection> candidates, double iou_threshold);

/// Scale pyramid scan, parallel over scales, merged deterministically, then
/// NMS. Output ordered by score desc, then x, then y. Throws
/// ImageSmallerThanWindow.
std::vector<Detection> detect(const CascadeModel& model, const Image& image, const ScanOptions& options = {});

void to_json(nlohmann::json& j, const CascadeModel& model);
void from_json(const nlohmann::json& j, CascadeModel& model);

}  // namespace fruitgrader::cascade
