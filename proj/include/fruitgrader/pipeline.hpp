#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fruitgrader/cascade.hpp"
#include "fruitgrader/network.hpp"

namespace fruitgrader::pipeline {

using imaging::BBox;
using imaging::Image;

inline constexpr int kPipelineVersion = 1;
inline constexpr char kContainerMagic[8] = {'F', 'G', 'P', 'M', '0', '0', '0', '1'};

std::vector<std::string> ripeness_labels();  // bad, raw, ripe mango
std::vector<std::string> disease_labels();   // the five disease classes

struct PipelineModel {
    cascade::CascadeModel detector;
    nn::Network ripeness_net;
    nn::Network disease_net;
    std::vector<std::string> disease_trigger{"bad mango"};
    int version = kPipelineVersion;

    /// Head widths 3 and 5, trigger labels among the ripeness labels,
    /// detector has stages. Throws InvalidArgument.
    void validate() const;
    bool operator==(const PipelineModel&) const = default;
};

struct GradeOptions {
    bool force_disease = false;
    cascade::ScanOptions scan;
    double crop_padding = 0.1;  // fraction of box size added on every side
};

struct FruitReport {
    BBox box;
    double detection_score = 0.0;
    nn::Prediction ripeness;
    std::optional<nn::Prediction> disease;

    bool operator==(const FruitReport&) const = default;
};

/// Box grown by `padding` of its size on each side, clamped to the image.
BBox padded_box(const BBox& box, int image_w, int image_h, double padding);

/// Classifies the padded crop of `box`.
nn::Prediction classify_crop(const nn::Network& net, const Image& image, const BBox& box, double padding);

/// Ripeness for every detection, disease when triggered or forced. Output
/// keeps the detection order.
std::vector<FruitReport> classify_detections(const PipelineModel& model, const Image& image,
                                             const std::vector<cascade::Detection>& detections,
                                             const GradeOptions& options = {});

/// detect, then classify_detections. Reports by detection score descending.
std::vector<FruitReport> grade_image(const PipelineModel& model, const Image& image,
                                     const GradeOptions& options = {});

/// {label, probs: {label: p}}; probabilities serialize exactly.
nlohmann::json prediction_json(const nn::Prediction& p, const std::vector<std::string>& labels);
nn::Prediction prediction_from_json(const nlohmann::json& j, const std::vector<std::string>& labels);
nlohmann::json box_json(const BBox& b);
BBox box_from_json(const nlohmann::json& j);
/// {box: {x,y,w,h}, score, ripeness, disease?}
nlohmann::json report_json(const FruitReport& r, const PipelineModel& model);
FruitReport report_from_json(const nlohmann::json& j, const PipelineModel& model);

/// `FGPM0001`, u64 LE manifest length, JSON manifest, f32 LE tensor blobs,
/// u32 LE CRC-32 of everything before it.
std::vector<std::uint8_t> serialize_pipeline(const PipelineModel& model);
/// Checks magic and CRC (CorruptContainer), then version (VersionMismatch).
PipelineModel deserialize_pipeline(std::span<const std::uint8_t> bytes);

void save_pipeline(const PipelineModel& model, const std::filesystem::path& path);
PipelineModel load_pipeline(const std::filesystem::path& path);

/// Network-only containers share the format with a single "network" entry.
std::vector<std::uint8_t> serialize_network(const nn::Network& net);
nn::Network deserialize_network(std::span<const std::uint8_t> bytes);
void save_network(const nn::Network& net, const std::filesystem::path& path);
nn::Network load_network(const std::filesystem::path& path);

}  // namespace fruitgrader::pipeline
