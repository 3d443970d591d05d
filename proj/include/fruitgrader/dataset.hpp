#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fruitgrader/image.hpp"

namespace fruitgrader::dataset {

using imaging::BBox;
using imaging::Image;

struct ClassificationSample {
    std::string image_path;
    int class_id = 0;
    std::string class_name;

    bool operator==(const ClassificationSample&) const = default;
};

struct DetectionObject {
    std::string class_name;
    BBox box;

    bool operator==(const DetectionObject&) const = default;
};

struct DetectionSample {
    std::string image_path;
    int image_w = 0;
    int image_h = 0;
    std::vector<DetectionObject> objects;

    bool operator==(const DetectionSample&) const = default;
};

template <typename Sample>
struct DatasetSplit {
    std::vector<Sample> train;
    std::vector<Sample> valid;
    std::vector<Sample> test;
    std::vector<std::string> class_names;
    std::uint64_t seed = 0;
};

struct SplitFractions {
    double train = 0.7;
    double valid = 0.3;
    double test = 0.0;
};

struct Range {
    double min = 0.0;
    double max = 0.0;
};

enum class Rotation90 { None, Random };

struct AugmentationSpec {
    double flip_h_prob = 0.0;
    double flip_v_prob = 0.0;
    Range rotation_deg;
    Rotation90 rotation90 = Rotation90::None;
    Range blur_sigma;
    Range crop_frac;

    /// Throws InvalidArgument when a probability or range is out of contract.
    void validate() const;

    static AugmentationSpec identity() { return {}; }
    /// Flips on both axes, +-15 degrees, blur up to 2.3 px.
    static AugmentationSpec ripeness();
    /// Horizontal flip, quarter turns, centered crop up to 20%, blur up to 2.5 px.
    static AugmentationSpec disease();
};

struct ClassificationTree {
    std::vector<ClassificationSample> samples;
    std::vector<std::string> class_names;
};

/// One subdirectory per class under root; class ids follow lexicographic
/// order of directory names.
ClassificationTree load_classification_tree(const std::filesystem::path& root);

/// Header `filename,width,height,class,xmin,ymin,xmax,ymax`, one row per
/// object. A row with an empty class and empty coordinates records an image
/// without objects.
std::vector<DetectionSample> load_detection_csv(const std::filesystem::path& csv_path,
                                                const std::filesystem::path& image_dir);
void write_detection_csv(const std::vector<DetectionSample>& samples, const std::filesystem::path& csv_path,
                         const std::filesystem::path& image_dir);

/// Stratified per class; deterministic for a given seed.
DatasetSplit<ClassificationSample> split_dataset(const std::vector<ClassificationSample>& samples,
                                                 const std::vector<std::string>& class_names,
                                                 SplitFractions fractions, std::uint64_t seed);
/// Plain shuffle then contiguous partition.
DatasetSplit<DetectionSample> split_dataset(const std::vector<DetectionSample>& samples, SplitFractions fractions,
                                            std::uint64_t seed);

std::vector<ClassificationSample> balanced_subsample(const std::vector<ClassificationSample>& samples,
                                                     int n_per_class, std::uint64_t seed);

std::pair<Image, DetectionSample> resize_with_boxes(const DetectionSample& sample, const Image& image, int out_w,
                                                    int out_h);

/// Applies flips, quarter turn, rotation, centered crop (resized back) and
/// blur in that order. Same seed, same output.
Image augment(const Image& image, const AugmentationSpec& spec, std::uint64_t seed);

struct WindowSize {
    int w = 24;
    int h = 24;

    bool operator==(const WindowSize&) const = default;
};

/// Every box of class_filter, cropped, grayed and resized to the window.
std::vector<Image> extract_positive_windows(const std::vector<DetectionSample>& samples,
                                            const std::vector<Image>& images, const std::string& class_filter,
                                            WindowSize window);

/// Random windows whose IoU with every class_filter box is below reject_iou.
std::vector<Image> sample_negative_windows(const std::vector<DetectionSample>& samples,
                                           const std::vector<Image>& images, const std::string& class_filter,
                                           WindowSize window, int n, std::uint64_t seed, double reject_iou);

/// Decodes every path; ordering matches the input regardless of threading.
std::vector<Image> load_images(const std::vector<std::string>& paths);

/// `{seed, class_names, train:[paths], valid:[...], test:[...]}`
void save_split_manifest(const DatasetSplit<ClassificationSample>& split, const std::filesystem::path& path);
/// Class of each path is its parent directory name.
DatasetSplit<ClassificationSample> load_split_manifest(const std::filesystem::path& path);

}  // namespace fruitgrader::dataset
