#include "fruitgrader/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "fruitgrader/codec.hpp"
#include "fruitgrader/error.hpp"
#include "fruitgrader/random.hpp"

namespace fruitgrader::dataset {
namespace fs = std::filesystem;
namespace {

void check_range(const Range& r, const char* name, double lo, double hi, bool hi_open) {
    const bool ok = std::isfinite(r.min) && std::isfinite(r.max) && r.min <= r.max && r.min >= lo &&
                    (hi_open ? r.max < hi : r.max <= hi);
    if (!ok) throw Error(ErrorKind::InvalidArgument, std::string("augmentation range ") + name + " out of contract");
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    for (auto& f : out) {
        while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
        while (!f.empty() && f.front() == ' ') f.erase(f.begin());
    }
    return out;
}

double parse_number(const std::string& text, std::size_t row) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) {
        throw Error(ErrorKind::NonNumericCoordinate, "row " + std::to_string(row) + ": '" + text + "'");
    }
    return v;
}

std::string format_number(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

// Cumulative rounding of the fraction boundaries over n items.
std::pair<std::size_t, std::size_t> partition_points(std::size_t n, const SplitFractions& f) {
    const auto b1 = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
    const auto b2 = static_cast<std::size_t>(std::llround((f.train + f.valid) * static_cast<double>(n)));
    return {std::min(b1, n), std::min(std::max(b1, b2), n)};
}

void check_fractions(const SplitFractions& f) {
    const bool ok = f.train >= 0.0 && f.valid >= 0.0 && f.test >= 0.0 &&
                    std::abs(f.train + f.valid + f.test - 1.0) <= 1e-9;
    if (!ok) {
        throw Error(ErrorKind::BadFractions, "fractions (" + std::to_string(f.train) + "," + std::to_string(f.valid) +
                                                 "," + std::to_string(f.test) + ") must be >= 0 and sum to 1");
    }
}

Image crop_to_window(const Image& image, const BBox& box, WindowSize window) {
    return imaging::resize_bilinear(imaging::ensure_grayscale(imaging::crop(image, box)), window.w, window.h);
}

void check_window(WindowSize window) {
    if (window.w < 8 || window.h < 8) {
        throw Error(ErrorKind::WindowTooSmall,
                    "window " + std::to_string(window.w) + "x" + std::to_string(window.h) + " (minimum 8x8)");
    }
}

}  // namespace

void AugmentationSpec::validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(flip_h_prob) || !prob(flip_v_prob)) {
        throw Error(ErrorKind::InvalidArgument, "flip probabilities must lie in [0,1]");
    }
    check_range(rotation_deg, "rotation_deg", -180.0, 180.0, false);
    check_range(blur_sigma, "blur_sigma", 0.0, 1e6, false);
    check_range(crop_frac, "crop_frac", 0.0, 1.0, true);
}

AugmentationSpec AugmentationSpec::ripeness() {
    AugmentationSpec s;
    s.flip_h_prob = 0.5;
    s.flip_v_prob = 0.5;
    s.rotation_deg = {-15.0, 15.0};
    s.blur_sigma = {0.0, 2.3};
    return s;
}

AugmentationSpec AugmentationSpec::disease() {
    AugmentationSpec s;
    s.flip_h_prob = 0.5;
    s.rotation90 = Rotation90::Random;
    s.crop_frac = {0.0, 0.2};
    s.blur_sigma = {0.0, 2.5};
    return s;
}

ClassificationTree load_classification_tree(const fs::path& root) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) {
        throw Error(ErrorKind::UnreadableDirectory, root.string() + " is not a readable directory");
    }
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root, ec)) {
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    if (ec) throw Error(ErrorKind::UnreadableDirectory, root.string() + ": " + ec.message());
    std::sort(class_dirs.begin(), class_dirs.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    if (class_dirs.empty()) throw Error(ErrorKind::EmptyDataset, "no class directories under " + root.string());

    ClassificationTree tree;
    for (std::size_t id = 0; id < class_dirs.size(); ++id) {
        const std::string name = class_dirs[id].filename().string();
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(class_dirs[id], ec)) {
            if (entry.is_regular_file() && imaging::is_image_path(entry.path())) files.push_back(entry.path());
        }
        if (ec) throw Error(ErrorKind::UnreadableDirectory, class_dirs[id].string() + ": " + ec.message());
        std::sort(files.begin(), files.end());

        std::vector<char> ok(files.size(), 0);
#pragma omp parallel for schedule(dynamic)
        for (std::size_t i = 0; i < files.size(); ++i) ok[i] = imaging::probe_image(files[i]) ? 1 : 0;

        std::size_t count = 0;
        for (std::size_t i = 0; i < files.size(); ++i) {
            if (!ok[i]) continue;
            tree.samples.push_back({files[i].string(), static_cast<int>(id), name});
            ++count;
        }
        if (count == 0) throw Error(ErrorKind::EmptyClass, "class directory " + class_dirs[id].string() + " has no images");
        tree.class_names.push_back(name);
    }
    return tree;
}

std::vector<DetectionSample> load_detection_csv(const fs::path& csv_path, const fs::path& image_dir) {
    std::ifstream in(csv_path);
    if (!in) throw Error(ErrorKind::MalformedFile, "cannot open " + csv_path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::MissingColumn, "empty CSV, header required");
    static const std::vector<std::string> kHeader = {"filename", "width", "height", "class",
                                                     "xmin",     "ymin",  "xmax",   "ymax"};
    const auto header = split_csv_line(line);
    for (std::size_t i = 0; i < kHeader.size(); ++i) {
        if (i >= header.size() || header[i] != kHeader[i]) {
            throw Error(ErrorKind::MissingColumn, "expected column '" + kHeader[i] + "' at position " + std::to_string(i));
        }
    }

    std::vector<DetectionSample> samples;
    std::map<std::string, std::size_t> by_name;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() < kHeader.size()) {
            throw Error(ErrorKind::MissingColumn, "row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                                                      " fields, expected 8");
        }
        const int w = static_cast<int>(parse_number(f[1], row));
        const int h = static_cast<int>(parse_number(f[2], row));
        auto [it, inserted] = by_name.try_emplace(f[0], samples.size());
        if (inserted) {
            samples.push_back({(image_dir / f[0]).string(), w, h, {}});
        } else if (samples[it->second].image_w != w || samples[it->second].image_h != h) {
            throw Error(ErrorKind::BoxOutOfBounds, "row " + std::to_string(row) + ": image size differs from earlier rows");
        }
        if (f[3].empty() && f[4].empty() && f[5].empty() && f[6].empty() && f[7].empty()) continue;

        const double xmin = parse_number(f[4], row);
        const double ymin = parse_number(f[5], row);
        const double xmax = parse_number(f[6], row);
        const double ymax = parse_number(f[7], row);
        if (!(xmax > xmin) || !(ymax > ymin) || xmin < 0.0 || ymin < 0.0 || xmax > w || ymax > h) {
            throw Error(ErrorKind::BoxOutOfBounds, "row " + std::to_string(row));
        }
        samples[it->second].objects.push_back({f[3], BBox{xmin, ymin, xmax - xmin, ymax - ymin}});
    }
    return samples;
}

void write_detection_csv(const std::vector<DetectionSample>& samples, const fs::path& csv_path,
                         const fs::path& image_dir) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::InvalidArgument, "cannot write " + csv_path.string());
    out << "filename,width,height,class,xmin,ymin,xmax,ymax\n";
    for (const auto& s : samples) {
        const std::string name = fs::path(s.image_path).lexically_relative(image_dir).generic_string();
        const std::string prefix = name + "," + std::to_string(s.image_w) + "," + std::to_string(s.image_h) + ",";
        if (s.objects.empty()) {
            out << prefix << ",,,,\n";
            continue;
        }
        for (const auto& o : s.objects) {
            out << prefix << o.class_name << "," << format_number(o.box.x) << "," << format_number(o.box.y) << ","
                << format_number(o.box.right()) << "," << format_number(o.box.bottom()) << "\n";
        }
    }
}

DatasetSplit<ClassificationSample> split_dataset(const std::vector<ClassificationSample>& samples,
                                                 const std::vector<std::string>& class_names,
                                                 SplitFractions fractions, std::uint64_t seed) {
    check_fractions(fractions);
    if (class_names.empty()) throw Error(ErrorKind::EmptyDataset, "split needs at least one class");
    std::vector<std::vector<ClassificationSample>> per_class(class_names.size());
    for (const auto& s : samples) {
        if (s.class_id < 0 || static_cast<std::size_t>(s.class_id) >= class_names.size()) {
            throw Error(ErrorKind::IdOutOfRange, "class id " + std::to_string(s.class_id));
        }
        per_class[s.class_id].push_back(s);
    }
    DatasetSplit<ClassificationSample> split;
    split.class_names = class_names;
    split.seed = seed;
    Rng rng(seed);
    for (auto& group : per_class) {
        std::shuffle(group.begin(), group.end(), rng);
        const auto [b1, b2] = partition_points(group.size(), fractions);
        split.train.insert(split.train.end(), group.begin(), group.begin() + b1);
        split.valid.insert(split.valid.end(), group.begin() + b1, group.begin() + b2);
        split.test.insert(split.test.end(), group.begin() + b2, group.end());
    }
    return split;
}

DatasetSplit<DetectionSample> split_dataset(const std::vector<DetectionSample>& samples, SplitFractions fractions,
                                            std::uint64_t seed) {
    check_fractions(fractions);
    std::vector<DetectionSample> all = samples;
    Rng rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    const auto [b1, b2] = partition_points(all.size(), fractions);
    DatasetSplit<DetectionSample> split;
    split.seed = seed;
    std::map<std::string, int> names;
    for (const auto& s : all)
        for (const auto& o : s.objects) names.emplace(o.class_name, 0);
    for (const auto& [name, unused] : names) split.class_names.push_back(name);
    split.train.assign(all.begin(), all.begin() + b1);
    split.valid.assign(all.begin() + b1, all.begin() + b2);
    split.test.assign(all.begin() + b2, all.end());
    return split;
}

std::vector<ClassificationSample> balanced_subsample(const std::vector<ClassificationSample>& samples,
                                                     int n_per_class, std::uint64_t seed) {
    if (n_per_class < 0) throw Error(ErrorKind::InvalidArgument, "n_per_class must be >= 0");
    std::map<int, std::vector<ClassificationSample>> per_class;
    for (const auto& s : samples) per_class[s.class_id].push_back(s);
    Rng rng(seed);
    std::vector<ClassificationSample> out;
    for (auto& [id, group] : per_class) {
        if (static_cast<int>(group.size()) < n_per_class) {
            throw Error(ErrorKind::InsufficientClassCount,
                        "class '" + group.front().class_name + "' has " + std::to_string(group.size()) +
                            ", want " + std::to_string(n_per_class));
        }
        std::shuffle(group.begin(), group.end(), rng);
        out.insert(out.end(), group.begin(), group.begin() + n_per_class);
    }
    return out;
}

std::pair<Image, DetectionSample> resize_with_boxes(const DetectionSample& sample, const Image& image, int out_w,
                                                    int out_h) {
    if (image.width() != sample.image_w || image.height() != sample.image_h) {
        throw Error(ErrorKind::DimensionMismatch,
                    "image is " + std::to_string(image.width()) + "x" + std::to_string(image.height()) +
                        ", sample says " + std::to_string(sample.image_w) + "x" + std::to_string(sample.image_h));
    }
    DetectionSample scaled = sample;
    scaled.image_w = out_w;
    scaled.image_h = out_h;
    const double sx = static_cast<double>(out_w) / sample.image_w;
    const double sy = static_cast<double>(out_h) / sample.image_h;
    for (auto& o : scaled.objects) o.box = BBox{o.box.x * sx, o.box.y * sy, o.box.w * sx, o.box.h * sy};
    return {imaging::resize_bilinear(image, out_w, out_h), std::move(scaled)};
}

Image augment(const Image& image, const AugmentationSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    // Every draw happens unconditionally so the stream layout does not depend on the spec.
    const bool flip_h = bernoulli(rng, spec.flip_h_prob);
    const bool flip_v = bernoulli(rng, spec.flip_v_prob);
    const std::size_t quarter = uniform_index(rng, 4);
    const double degrees = uniform(rng, spec.rotation_deg.min, spec.rotation_deg.max);
    const double crop = uniform(rng, spec.crop_frac.min, spec.crop_frac.max);
    const double sigma = uniform(rng, spec.blur_sigma.min, spec.blur_sigma.max);

    Image out = image;
    if (flip_h) out = imaging::flip(out, imaging::FlipAxis::Horizontal);
    if (flip_v) out = imaging::flip(out, imaging::FlipAxis::Vertical);
    if (spec.rotation90 == Rotation90::Random && quarter != 0) {
        out = imaging::rotate(out, 90.0 * static_cast<double>(quarter));
    }
    if (degrees != 0.0) out = imaging::rotate(out, degrees);
    if (crop > 0.0) {
        const double w = out.width();
        const double h = out.height();
        const BBox box{w * crop / 2.0, h * crop / 2.0, w * (1.0 - crop), h * (1.0 - crop)};
        out = imaging::resize_bilinear(imaging::crop(out, box), image.width(), image.height());
    }
    if (sigma > 0.0) out = imaging::gaussian_blur(out, sigma);
    return out;
}

std::vector<Image> extract_positive_windows(const std::vector<DetectionSample>& samples,
                                            const std::vector<Image>& images, const std::string& class_filter,
                                            WindowSize window) {
    check_window(window);
    if (samples.size() != images.size()) throw Error(ErrorKind::LengthMismatch, "samples and images differ in length");
    std::vector<Image> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (const auto& o : samples[i].objects) {
            if (o.class_name == class_filter) out.push_back(crop_to_window(images[i], o.box, window));
        }
    }
    if (out.empty()) throw Error(ErrorKind::NoPositives, "no boxes of class '" + class_filter + "'");
    return out;
}

std::vector<Image> sample_negative_windows(const std::vector<DetectionSample>& samples,
                                           const std::vector<Image>& images, const std::string& class_filter,
                                           WindowSize window, int n, std::uint64_t seed, double reject_iou) {
    check_window(window);
    if (n < 1) throw Error(ErrorKind::InvalidArgument, "n must be >= 1");
    if (!(reject_iou >= 0.0 && reject_iou <= 1.0)) throw Error(ErrorKind::InvalidArgument, "reject_iou in [0,1]");
    if (samples.size() != images.size()) throw Error(ErrorKind::LengthMismatch, "samples and images differ in length");

    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].width() >= window.w && images[i].height() >= window.h) usable.push_back(i);
    }
    if (usable.empty()) throw Error(ErrorKind::ExhaustedNegatives, "no image is at least window-sized");

    Rng rng(seed);
    std::vector<Image> out;
    const long max_attempts = 100L * n + 1000;
    for (long attempt = 0; attempt < max_attempts && static_cast<int>(out.size()) < n; ++attempt) {
        const std::size_t idx = usable[uniform_index(rng, usable.size())];
        const Image& img = images[idx];
        const double max_scale = std::min(static_cast<double>(img.width()) / window.w,
                                          static_cast<double>(img.height()) / window.h);
        const double scale = uniform(rng, 1.0, max_scale);
        const int ww = std::min(img.width(), static_cast<int>(std::lround(window.w * scale)));
        const int wh = std::min(img.height(), static_cast<int>(std::lround(window.h * scale)));
        const int x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(img.width() - ww + 1)));
        const int y = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(img.height() - wh + 1)));
        const BBox candidate{static_cast<double>(x), static_cast<double>(y), static_cast<double>(ww),
                             static_cast<double>(wh)};
        const bool clear = std::all_of(samples[idx].objects.begin(), samples[idx].objects.end(), [&](const auto& o) {
            return o.class_name != class_filter || imaging::iou(candidate, o.box) < reject_iou;
        });
        if (clear) out.push_back(crop_to_window(img, candidate, window));
    }
    if (static_cast<int>(out.size()) < n) {
        throw Error(ErrorKind::ExhaustedNegatives, "found " + std::to_string(out.size()) + " of " +
                                                       std::to_string(n) + " negative windows");
    }
    return out;
}

std::vector<Image> load_images(const std::vector<std::string>& paths) {
    std::vector<Image> images(paths.size());
    std::vector<std::string> errors(paths.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < paths.size(); ++i) {
        try {
            images[i] = imaging::load_image(paths[i]);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    }
    for (std::size_t i = 0; i < paths.size(); ++i) {
        if (!errors[i].empty()) throw Error(ErrorKind::MalformedFile, paths[i] + ": " + errors[i]);
    }
    return images;
}

void save_split_manifest(const DatasetSplit<ClassificationSample>& split, const fs::path& path) {
    auto paths = [](const std::vector<ClassificationSample>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& s : v) arr.push_back(s.image_path);
        return arr;
    };
    nlohmann::json j;
    j["seed"] = split.seed;
    j["class_names"] = split.class_names;
    j["train"] = paths(split.train);
    j["valid"] = paths(split.valid);
    j["test"] = paths(split.test);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::InvalidArgument, "cannot write " + path.string());
    out << j.dump(2) << "\n";
}

DatasetSplit<ClassificationSample> load_split_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MalformedFile, "cannot open " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, path.string() + ": " + e.what());
    }
    DatasetSplit<ClassificationSample> split;
    try {
        split.seed = j.at("seed").get<std::uint64_t>();
        split.class_names = j.at("class_names").get<std::vector<std::string>>();
        auto read = [&](const char* key, std::vector<ClassificationSample>& dst) {
            for (const auto& p : j.at(key)) {
                const std::string image_path = p.get<std::string>();
                const std::string cls = fs::path(image_path).parent_path().filename().string();
                const auto it = std::find(split.class_names.begin(), split.class_names.end(), cls);
                if (it == split.class_names.end()) {
                    throw Error(ErrorKind::IdOutOfRange, image_path + ": class '" + cls + "' not in class_names");
                }
                dst.push_back({image_path, static_cast<int>(it - split.class_names.begin()), cls});
            }
        };
        read("train", split.train);
        read("valid", split.valid);
        read("test", split.test);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, path.string() + ": " + e.what());
    }
    return split;
}

}  // namespace fruitgrader::dataset
