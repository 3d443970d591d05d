#include "fruitgrader/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "fruitgrader/error.hpp"

namespace fruitgrader::eval {
namespace {

std::string percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * v);
    return buf;
}

std::string pad(const std::string& s, std::size_t width, bool right) {
    if (s.size() >= width) return s;
    const std::string fill(width - s.size(), ' ');
    return right ? fill + s : s + fill;
}

}  // namespace

std::size_t ConfusionMatrix::total() const noexcept {
    std::size_t t = 0;
    for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
    return t;
}

std::size_t ConfusionMatrix::trace() const noexcept {
    std::size_t t = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) t += counts[k][k];
    return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t k) const noexcept {
    return std::accumulate(counts[k].begin(), counts[k].end(), std::size_t{0});
}

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> preds, int num_classes,
                                 std::vector<std::string> class_names) {
    if (num_classes < 1) throw Error(ErrorKind::InvalidArgument, "num_classes must be >= 1");
    if (truths.size() != preds.size()) {
        throw Error(ErrorKind::LengthMismatch, std::to_string(truths.size()) + " truths vs " +
                                                   std::to_string(preds.size()) + " predictions");
    }
    if (class_names.empty()) {
        for (int k = 0; k < num_classes; ++k) class_names.push_back("class" + std::to_string(k));
    }
    if (class_names.size() != static_cast<std::size_t>(num_classes)) {
        throw Error(ErrorKind::LengthMismatch, "class name count differs from num_classes");
    }
    ConfusionMatrix cm{std::move(class_names), std::vector<std::vector<std::size_t>>(
                                                   num_classes, std::vector<std::size_t>(num_classes, 0))};
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const int t = truths[i], p = preds[i];
        if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
            throw Error(ErrorKind::IdOutOfRange, "pair " + std::to_string(i) + " (" + std::to_string(t) + ", " +
                                                     std::to_string(p) + ") outside [0, " +
                                                     std::to_string(num_classes) + ")");
        }
        ++cm.counts[t][p];
    }
    return cm;
}

AccuracyMetrics accuracy_metrics(const ConfusionMatrix& cm) {
    const std::size_t total = cm.total();
    if (total == 0) throw Error(ErrorKind::EmptyMatrix, "confusion matrix holds no samples");
    AccuracyMetrics m;
    m.overall = static_cast<double>(cm.trace()) / static_cast<double>(total);
    for (std::size_t k = 0; k < cm.size(); ++k) {
        const std::size_t row = cm.row_sum(k);
        if (row == 0) {
            m.per_class.push_back(std::nullopt);
        } else {
            m.per_class.push_back(static_cast<double>(cm.counts[k][k]) / static_cast<double>(row));
        }
    }
    return m;
}

DetectionMetrics detection_pr(const std::vector<std::vector<cascade::Detection>>& detections,
                              const std::vector<std::vector<BBox>>& truths, double iou_threshold) {
    if (detections.size() != truths.size()) {
        throw Error(ErrorKind::LengthMismatch, "detections and truths cover different image counts");
    }
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
        throw Error(ErrorKind::InvalidArgument, "iou threshold must be in (0, 1]");
    }
    DetectionMetrics m;
    for (std::size_t img = 0; img < detections.size(); ++img) {
        const auto& dets = detections[img];
        const auto& gts = truths[img];
        std::vector<std::size_t> order(dets.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
            if (dets[a].box.x != dets[b].box.x) return dets[a].box.x < dets[b].box.x;
            return dets[a].box.y < dets[b].box.y;
        });
        std::vector<bool> taken(gts.size(), false);
        for (std::size_t d : order) {
            double best = -1.0;
            std::size_t best_gt = 0;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                if (taken[g]) continue;
                const double v = iou(dets[d].box, gts[g]);
                if (v >= iou_threshold && v > best) {
                    best = v;
                    best_gt = g;
                }
            }
            if (best < 0.0) {
                ++m.false_positives;
            } else {
                taken[best_gt] = true;
                ++m.true_positives;
                m.matches.push_back({img, d, best_gt, best});
            }
        }
        m.false_negatives += static_cast<std::size_t>(std::count(taken.begin(), taken.end(), false));
    }
    const std::size_t predicted = m.true_positives + m.false_positives;
    const std::size_t actual = m.true_positives + m.false_negatives;
    if (predicted > 0) m.precision = static_cast<double>(m.true_positives) / static_cast<double>(predicted);
    if (actual > 0) m.recall = static_cast<double>(m.true_positives) / static_cast<double>(actual);
    return m;
}

std::string confusion_text(const ConfusionMatrix& cm) {
    std::size_t name_w = std::string("true \\ pred").size();
    for (const auto& n : cm.class_names) name_w = std::max(name_w, n.size());
    std::vector<std::size_t> col_w;
    for (std::size_t k = 0; k < cm.size(); ++k) {
        std::size_t w = cm.class_names[k].size();
        for (std::size_t r = 0; r < cm.size(); ++r) w = std::max(w, std::to_string(cm.counts[r][k]).size());
        col_w.push_back(w);
    }
    const std::size_t acc_w = 9;
    std::ostringstream out;
    out << pad("true \\ pred", name_w, false);
    for (std::size_t k = 0; k < cm.size(); ++k) out << "  " << pad(cm.class_names[k], col_w[k], true);
    out << "  " << pad("accuracy", acc_w, true) << '\n';

    const bool any = cm.total() > 0;
    const auto metrics = any ? accuracy_metrics(cm) : AccuracyMetrics{};
    for (std::size_t r = 0; r < cm.size(); ++r) {
        out << pad(cm.class_names[r], name_w, false);
        for (std::size_t k = 0; k < cm.size(); ++k) {
            out << "  " << pad(std::to_string(cm.counts[r][k]), col_w[k], true);
        }
        const auto& pc = any ? metrics.per_class[r] : std::optional<double>{};
        out << "  " << pad(pc ? percent(*pc) : "undefined", acc_w, true) << '\n';
    }
    std::size_t line_w = name_w;
    for (auto w : col_w) line_w += 2 + w;
    out << pad("overall", line_w, false) << "  " << pad(any ? percent(metrics.overall) : "undefined", acc_w, true)
        << '\n';
    out << "samples: " << cm.total() << '\n';
    return out.str();
}

std::string confusion_csv(const ConfusionMatrix& cm) {
    std::ostringstream out;
    out << "true,pred,count\n";
    for (std::size_t r = 0; r < cm.size(); ++r) {
        for (std::size_t k = 0; k < cm.size(); ++k) {
            out << cm.class_names[r] << ',' << cm.class_names[k] << ',' << cm.counts[r][k] << '\n';
        }
    }
    return out.str();
}

nlohmann::json confusion_json(const ConfusionMatrix& cm) {
    nlohmann::json j;
    j["class_names"] = cm.class_names;
    j["counts"] = cm.counts;
    if (cm.total() == 0) {
        j["overall"] = "undefined";
        j["per_class"] = std::vector<std::string>(cm.size(), "undefined");
        return j;
    }
    const auto m = accuracy_metrics(cm);
    j["overall"] = m.overall;
    auto pc = nlohmann::json::array();
    for (const auto& v : m.per_class) pc.push_back(v ? nlohmann::json(*v) : nlohmann::json("undefined"));
    j["per_class"] = std::move(pc);
    return j;
}

ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
    try {
        ConfusionMatrix cm;
        cm.class_names = j.at("class_names").get<std::vector<std::string>>();
        cm.counts = j.at("counts").get<std::vector<std::vector<std::size_t>>>();
        for (const auto& row : cm.counts) {
            if (row.size() != cm.class_names.size()) throw Error(ErrorKind::MalformedFile, "counts not square");
        }
        if (cm.counts.size() != cm.class_names.size()) throw Error(ErrorKind::MalformedFile, "counts not square");
        return cm;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("confusion json: ") + e.what());
    }
}

std::string detection_text(const DetectionMetrics& m, double iou_threshold) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "IoU threshold %.2f\ntrue positives  %zu\nfalse positives %zu\nfalse negatives %zu\n"
                  "precision %.4f%s\nrecall    %.4f\n",
                  iou_threshold, m.true_positives, m.false_positives, m.false_negatives, m.precision,
                  m.true_positives + m.false_positives == 0 ? " (no detections; defined as 1)" : "", m.recall);
    return buf;
}

nlohmann::json detection_json(const DetectionMetrics& m, double iou_threshold) {
    return {{"iou_threshold", iou_threshold},
            {"precision", m.precision},
            {"recall", m.recall},
            {"true_positives", m.true_positives},
            {"false_positives", m.false_positives},
            {"false_negatives", m.false_negatives},
            {"precision_convention", "1 when there are no detections"}};
}

}  // namespace fruitgrader::eval
