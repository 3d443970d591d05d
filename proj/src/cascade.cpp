#include "fruitgrader/cascade.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "fruitgrader/error.hpp"
#include "fruitgrader/random.hpp"

namespace fruitgrader::cascade {
namespace {

constexpr double kMinStd = 1e-6;
constexpr double kMinError = 1e-10;

struct ScaledFeature {
    std::array<WeightedRect, 4> rects{};
    int count = 0;
    double area_scale = 1.0;
};

int scaled(int v, double scale) { return static_cast<int>(std::lround(v * scale)); }

bool is_white(HaarKind kind, int i, int j) {
    switch (kind) {
    case HaarKind::TwoRectH: return i == 0;
    case HaarKind::TwoRectV: return j == 0;
    case HaarKind::ThreeRectH: return i != 1;
    case HaarKind::ThreeRectV: return j != 1;
    case HaarKind::FourRect: return (i + j) % 2 == 0;
    }
    return true;
}

ScaledFeature scale_feature(const HaarFeature& f, double scale) {
    const auto [px, py] = haar_parts(f.kind);
    const int pw = f.w / px;
    const int ph = f.h / py;
    ScaledFeature out;
    double white = 0.0, black = 0.0;
    for (int j = 0; j < py; ++j) {
        for (int i = 0; i < px; ++i) {
            const int x0 = scaled(f.x + i * pw, scale);
            const int x1 = scaled(f.x + (i + 1) * pw, scale);
            const int y0 = scaled(f.y + j * ph, scale);
            const int y1 = scaled(f.y + (j + 1) * ph, scale);
            const bool w = is_white(f.kind, i, j);
            const double area = static_cast<double>(x1 - x0) * (y1 - y0);
            (w ? white : black) += area;
            out.rects[out.count++] = {x0, y0, x1 - x0, y1 - y0, w ? 1.0 : -1.0};
        }
    }
    const double ratio = black > 0 ? white / black : 0.0;
    for (int k = 0; k < out.count; ++k) {
        if (out.rects[k].weight < 0) out.rects[k].weight = -ratio;
    }
    const auto [bx, by] = haar_parts(f.kind);
    double base_white = 0.0;
    for (int j = 0; j < by; ++j) {
        for (int i = 0; i < bx; ++i) {
            if (is_white(f.kind, i, j)) base_white += static_cast<double>(pw) * ph;
        }
    }
    out.area_scale = white / base_white;
    return out;
}

double eval_scaled(const ScaledFeature& sf, const IntegralImage& ii, int ox, int oy, double std) {
    if (std < kMinStd) return 0.0;
    double acc = 0.0;
    for (int k = 0; k < sf.count; ++k) {
        const auto& r = sf.rects[k];
        acc += r.weight * ii.rect_sum_unchecked(ox + r.x, oy + r.y, r.w, r.h);
    }
    return acc / (std * sf.area_scale);
}

void check_window(const IntegralImage& ii, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || x + w > ii.width() || y + h > ii.height()) {
        throw Error(ErrorKind::OutOfBounds, "window (" + std::to_string(x) + "," + std::to_string(y) + "," +
                                                std::to_string(w) + "," + std::to_string(h) + ") outside " +
                                                std::to_string(ii.width()) + "x" + std::to_string(ii.height()));
    }
}

float window_value(const HaarFeature& f, const WindowRef& ref, double std) {
    return static_cast<float>(eval_scaled(scale_feature(f, ref.scale), *ref.ii, ref.x, ref.y, std));
}

double ref_std(const WindowRef& ref, int window_w, int window_h) {
    const int w = scaled(window_w, ref.scale);
    const int h = scaled(window_h, ref.scale);
    check_window(*ref.ii, ref.x, ref.y, w, h);
    return window_std(*ref.ii, ref.x, ref.y, w, h);
}

// Stage score for one window; features evaluated on demand.
double stage_score(const Stage& stage, const std::vector<HaarFeature>& pool, const IntegralImage& ii, int ox, int oy,
                   double scale, double std) {
    double score = 0.0;
    for (const auto& s : stage.stumps) {
        const float v = static_cast<float>(eval_scaled(scale_feature(pool[s.feature_index], scale), ii, ox, oy, std));
        score += s.alpha * s.vote(v);
    }
    return score;
}

std::size_t accepted_count(std::span<const double> scores, double threshold) {
    return static_cast<std::size_t>(
        std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= threshold; }));
}

bool detection_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    if (a.box.y != b.box.y) return a.box.y < b.box.y;
    return a.box.w < b.box.w;
}

}  // namespace

std::pair<int, int> haar_parts(HaarKind kind) noexcept {
    switch (kind) {
    case HaarKind::TwoRectH: return {2, 1};
    case HaarKind::TwoRectV: return {1, 2};
    case HaarKind::ThreeRectH: return {3, 1};
    case HaarKind::ThreeRectV: return {1, 3};
    case HaarKind::FourRect: return {2, 2};
    }
    return {1, 1};
}

std::string to_string(HaarKind kind) {
    switch (kind) {
    case HaarKind::TwoRectH: return "two_rect_h";
    case HaarKind::TwoRectV: return "two_rect_v";
    case HaarKind::ThreeRectH: return "three_rect_h";
    case HaarKind::ThreeRectV: return "three_rect_v";
    case HaarKind::FourRect: return "four_rect";
    }
    return "unknown";
}

HaarKind haar_kind_from_string(const std::string& text) {
    for (auto k : {HaarKind::TwoRectH, HaarKind::TwoRectV, HaarKind::ThreeRectH, HaarKind::ThreeRectV,
                   HaarKind::FourRect}) {
        if (to_string(k) == text) return k;
    }
    throw Error(ErrorKind::MalformedFile, "unknown haar feature kind '" + text + "'");
}

std::vector<WeightedRect> scaled_rects(const HaarFeature& f, double scale) {
    const auto sf = scale_feature(f, scale);
    return {sf.rects.begin(), sf.rects.begin() + sf.count};
}

std::vector<HaarFeature> enumerate_features(int window_w, int window_h) {
    std::vector<HaarFeature> out;
    for (auto kind : {HaarKind::TwoRectH, HaarKind::TwoRectV, HaarKind::ThreeRectH, HaarKind::ThreeRectV,
                      HaarKind::FourRect}) {
        const auto [px, py] = haar_parts(kind);
        for (int h = py; h <= window_h; h += py) {
            for (int w = px; w <= window_w; w += px) {
                for (int y = 0; y + h <= window_h; ++y) {
                    for (int x = 0; x + w <= window_w; ++x) out.push_back({kind, x, y, w, h});
                }
            }
        }
    }
    return out;
}

std::vector<HaarFeature> generate_feature_pool(int window_w, int window_h, std::size_t budget, std::uint64_t seed) {
    if (window_w < 8 || window_h < 8) {
        throw Error(ErrorKind::WindowTooSmall,
                    "window " + std::to_string(window_w) + "x" + std::to_string(window_h) + " is below 8x8");
    }
    if (budget == 0) throw Error(ErrorKind::InvalidArgument, "feature budget must be positive");
    auto all = enumerate_features(window_w, window_h);
    if (all.size() <= budget) return all;
    std::vector<HaarFeature> out;
    out.reserve(budget);
    Rng rng(seed);
    std::sample(all.begin(), all.end(), std::back_inserter(out), budget, rng);
    return out;
}

double window_std(const IntegralImage& ii, int x, int y, int w, int h) {
    const double n = static_cast<double>(w) * h;
    if (n <= 0) return 0.0;
    const double mean = ii.rect_sum_unchecked(x, y, w, h) / n;
    const double var = ii.squared_rect_sum_unchecked(x, y, w, h) / n - mean * mean;
    return var > 0 ? std::sqrt(var) : 0.0;
}

double eval_feature(const HaarFeature& f, const IntegralImage& ii, int origin_x, int origin_y, double scale,
                    int window_w, int window_h) {
    const int w = scaled(window_w, scale);
    const int h = scaled(window_h, scale);
    check_window(ii, origin_x, origin_y, w, h);
    const auto sf = scale_feature(f, scale);
    for (int k = 0; k < sf.count; ++k) {
        const auto& r = sf.rects[k];
        if (r.x + r.w > w || r.y + r.h > h) {
            throw Error(ErrorKind::OutOfBounds, "feature extends past the window");
        }
    }
    return eval_scaled(sf, ii, origin_x, origin_y, window_std(ii, origin_x, origin_y, w, h));
}

double eval_feature_unchecked(const HaarFeature& f, const IntegralImage& ii, int origin_x, int origin_y, double scale,
                              double std) {
    return eval_scaled(scale_feature(f, scale), ii, origin_x, origin_y, std);
}

FeatureMatrix compute_feature_matrix(std::span<const HaarFeature> pool, std::span<const WindowRef> windows,
                                     int window_w, int window_h) {
    FeatureMatrix m(windows.size(), pool.size());
    std::vector<double> stds(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) stds[i] = ref_std(windows[i], window_w, window_h);
    const long n = static_cast<long>(windows.size());
#pragma omp parallel for schedule(dynamic, 8)
    for (long i = 0; i < n; ++i) {
        const WindowRef& ref = windows[i];
        for (std::size_t f = 0; f < pool.size(); ++f) m.at(i, f) = window_value(pool[f], ref, stds[i]);
    }
    return m;
}

namespace reference {

FeatureMatrix compute_feature_matrix(std::span<const HaarFeature> pool, std::span<const WindowRef> windows,
                                     int window_w, int window_h) {
    FeatureMatrix m(windows.size(), pool.size());
    for (std::size_t f = 0; f < pool.size(); ++f) {
        for (std::size_t i = 0; i < windows.size(); ++i) {
            m.at(i, f) = window_value(pool[f], windows[i], ref_std(windows[i], window_w, window_h));
        }
    }
    return m;
}

}  // namespace reference

std::vector<std::vector<std::uint32_t>> sort_columns(const FeatureMatrix& values) {
    std::vector<std::vector<std::uint32_t>> order(values.features());
    const long nf = static_cast<long>(values.features());
#pragma omp parallel for schedule(dynamic, 16)
    for (long f = 0; f < nf; ++f) {
        auto& idx = order[f];
        idx.resize(values.samples());
        std::iota(idx.begin(), idx.end(), 0u);
        const auto col = values.column(f);
        std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) { return col[a] < col[b]; });
    }
    return order;
}

Stump train_stump(const FeatureMatrix& values, std::span<const int> labels, std::span<const double> weights) {
    return train_stump(values, sort_columns(values), labels, weights);
}

Stump train_stump(const FeatureMatrix& values, const std::vector<std::vector<std::uint32_t>>& order,
                  std::span<const int> labels, std::span<const double> weights) {
    const std::size_t n = values.samples();
    if (labels.size() != n || weights.size() != n || order.size() != values.features()) {
        throw Error(ErrorKind::LengthMismatch, "labels, weights and matrix rows disagree");
    }
    if (values.features() == 0) throw Error(ErrorKind::EmptyMatrix, "no features");
    double total_pos = 0.0, total_neg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (weights[i] < 0 || !std::isfinite(weights[i])) throw Error(ErrorKind::InvalidArgument, "negative weight");
        if (labels[i] == 1) {
            total_pos += weights[i];
        } else if (labels[i] == -1) {
            total_neg += weights[i];
        } else {
            throw Error(ErrorKind::InvalidArgument, "labels must be +1 or -1");
        }
    }
    if (std::abs(total_pos + total_neg - 1.0) > 1e-9) {
        throw Error(ErrorKind::InvalidArgument, "weights must sum to 1");
    }
    if (total_pos <= 0.0 || total_neg <= 0.0) {
        throw Error(ErrorKind::DegenerateWeights, total_pos <= 0.0 ? "positives weigh zero" : "negatives weigh zero");
    }

    Stump best;
    double best_error = std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < values.features(); ++f) {
        const auto col = values.column(f);
        const auto& idx = order[f];
        double pos_below = 0.0, neg_below = 0.0;
        for (std::size_t k = 0; k <= n; ++k) {
            const bool at_end = k == n;
            if (at_end || k == 0 || col[idx[k]] != col[idx[k - 1]]) {
                const double theta = at_end ? std::numeric_limits<double>::infinity() : col[idx[k]];
                const double err_plus = pos_below + (total_neg - neg_below);
                const double err_minus = neg_below + (total_pos - pos_below);
                if (err_plus < best_error) {
                    best_error = err_plus;
                    best = {static_cast<int>(f), theta, 1, 0.0, 0.0};
                }
                if (err_minus < best_error) {
                    best_error = err_minus;
                    best = {static_cast<int>(f), theta, -1, 0.0, 0.0};
                }
            }
            if (at_end) break;
            const std::uint32_t s = idx[k];
            (labels[s] == 1 ? pos_below : neg_below) += weights[s];
        }
    }
    best_error = std::max(0.0, best_error);
    if (best_error >= 0.5 - 1e-12) {
        throw Error(ErrorKind::DegenerateSplit, "no feature separates the classes better than chance");
    }
    best.weighted_error = best_error;
    const double e = std::max(best_error, kMinError);
    best.alpha = 0.5 * std::log((1.0 - e) / e);
    return best;
}

Stage train_stage(const FeatureMatrix& values, std::span<const int> labels, const StageConfig& config,
                  std::span<const std::size_t> tracked_negatives) {
    const std::size_t n = values.samples();
    if (labels.size() != n) throw Error(ErrorKind::LengthMismatch, "labels vs matrix rows");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < n; ++i) (labels[i] == 1 ? pos : neg).push_back(i);
    if (pos.empty()) throw Error(ErrorKind::NoPositives, "stage has no positive windows");
    if (neg.empty()) throw Error(ErrorKind::NoNegatives, "stage has no negative windows");

    std::vector<double> weights(n);
    for (std::size_t i : pos) weights[i] = 0.5 / pos.size();
    for (std::size_t i : neg) weights[i] = 0.5 / neg.size();

    const auto order = sort_columns(values);
    std::vector<double> scores(n, 0.0);
    std::vector<double> pos_scores(pos.size()), neg_scores(neg.size()), tracked_scores(tracked_negatives.size());
    const std::size_t keep = static_cast<std::size_t>(
        std::max(1.0, std::ceil(config.tpr_floor * static_cast<double>(pos.size()) - 1e-9)));

    Stage stage;
    stage.target_met = false;
    double bound = 1.0;
    for (int t = 0; t < config.max_stumps; ++t) {
        const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
        for (auto& w : weights) w /= total;

        Stump stump;
        try {
            stump = train_stump(values, order, labels, weights);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::DegenerateSplit || stage.stumps.empty()) throw;
            break;
        }
        stage.stumps.push_back(stump);
        const double e = std::max(stump.weighted_error, kMinError);
        bound *= 2.0 * std::sqrt(e * (1.0 - e));
        stage.loss_bound.push_back(bound);

        for (std::size_t i = 0; i < n; ++i) {
            const int h = stump.vote(values.at(i, stump.feature_index));
            scores[i] += stump.alpha * h;
            weights[i] *= std::exp(-stump.alpha * labels[i] * h);
        }

        for (std::size_t k = 0; k < pos.size(); ++k) pos_scores[k] = scores[pos[k]];
        std::vector<double> sorted = pos_scores;
        std::nth_element(sorted.begin(), sorted.begin() + (keep - 1), sorted.end(), std::greater<>());
        stage.threshold = sorted[keep - 1];

        for (std::size_t k = 0; k < neg.size(); ++k) neg_scores[k] = scores[neg[k]];
        for (std::size_t k = 0; k < tracked_negatives.size(); ++k) tracked_scores[k] = scores[tracked_negatives[k]];
        stage.trained_tpr = static_cast<double>(accepted_count(pos_scores, stage.threshold)) / pos.size();
        stage.trained_far = static_cast<double>(accepted_count(neg_scores, stage.threshold)) / neg.size();
        if (!tracked_negatives.empty()) {
            const double tracked_far =
                static_cast<double>(accepted_count(tracked_scores, stage.threshold)) / tracked_negatives.size();
            stage.trained_far = std::max(stage.trained_far, tracked_far);
        }
        if (stage.trained_far <= config.false_alarm_rate) {
            stage.target_met = true;
            break;
        }
    }
    return stage;
}

void CascadeTrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidArgument, m); };
    if (!(false_alarm_rate > 0.0 && false_alarm_rate < 1.0)) fail("false_alarm_rate must be in (0,1)");
    if (num_cascade_stages < 1) fail("num_cascade_stages must be >= 1");
    if (!(per_stage_tpr_floor > 0.0 && per_stage_tpr_floor <= 1.0)) fail("per_stage_tpr_floor must be in (0,1]");
    if (max_stumps_per_stage < 1) fail("max_stumps_per_stage must be >= 1");
    if (feature_budget < 100) fail("feature_budget must be >= 100");
    if (object_training_size && (object_training_size->w < 8 || object_training_size->h < 8)) {
        throw Error(ErrorKind::WindowTooSmall, "object training size below 8x8");
    }
    if (!(mining_scale_factor > 1.0)) fail("mining_scale_factor must be > 1");
}

WindowSize auto_window_size(std::span<const BBox> positive_boxes) {
    std::vector<double> ratios;
    for (const auto& b : positive_boxes) {
        if (b.w > 0 && b.h > 0) ratios.push_back(b.w / b.h);
    }
    if (ratios.empty()) throw Error(ErrorKind::NoPositives, "no positive boxes with area");
    std::sort(ratios.begin(), ratios.end());
    const std::size_t m = ratios.size() / 2;
    const double median = ratios.size() % 2 ? ratios[m] : 0.5 * (ratios[m - 1] + ratios[m]);
    WindowSize size;
    if (median >= 1.0) {
        size.w = 24;
        size.h = std::max(8, static_cast<int>(std::lround(24.0 / median)));
    } else {
        size.h = 24;
        size.w = std::max(8, static_cast<int>(std::lround(24.0 * median)));
    }
    return size;
}

namespace {

struct GraySource {
    std::shared_ptr<const IntegralImage> ii;
    std::vector<BBox> avoid;
    std::vector<double> scales;  // pyramid scales whose window fits
};

struct NegativeWindow {
    WindowRef ref;
    bool tracked = false;
};

bool accepted_by(const CascadeModel& model, const WindowRef& ref) {
    if (model.stages.empty()) return true;
    return classify_window(model, *ref.ii, ref.x, ref.y, ref.scale).accepted;
}

// Draws random windows until `needed` are accepted by the current cascade.
std::vector<NegativeWindow> mine_negatives(const CascadeModel& model, const std::vector<GraySource>& sources,
                                           std::size_t needed, std::size_t max_attempts, double avoid_iou,
                                           std::uint64_t seed) {
    std::vector<NegativeWindow> out;
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        if (!sources[i].scales.empty()) usable.push_back(i);
    }
    if (usable.empty()) return out;
    Rng rng(seed);
    for (std::size_t attempt = 0; attempt < max_attempts && out.size() < needed; ++attempt) {
        const auto& src = sources[usable[uniform_index(rng, usable.size())]];
        const double scale = src.scales[uniform_index(rng, src.scales.size())];
        const int w = scaled(model.window_w, scale);
        const int h = scaled(model.window_h, scale);
        const int x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(src.ii->width() - w + 1)));
        const int y = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(src.ii->height() - h + 1)));
        const BBox box{double(x), double(y), double(w), double(h)};
        if (std::any_of(src.avoid.begin(), src.avoid.end(),
                        [&](const BBox& a) { return imaging::iou(box, a) >= avoid_iou; })) {
            continue;
        }
        WindowRef ref{src.ii, x, y, scale};
        if (accepted_by(model, ref)) out.push_back({std::move(ref), false});
    }
    return out;
}

FeatureMatrix stack_rows(const FeatureMatrix& top, const FeatureMatrix& bottom) {
    FeatureMatrix m(top.samples() + bottom.samples(), top.features());
    for (std::size_t f = 0; f < top.features(); ++f) {
        for (std::size_t i = 0; i < top.samples(); ++i) m.at(i, f) = top.at(i, f);
        for (std::size_t i = 0; i < bottom.samples(); ++i) m.at(top.samples() + i, f) = bottom.at(i, f);
    }
    return m;
}

}  // namespace

CascadeModel train_cascade(const std::vector<Image>& positives, const std::vector<NegativeSource>& negative_sources,
                           const CascadeTrainConfig& config, WindowSize window, CascadeTrainReport* report,
                           double avoid_iou) {
    config.validate();
    if (positives.empty()) throw Error(ErrorKind::NoPositives, "no positive windows");
    if (negative_sources.empty()) throw Error(ErrorKind::NoNegatives, "no negative source images");
    if (window.w < 8 || window.h < 8) throw Error(ErrorKind::WindowTooSmall, "window below 8x8");
    CascadeTrainReport local;
    CascadeTrainReport& rep = report ? *report : local;
    rep = {};

    CascadeModel model;
    model.window_w = window.w;
    model.window_h = window.h;
    model.feature_pool = generate_feature_pool(window.w, window.h, config.feature_budget, derive_seed(config.seed, 1));

    std::vector<WindowRef> pos_refs;
    for (const auto& img : positives) {
        Image g = imaging::ensure_grayscale(img);
        if (g.width() != window.w || g.height() != window.h) g = imaging::resize_bilinear(g, window.w, window.h);
        pos_refs.push_back({std::make_shared<const IntegralImage>(g), 0, 0, 1.0});
    }
    const FeatureMatrix pos_matrix = compute_feature_matrix(model.feature_pool, pos_refs, window.w, window.h);

    std::vector<GraySource> sources;
    for (const auto& src : negative_sources) {
        GraySource g;
        g.ii = std::make_shared<const IntegralImage>(imaging::ensure_grayscale(src.image));
        g.avoid = src.avoid;
        for (double s = 1.0; scaled(window.w, s) <= g.ii->width() && scaled(window.h, s) <= g.ii->height();
             s *= config.mining_scale_factor) {
            g.scales.push_back(s);
        }
        sources.push_back(std::move(g));
    }

    const std::size_t target =
        config.negatives_per_stage ? config.negatives_per_stage : 2 * positives.size();
    std::vector<NegativeWindow> negatives =
        mine_negatives(model, sources, target, config.max_mining_attempts, avoid_iou, derive_seed(config.seed, 100));
    if (negatives.empty()) throw Error(ErrorKind::NoNegatives, "negative sources yield no usable window");
    for (auto& n : negatives) n.tracked = true;
    std::vector<WindowRef> initial_refs;
    for (const auto& n : negatives) initial_refs.push_back(n.ref);

    const StageConfig stage_config{config.false_alarm_rate, config.per_stage_tpr_floor, config.max_stumps_per_stage};
    for (int k = 0; k < config.num_cascade_stages; ++k) {
        if (negatives.empty()) {
            rep.warnings.push_back("negative mining exhausted after " + std::to_string(k) + " stages");
            break;
        }
        rep.negatives_per_stage.push_back(negatives.size());
        std::vector<WindowRef> neg_refs;
        std::vector<std::size_t> tracked;
        for (std::size_t i = 0; i < negatives.size(); ++i) {
            neg_refs.push_back(negatives[i].ref);
            if (negatives[i].tracked) tracked.push_back(pos_refs.size() + i);
        }
        const FeatureMatrix neg_matrix = compute_feature_matrix(model.feature_pool, neg_refs, window.w, window.h);
        const FeatureMatrix all = stack_rows(pos_matrix, neg_matrix);
        std::vector<int> labels(all.samples(), -1);
        std::fill(labels.begin(), labels.begin() + static_cast<long>(pos_refs.size()), 1);

        Stage stage = train_stage(all, labels, stage_config, tracked);
        if (!stage.target_met) {
            rep.warnings.push_back("stage " + std::to_string(k + 1) + " stopped at " +
                                   std::to_string(stage.stumps.size()) + " stumps with false alarm rate " +
                                   std::to_string(stage.trained_far));
        }
        model.stages.push_back(std::move(stage));
        if (k + 1 == config.num_cascade_stages) break;

        // Keep the negatives the new stage still accepts, then top up by mining.
        const Stage& last = model.stages.back();
        std::vector<NegativeWindow> kept;
        for (std::size_t i = 0; i < negatives.size(); ++i) {
            double score = 0.0;
            for (const auto& s : last.stumps) score += s.alpha * s.vote(neg_matrix.at(i, s.feature_index));
            if (score >= last.threshold) kept.push_back(negatives[i]);
        }
        if (kept.size() < target) {
            auto mined = mine_negatives(model, sources, target - kept.size(), config.max_mining_attempts, avoid_iou,
                                        derive_seed(config.seed, 101 + static_cast<std::uint64_t>(k)));
            if (kept.size() + mined.size() < target && !mined.empty()) {
                rep.warnings.push_back("stage " + std::to_string(k + 2) + ": mined " +
                                       std::to_string(kept.size() + mined.size()) + " of " + std::to_string(target) +
                                       " negatives");
            }
            kept.insert(kept.end(), mined.begin(), mined.end());
        }
        negatives = std::move(kept);
    }

    std::size_t survivors = 0;
    for (const auto& ref : initial_refs) survivors += accepted_by(model, ref) ? 1 : 0;
    rep.training_negative_far = static_cast<double>(survivors) / initial_refs.size();
    return model;
}

CascadeModel train_cascade(const std::vector<dataset::DetectionSample>& samples, const std::vector<Image>& images,
                           const std::string& class_filter, const std::vector<NegativeSource>& extra_negatives,
                           const CascadeTrainConfig& config, CascadeTrainReport* report) {
    config.validate();
    if (samples.size() != images.size()) throw Error(ErrorKind::LengthMismatch, "samples vs images");
    std::vector<BBox> boxes;
    for (const auto& s : samples) {
        for (const auto& o : s.objects) {
            if (o.class_name == class_filter) boxes.push_back(o.box);
        }
    }
    if (boxes.empty()) throw Error(ErrorKind::NoPositives, "no '" + class_filter + "' boxes");
    const WindowSize window = config.object_training_size ? *config.object_training_size : auto_window_size(boxes);
    const auto positives = dataset::extract_positive_windows(samples, images, class_filter, window);

    std::vector<NegativeSource> sources;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        NegativeSource src{images[i], {}};
        for (const auto& o : samples[i].objects) {
            if (o.class_name == class_filter) src.avoid.push_back(o.box);
        }
        sources.push_back(std::move(src));
    }
    sources.insert(sources.end(), extra_negatives.begin(), extra_negatives.end());
    return train_cascade(positives, sources, config, window, report);
}

WindowDecision classify_window(const CascadeModel& model, const IntegralImage& ii, int origin_x, int origin_y,
                               double scale) {
    const int w = scaled(model.window_w, scale);
    const int h = scaled(model.window_h, scale);
    check_window(ii, origin_x, origin_y, w, h);
    const double std = window_std(ii, origin_x, origin_y, w, h);
    WindowDecision d;
    d.accepted = true;
    for (const auto& stage : model.stages) {
        const double score = stage_score(stage, model.feature_pool, ii, origin_x, origin_y, scale, std);
        ++d.stages_evaluated;
        d.score += score - stage.threshold;
        if (score < stage.threshold) {
            d.accepted = false;
            break;
        }
    }
    return d;
}

WindowDecision classify_window(const CascadeModel& model, const Image& window) {
    const IntegralImage ii(imaging::ensure_grayscale(window));
    return classify_window(model, ii, 0, 0, 1.0);
}

std::vector<Detection> scan_windows(const CascadeModel& model, const Image& image, const ScanOptions& options) {
    if (!(options.scale_factor > 1.0) || options.stride < 1) {
        throw Error(ErrorKind::InvalidArgument, "scale_factor must be > 1 and stride >= 1");
    }
    if (image.width() < model.window_w || image.height() < model.window_h) {
        throw Error(ErrorKind::ImageSmallerThanWindow,
                    std::to_string(image.width()) + "x" + std::to_string(image.height()) + " image, " +
                        std::to_string(model.window_w) + "x" + std::to_string(model.window_h) + " window");
    }
    const IntegralImage ii(imaging::ensure_grayscale(image));
    std::vector<double> scales;
    for (double s = 1.0; scaled(model.window_w, s) <= ii.width() && scaled(model.window_h, s) <= ii.height();
         s *= options.scale_factor) {
        scales.push_back(s);
    }
    std::vector<std::vector<Detection>> per_scale(scales.size());
    const long ns = static_cast<long>(scales.size());
#pragma omp parallel for schedule(dynamic)
    for (long k = 0; k < ns; ++k) {
        const double s = scales[k];
        const int w = scaled(model.window_w, s);
        const int h = scaled(model.window_h, s);
        const int step = std::max(1, static_cast<int>(std::lround(options.stride * s)));
        for (int y = 0; y + h <= ii.height(); y += step) {
            for (int x = 0; x + w <= ii.width(); x += step) {
                const auto d = classify_window(model, ii, x, y, s);
                if (d.accepted) per_scale[k].push_back({BBox{double(x), double(y), double(w), double(h)}, d.score});
            }
        }
    }
    std::vector<Detection> all;
    for (auto& v : per_scale) all.insert(all.end(), v.begin(), v.end());
    return all;
}

std::vector<Detection> non_max_suppression(std::vector<Detection> candidates, double iou_threshold) {
    std::sort(candidates.begin(), candidates.end(), detection_before);
    std::vector<Detection> kept;
    for (const auto& c : candidates) {
        const bool overlaps = std::any_of(kept.begin(), kept.end(),
                                          [&](const Detection& k) { return imaging::iou(c.box, k.box) > iou_threshold; });
        if (!overlaps) kept.push_back(c);
    }
    return kept;
}

std::vector<Detection> detect(const CascadeModel& model, const Image& image, const ScanOptions& options) {
    const auto raw = scan_windows(model, image, options);
    auto kept = non_max_suppression(raw, options.nms_iou);
    if (options.min_neighbors > 1) {
        std::erase_if(kept, [&](const Detection& d) {
            const auto n = std::count_if(raw.begin(), raw.end(),
                                         [&](const Detection& r) { return imaging::iou(d.box, r.box) >= 0.5; });
            return n < options.min_neighbors;
        });
    }
    return kept;
}

namespace {

nlohmann::json threshold_json(double t) {
    if (std::isinf(t)) return t > 0 ? "inf" : "-inf";
    return t;
}

double threshold_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw Error(ErrorKind::MalformedFile, "bad threshold '" + s + "'");
    }
    return j.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const CascadeModel& model) {
    j = nlohmann::json::object();
    j["format_version"] = model.format_version;
    j["window"] = {model.window_w, model.window_h};
    auto pool = nlohmann::json::array();
    for (const auto& f : model.feature_pool) pool.push_back({to_string(f.kind), f.x, f.y, f.w, f.h});
    j["feature_pool"] = std::move(pool);
    auto stages = nlohmann::json::array();
    for (const auto& s : model.stages) {
        nlohmann::json st{{"threshold", threshold_json(s.threshold)},
                          {"trained_far", s.trained_far},
                          {"trained_tpr", s.trained_tpr},
                          {"target_met", s.target_met},
                          {"loss_bound", s.loss_bound}};
        auto stumps = nlohmann::json::array();
        for (const auto& t : s.stumps) {
            stumps.push_back({{"feature", t.feature_index},
                              {"threshold", threshold_json(t.threshold)},
                              {"polarity", t.polarity},
                              {"alpha", t.alpha},
                              {"error", t.weighted_error}});
        }
        st["stumps"] = std::move(stumps);
        stages.push_back(std::move(st));
    }
    j["stages"] = std::move(stages);
}

void from_json(const nlohmann::json& j, CascadeModel& model) {
    try {
        model = {};
        model.format_version = j.at("format_version").get<int>();
        if (model.format_version != kCascadeFormatVersion) {
            throw Error(ErrorKind::VersionMismatch, "cascade format " + std::to_string(model.format_version) +
                                                        ", expected " + std::to_string(kCascadeFormatVersion));
        }
        model.window_w = j.at("window").at(0).get<int>();
        model.window_h = j.at("window").at(1).get<int>();
        for (const auto& f : j.at("feature_pool")) {
            model.feature_pool.push_back({haar_kind_from_string(f.at(0).get<std::string>()), f.at(1).get<int>(),
                                          f.at(2).get<int>(), f.at(3).get<int>(), f.at(4).get<int>()});
        }
        for (const auto& st : j.at("stages")) {
            Stage s;
            s.threshold = threshold_from_json(st.at("threshold"));
            s.trained_far = st.at("trained_far").get<double>();
            s.trained_tpr = st.at("trained_tpr").get<double>();
            s.target_met = st.at("target_met").get<bool>();
            s.loss_bound = st.at("loss_bound").get<std::vector<double>>();
            for (const auto& t : st.at("stumps")) {
                Stump u;
                u.feature_index = t.at("feature").get<int>();
                u.threshold = threshold_from_json(t.at("threshold"));
                u.polarity = t.at("polarity").get<int>();
                u.alpha = t.at("alpha").get<double>();
                u.weighted_error = t.at("error").get<double>();
                if (u.feature_index < 0 || static_cast<std::size_t>(u.feature_index) >= model.feature_pool.size()) {
                    throw Error(ErrorKind::MalformedFile, "stump feature index out of range");
                }
                s.stumps.push_back(u);
            }
            model.stages.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("cascade json: ") + e.what());
    }
    if (model.stages.empty()) throw Error(ErrorKind::MalformedFile, "cascade has no stages");
}

}  // namespace fruitgrader::cascade
