#include <doctest.h>

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fruitgrader/cascade.hpp"
#include "fruitgrader/error.hpp"
#include "fruitgrader/random.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace fruitgrader;
using namespace fruitgrader::cascade;

namespace {

// sum_{k=1..floor(n/p)} (n - k*p + 1)
long placements(int n, int p) {
    const long m = n / p;
    return m * (n + 1) - p * m * (m + 1) / 2;
}

long closed_form_feature_count(int w, int h) {
    long total = 0;
    for (auto [px, py] : {std::pair{2, 1}, {1, 2}, {3, 1}, {1, 3}, {2, 2}}) total += placements(w, px) * placements(h, py);
    return total;
}

// Pixel-by-pixel region difference over population std, straight from the image.
double brute_force_value(const HaarFeature& f, const Image& gray, int ox, int oy, int ww, int wh) {
    double mean = 0.0;
    for (int y = 0; y < wh; ++y)
        for (int x = 0; x < ww; ++x) mean += gray.at(ox + x, oy + y);
    mean /= ww * wh;
    double var = 0.0;
    for (int y = 0; y < wh; ++y)
        for (int x = 0; x < ww; ++x) var += (gray.at(ox + x, oy + y) - mean) * (gray.at(ox + x, oy + y) - mean);
    const double std = std::sqrt(var / (ww * wh));
    if (std < 1e-6) return 0.0;

    const auto [px, py] = haar_parts(f.kind);
    const int pw = f.w / px, ph = f.h / py;
    auto white = [&](int i, int j) {
        switch (f.kind) {
        case HaarKind::ThreeRectH: return i != 1;
        case HaarKind::ThreeRectV: return j != 1;
        case HaarKind::FourRect: return (i + j) % 2 == 0;
        default: return i == 0 && j == 0;
        }
    };
    int n_white = 0;
    for (int j = 0; j < py; ++j)
        for (int i = 0; i < px; ++i) n_white += white(i, j);
    const double black_weight = -static_cast<double>(n_white) / (px * py - n_white);
    double acc = 0.0;
    for (int y = 0; y < f.h; ++y) {
        for (int x = 0; x < f.w; ++x) {
            const double v = gray.at(ox + f.x + x, oy + f.y + y);
            acc += (white(x / pw, y / ph) ? 1.0 : black_weight) * v;
        }
    }
    return acc / std;
}

FeatureMatrix matrix_from(const std::vector<std::vector<float>>& rows) {
    FeatureMatrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t f = 0; f < rows[i].size(); ++f) m.at(i, f) = rows[i][f];
    return m;
}

// Exhaustive (feature, threshold, polarity) scan in tie-break order.
Stump brute_force_stump(const FeatureMatrix& m, const std::vector<int>& labels, const std::vector<double>& w) {
    Stump best;
    double best_err = 2.0;
    for (std::size_t f = 0; f < m.features(); ++f) {
        std::vector<double> cands(m.column(f).begin(), m.column(f).end());
        std::sort(cands.begin(), cands.end());
        cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
        cands.push_back(std::numeric_limits<double>::infinity());
        for (double t : cands) {
            for (int pol : {1, -1}) {
                Stump s{static_cast<int>(f), t, pol, 0.0, 0.0};
                double err = 0.0;
                for (std::size_t i = 0; i < m.samples(); ++i) {
                    if (s.vote(m.at(i, f)) != labels[i]) err += w[i];
                }
                if (err < best_err) {
                    best_err = err;
                    best = s;
                    best.weighted_error = err;
                }
            }
        }
    }
    return best;
}

double stage_score(const Stage& s, const FeatureMatrix& m, std::size_t i) {
    double score = 0.0;
    for (const auto& t : s.stumps) score += t.alpha * t.vote(m.at(i, t.feature_index));
    return score;
}

CascadeModel random_model(int window, int stages, Rng& rng) {
    CascadeModel model;
    model.window_w = model.window_h = window;
    model.feature_pool = generate_feature_pool(window, window, 300, rng());
    for (int s = 0; s < stages; ++s) {
        Stage st;
        const int n = 1 + static_cast<int>(uniform_index(rng, 4));
        double total = 0.0;
        for (int k = 0; k < n; ++k) {
            Stump t{static_cast<int>(uniform_index(rng, model.feature_pool.size())), uniform(rng, -1.5, 1.5),
                    bernoulli(rng, 0.5) ? 1 : -1, uniform(rng, 0.1, 1.0), 0.2};
            total += t.alpha;
            st.stumps.push_back(t);
        }
        st.threshold = uniform(rng, -0.6, 0.6) * total;
        model.stages.push_back(st);
    }
    return model;
}

Image gray_noise(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    return testing::random_image(w, h, 1, rng);
}

struct Corpus {
    std::vector<dataset::DetectionSample> samples;
    std::vector<Image> images;
};

Corpus scenes(int n, int objects, std::uint64_t seed) {
    Rng rng(seed);
    Corpus c;
    for (int i = 0; i < n; ++i) {
        auto s = testing::ellipse_scene(96, 96, objects, rng);
        c.samples.push_back(testing::scene_sample(s, "mango", &rng));
        c.images.push_back(std::move(s.image));
    }
    return c;
}

}  // namespace

TEST_CASE("24x24 enumeration matches the closed-form count") {
    CHECK(closed_form_feature_count(24, 24) == 162336);
    CHECK(enumerate_features(24, 24).size() == 162336u);
    CHECK(enumerate_features(19, 24).size() == static_cast<std::size_t>(closed_form_feature_count(19, 24)));
    for (const auto& f : enumerate_features(12, 9)) {
        const auto [px, py] = haar_parts(f.kind);
        REQUIRE(f.w % px == 0);
        REQUIRE(f.h % py == 0);
        REQUIRE(f.x + f.w <= 12);
        REQUIRE(f.y + f.h <= 9);
    }
}

TEST_CASE("feature pool budget and seeding") {
    const auto a = generate_feature_pool(24, 24, 5000, 7);
    CHECK(a.size() == 5000u);
    CHECK(a == generate_feature_pool(24, 24, 5000, 7));
    CHECK(a != generate_feature_pool(24, 24, 5000, 8));
    CHECK(generate_feature_pool(10, 10, 1'000'000, 1).size() ==
          static_cast<std::size_t>(closed_form_feature_count(10, 10)));
    try {
        generate_feature_pool(7, 24, 100, 0);
        FAIL("expected WindowTooSmall");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::WindowTooSmall);
    }
}

TEST_CASE("haar kind names round trip") {
    for (auto k : {HaarKind::TwoRectH, HaarKind::TwoRectV, HaarKind::ThreeRectH, HaarKind::ThreeRectV,
                   HaarKind::FourRect}) {
        CHECK(haar_kind_from_string(to_string(k)) == k);
    }
    CHECK_THROWS_AS(haar_kind_from_string("five_rect"), Error);
}

TEST_CASE("eval_feature at scale 1 equals brute-force region difference over std") {
    Rng rng(11);
    const Image img = testing::random_image(40, 32, 1, rng);
    const IntegralImage ii(img);
    const auto pool = enumerate_features(16, 12);
    double worst = 0.0;
    for (int t = 0; t < 2000; ++t) {
        const auto& f = pool[uniform_index(rng, pool.size())];
        const int ox = static_cast<int>(uniform_index(rng, 40 - 16 + 1));
        const int oy = static_cast<int>(uniform_index(rng, 32 - 12 + 1));
        const double expect = brute_force_value(f, img, ox, oy, 16, 12);
        const double got = eval_feature(f, ii, ox, oy, 1.0, 16, 12);
        worst = std::max(worst, std::abs(got - expect) / std::max(1.0, std::abs(expect)));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("constant windows give zero for every feature") {
    const IntegralImage ii(Image(30, 30, 1, 0.4f));
    for (const auto& f : enumerate_features(10, 10)) {
        REQUIRE(eval_feature(f, ii, 3, 5, 1.0, 10, 10) == 0.0);
        REQUIRE(eval_feature(f, ii, 0, 0, 2.5, 10, 10) == 0.0);
    }
}

TEST_CASE("black weights cancel a constant offset at any scale") {
    for (double s : {1.0, 1.1, 1.37, 2.0}) {
        for (const auto& f : enumerate_features(9, 9)) {
            double net = 0.0;
            for (const auto& r : scaled_rects(f, s)) net += r.weight * r.w * r.h;
            REQUIRE(std::abs(net) < 1e-9);
        }
    }
}

TEST_CASE("two_rect_h spanning a dark/light edge has the largest magnitude") {
    Image img(24, 24, 1, 0.0f);
    for (int y = 0; y < 24; ++y)
        for (int x = 12; x < 24; ++x) img.at(x, y) = 1.0f;
    const IntegralImage ii(img);
    const double edge = std::abs(eval_feature({HaarKind::TwoRectH, 0, 0, 24, 24}, ii, 0, 0, 1.0, 24, 24));
    CHECK(edge > 0.0);
    for (const auto& f : enumerate_features(24, 24)) {
        if (f.kind != HaarKind::TwoRectH) continue;
        REQUIRE(std::abs(eval_feature(f, ii, 0, 0, 1.0, 24, 24)) <= edge + 1e-12);
    }
}

TEST_CASE("eval_feature rejects windows outside the image") {
    const IntegralImage ii(Image(20, 20, 1, 0.5f));
    const HaarFeature f{HaarKind::TwoRectH, 0, 0, 4, 4};
    CHECK_NOTHROW(eval_feature(f, ii, 10, 10, 1.0, 10, 10));
    for (auto [x, y, s] : {std::tuple{11, 0, 1.0}, {0, -1, 1.0}, {0, 0, 2.1}}) {
        try {
            eval_feature(f, ii, x, y, s, 10, 10);
            FAIL("expected OutOfBounds");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::OutOfBounds);
        }
    }
}

TEST_CASE("parallel feature matrix equals the serial reference bit for bit") {
    Rng rng(5);
    std::vector<WindowRef> windows;
    for (int i = 0; i < 60; ++i) {
        auto ii = std::make_shared<const IntegralImage>(testing::random_image(48, 40, 1, rng));
        const double scale = uniform(rng, 1.0, 1.6);
        const int x = static_cast<int>(uniform_index(rng, 48 - static_cast<int>(std::lround(16 * scale)) + 1));
        const int y = static_cast<int>(uniform_index(rng, 40 - static_cast<int>(std::lround(16 * scale)) + 1));
        windows.push_back({ii, x, y, scale});
    }
    const auto pool = generate_feature_pool(16, 16, 500, 3);
    const auto serial = reference::compute_feature_matrix(pool, windows, 16, 16);
    for (int threads : {1, 3, 8}) {
        omp_set_num_threads(threads);
        CHECK(compute_feature_matrix(pool, windows, 16, 16) == serial);
    }
    omp_set_num_threads(1);
}

TEST_CASE("train_stump on four hand-set samples matches exhaustive search") {
    const auto m = matrix_from({{0.5f, 3.0f, -1.0f}, {0.25f, 2.0f, -1.0f}, {0.75f, 1.0f, 4.0f}, {0.5f, 0.0f, 2.0f}});
    const std::vector<int> labels{1, -1, 1, -1};
    const std::vector<double> w{0.375, 0.125, 0.25, 0.25};
    const Stump got = train_stump(m, labels, w);
    const Stump want = brute_force_stump(m, labels, w);
    CHECK(got.feature_index == want.feature_index);
    CHECK(got.threshold == want.threshold);
    CHECK(got.polarity == want.polarity);
    CHECK(got.weighted_error == want.weighted_error);
    CHECK(got.alpha == doctest::Approx(0.5 * std::log((1 - got.weighted_error) / got.weighted_error)));
}

TEST_CASE("train_stump matches exhaustive search on random dyadic problems") {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 4 + uniform_index(rng, 6), nf = 1 + uniform_index(rng, 4);
        std::vector<std::vector<float>> rows(n, std::vector<float>(nf));
        for (auto& r : rows)
            for (auto& v : r) v = static_cast<float>(uniform_index(rng, 5));  // many ties
        std::vector<int> labels(n);
        for (auto& l : labels) l = bernoulli(rng, 0.5) ? 1 : -1;
        labels[0] = 1;
        labels[1] = -1;
        // Integer parts of 256 keep every partial sum exact.
        std::vector<int> parts(n, 1);
        for (int k = 0; k < 256 - static_cast<int>(n); ++k) ++parts[uniform_index(rng, n)];
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) w[i] = parts[i] / 256.0;

        const auto m = matrix_from(rows);
        const Stump want = brute_force_stump(m, labels, w);
        if (want.weighted_error >= 0.5) {
            CHECK_THROWS_AS(train_stump(m, labels, w), Error);
            continue;
        }
        const Stump got = train_stump(m, labels, w);
        REQUIRE(got.feature_index == want.feature_index);
        REQUIRE(got.threshold == want.threshold);
        REQUIRE(got.polarity == want.polarity);
        REQUIRE(got.weighted_error == want.weighted_error);
    }
}

TEST_CASE("train_stump edge cases") {
    SUBCASE("separable feature has zero error") {
        const auto m = matrix_from({{0.1f, 5.0f}, {0.2f, 5.0f}, {0.8f, 5.0f}, {0.9f, 5.0f}});
        const Stump s = train_stump(m, std::vector<int>{-1, -1, 1, 1}, std::vector<double>(4, 0.25));
        CHECK(s.feature_index == 0);
        CHECK(s.weighted_error <= 0.25);
        CHECK(s.weighted_error == 0.0);
        CHECK(s.threshold == doctest::Approx(0.8));
        CHECK(s.alpha > 0.0);
        CHECK(std::isfinite(s.alpha));
    }
    SUBCASE("constant features are a degenerate split") {
        const auto m = matrix_from({{1.0f}, {1.0f}, {1.0f}, {1.0f}});
        try {
            train_stump(m, std::vector<int>{1, -1, 1, -1}, std::vector<double>(4, 0.25));
            FAIL("expected DegenerateSplit");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::DegenerateSplit);
        }
    }
    SUBCASE("weights") {
        const auto m = matrix_from({{1.0f}, {2.0f}});
        try {
            train_stump(m, std::vector<int>{1, -1}, std::vector<double>{1.0, 0.0});
            FAIL("expected DegenerateWeights");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::DegenerateWeights);
        }
        try {
            train_stump(m, std::vector<int>{1, -1}, std::vector<double>{0.5, 0.6});
            FAIL("expected InvalidArgument");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::InvalidArgument);
        }
    }
}

TEST_CASE("train_stage stopping rule and rates") {
    SUBCASE("separable windows need one stump") {
        std::vector<std::vector<float>> rows;
        std::vector<int> labels;
        for (int i = 0; i < 20; ++i) {
            rows.push_back({static_cast<float>(i), 1.0f + i % 3});
            labels.push_back(i >= 10 ? 1 : -1);
        }
        const Stage s = train_stage(matrix_from(rows), labels, {0.5, 0.995, 50});
        CHECK(s.stumps.size() == 1u);
        CHECK(s.trained_far == 0.0);
        CHECK(s.trained_tpr == 1.0);
        CHECK(s.target_met);
    }

    Rng rng(4);
    std::vector<std::vector<float>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 300; ++i) {
        const int y = i < 100 ? 1 : -1;
        std::vector<float> r(12);
        for (auto& v : r) v = static_cast<float>(uniform(rng, 0, 1) + (y > 0 ? 0.25 : 0.0) * bernoulli(rng, 0.6));
        rows.push_back(r);
        labels.push_back(y);
    }
    const auto m = matrix_from(rows);

    SUBCASE("far target 0.5 is met with the TPR floor held") {
        const Stage s = train_stage(m, labels, {0.5, 0.995, 50});
        CHECK(s.target_met);
        CHECK(s.trained_far <= 0.5);
        CHECK(s.trained_tpr >= 0.995);
        std::size_t accepted_neg = 0, accepted_pos = 0;
        for (std::size_t i = 0; i < m.samples(); ++i) {
            const bool acc = stage_score(s, m, i) >= s.threshold;
            (labels[i] > 0 ? accepted_pos : accepted_neg) += acc;
        }
        CHECK(accepted_neg / 200.0 == s.trained_far);
        CHECK(accepted_pos / 100.0 == s.trained_tpr);
    }
    SUBCASE("tpr floor 1 accepts every positive") {
        const Stage s = train_stage(m, labels, {0.3, 1.0, 50});
        double min_pos = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < 100; ++i) min_pos = std::min(min_pos, stage_score(s, m, i));
        CHECK(s.threshold <= min_pos);
        CHECK(s.trained_tpr == 1.0);
    }
    SUBCASE("loss bound decreases strictly with every stump") {
        const Stage s = train_stage(m, labels, {0.05, 0.995, 30});
        REQUIRE(s.loss_bound.size() == s.stumps.size());
        REQUIRE(s.stumps.size() > 3);
        double prev = 1.0;
        for (std::size_t k = 0; k < s.stumps.size(); ++k) {
            CHECK(s.stumps[k].weighted_error < 0.5);
            CHECK(s.stumps[k].alpha > 0.0);
            CHECK(s.loss_bound[k] < prev);
            prev = s.loss_bound[k];
        }
    }
    SUBCASE("unreachable target is flagged") {
        const Stage s = train_stage(m, labels, {0.001, 0.995, 2});
        CHECK(s.stumps.size() == 2u);
        CHECK_FALSE(s.target_met);
        CHECK(s.trained_far > 0.001);
    }
    SUBCASE("tracked negatives constrain the rate too") {
        std::vector<std::size_t> tracked;
        for (std::size_t i = 100; i < 140; ++i) tracked.push_back(i);
        const Stage s = train_stage(m, labels, {0.2, 0.995, 50}, tracked);
        std::size_t hits = 0;
        for (std::size_t i : tracked) hits += stage_score(s, m, i) >= s.threshold;
        CHECK(hits / 40.0 <= 0.2);
    }
}

TEST_CASE("classify_window with early exit equals full stage-by-stage evaluation") {
    Rng rng(8);
    for (int t = 0; t < 400; ++t) {
        const CascadeModel model = random_model(12, 4, rng);
        const Image img = testing::random_image(40, 40, 1, rng);
        const IntegralImage ii(img);
        const double scale = std::vector<double>{1.0, 1.25, 1.5, 2.0}[uniform_index(rng, 4)];
        const int side = static_cast<int>(std::lround(12 * scale));
        const int x = static_cast<int>(uniform_index(rng, 40 - side + 1));
        const int y = static_cast<int>(uniform_index(rng, 40 - side + 1));

        std::vector<double> scores;
        for (const auto& st : model.stages) {
            double s = 0.0;
            for (const auto& stump : st.stumps) {
                const float v = static_cast<float>(eval_feature(model.feature_pool[stump.feature_index], ii, x, y,
                                                                scale, 12, 12));
                s += stump.alpha * stump.vote(v);
            }
            scores.push_back(s);
        }
        bool accepted = true;
        double margin = 0.0;
        int evaluated = 0;
        for (std::size_t k = 0; k < scores.size(); ++k) {
            ++evaluated;
            margin += scores[k] - model.stages[k].threshold;
            if (scores[k] < model.stages[k].threshold) {
                accepted = false;
                break;
            }
        }
        const auto d = classify_window(model, ii, x, y, scale);
        REQUIRE(d.accepted == accepted);
        REQUIRE(d.stages_evaluated == evaluated);
        REQUIRE(d.score == doctest::Approx(margin).epsilon(1e-12));
    }
}

TEST_CASE("permissive and constant-window stages") {
    CascadeModel model;
    model.window_w = model.window_h = 10;
    model.feature_pool = {{HaarKind::TwoRectV, 0, 0, 10, 10}};
    model.stages.push_back({{Stump{0, 0.0, 1, 1.0, 0.1}}, -1.0});
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        CHECK(classify_window(model, testing::random_image(10, 10, 1, rng)).accepted);
    }
    // Constant window: feature 0, vote +1 (0 >= 0), score 1.
    model.stages[0].threshold = 1.0;
    CHECK(classify_window(model, Image(10, 10, 1, 0.3f)).accepted);
    model.stages[0].threshold = 1.5;
    CHECK_FALSE(classify_window(model, Image(10, 10, 1, 0.3f)).accepted);
}

TEST_CASE("non_max_suppression") {
    const Detection a{{10, 10, 20, 20}, 2.0};
    CHECK(non_max_suppression({a, a}, 0.3).size() == 1u);

    Rng rng(2);
    std::vector<Detection> cands;
    for (int i = 0; i < 200; ++i) {
        cands.push_back({{std::round(uniform(rng, 0, 80)), std::round(uniform(rng, 0, 80)), 20, 20},
                         std::round(uniform(rng, 0, 10))});
    }
    const auto once = non_max_suppression(cands, 0.3);
    CHECK(non_max_suppression(once, 0.3) == once);
    for (std::size_t i = 0; i < once.size(); ++i) {
        for (std::size_t j = i + 1; j < once.size(); ++j) {
            REQUIRE(imaging::iou(once[i].box, once[j].box) <= 0.3);
            REQUIRE((once[i].score > once[j].score ||
                     (once[i].score == once[j].score && (once[i].box.x < once[j].box.x ||
                                                         (once[i].box.x == once[j].box.x &&
                                                          once[i].box.y <= once[j].box.y)))));
        }
    }
    auto shuffled = cands;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(non_max_suppression(shuffled, 0.3) == once);
}

TEST_CASE("scan covers the whole pyramid and detect is deterministic") {
    CascadeModel accept_all;
    accept_all.window_w = accept_all.window_h = 12;
    accept_all.feature_pool = {{HaarKind::TwoRectH, 0, 0, 12, 12}};
    accept_all.stages.push_back({{Stump{0, 0.0, 1, 1.0, 0.1}}, -std::numeric_limits<double>::infinity()});
    const Image img = gray_noise(50, 40, 3);
    const ScanOptions opt{1.25, 3, 0.3, 1};

    std::size_t expected = 0;
    for (double s = 1.0; std::lround(12 * s) <= 40; s *= 1.25) {
        const long side = std::lround(12 * s);
        const long step = std::max(1L, std::lround(3 * s));
        expected += static_cast<std::size_t>(((50 - side) / step + 1) * ((40 - side) / step + 1));
    }
    CHECK(scan_windows(accept_all, img, opt).size() == expected);

    CascadeModel reject_all = accept_all;
    reject_all.stages[0].threshold = std::numeric_limits<double>::infinity();
    CHECK(detect(reject_all, img, opt).empty());

    Rng rng(9);
    const CascadeModel model = random_model(12, 2, rng);
    const Image busy = gray_noise(80, 64, 4);
    omp_set_num_threads(1);
    const auto serial = detect(model, busy);
    omp_set_num_threads(4);
    CHECK(detect(model, busy) == serial);
    CHECK(detect(model, busy) == serial);
    omp_set_num_threads(1);

    try {
        detect(model, gray_noise(11, 40, 1));
        FAIL("expected ImageSmallerThanWindow");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ImageSmallerThanWindow);
    }
}

TEST_CASE("auto window size") {
    const std::vector<BBox> wide{{0, 0, 50, 40}, {0, 0, 30, 24}, {0, 0, 10, 10}, {0, 0, 0, 5}};
    CHECK(auto_window_size(wide) == WindowSize{24, 19});
    const std::vector<BBox> tall{{0, 0, 10, 40}};
    CHECK(auto_window_size(tall) == WindowSize{8, 24});
    CHECK_THROWS_AS(auto_window_size(std::vector<BBox>{}), Error);
}

TEST_CASE("cascade config validation") {
    CascadeTrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.false_alarm_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.feature_budget = 99;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.num_cascade_stages = 0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("train_cascade on synthetic ellipses") {
    const Corpus train = scenes(40, 2, 101);
    CascadeTrainConfig cfg;
    cfg.false_alarm_rate = 0.5;
    cfg.num_cascade_stages = 3;
    cfg.object_training_size = WindowSize{24, 24};
    cfg.feature_budget = 1500;
    cfg.seed = 3;
    CascadeTrainReport report;
    const CascadeModel model = train_cascade(train.samples, train.images, "mango", {}, cfg, &report);

    CHECK(model.window_w == 24);
    CHECK(model.window_h == 24);
    REQUIRE(model.stages.size() == 3u);
    double product = 1.0;
    for (const auto& s : model.stages) {
        CHECK(s.target_met);
        CHECK(s.trained_far <= 0.5);
        CHECK(s.trained_tpr >= 0.995);
        for (std::size_t k = 0; k < s.loss_bound.size(); ++k) {
            CHECK(s.loss_bound[k] < (k ? s.loss_bound[k - 1] : 1.0));
        }
        for (const auto& t : s.stumps) CHECK(static_cast<std::size_t>(t.feature_index) < model.feature_pool.size());
        product *= s.trained_far;
    }
    CHECK(report.training_negative_far <= product * (1 + 1e-9));
    CHECK(report.training_negative_far <= 0.125 * (1 + 1e-9));

    SUBCASE("same seed, same model") {
        CHECK(train_cascade(train.samples, train.images, "mango", {}, cfg) == model);
    }
    SUBCASE("json round trip") {
        const nlohmann::json j = model;
        const auto back = j.get<CascadeModel>();
        CHECK(back == model);
        auto bad = j;
        bad["format_version"] = 99;
        try {
            (void)bad.get<CascadeModel>();
            FAIL("expected VersionMismatch");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::VersionMismatch);
        }
    }
    SUBCASE("no positives of the requested class") {
        try {
            train_cascade(train.samples, train.images, "apple", {}, cfg);
            FAIL("expected NoPositives");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::NoPositives);
        }
    }
}

TEST_CASE("trained detector finds a planted object") {
    const Corpus train = scenes(60, 3, 202);
    CascadeTrainConfig cfg;
    cfg.false_alarm_rate = 0.5;
    cfg.num_cascade_stages = 10;
    cfg.feature_budget = 2000;
    cfg.seed = 5;
    const CascadeModel model = train_cascade(train.samples, train.images, "mango", {}, cfg);

    Rng rng(303);
    const ScanOptions opt{1.1, 2, 0.3, 3};
    for (int t = 0; t < 5; ++t) {
        const auto scene = testing::ellipse_scene(96, 96, 1, rng);
        const auto dets = detect(model, scene.image, opt);
        REQUIRE(dets.size() == 1u);
        CHECK(imaging::iou(dets[0].box, scene.boxes[0]) >= 0.5);
        CHECK(detect(model, scene.image, opt) == dets);
    }
}

TEST_CASE("train_cascade input errors") {
    CascadeTrainConfig cfg;
    cfg.feature_budget = 200;
    std::vector<Image> pos(5, Image(12, 12, 1, 0.5f));
    try {
        train_cascade(pos, {}, cfg, {12, 12});
        FAIL("expected NoNegatives");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NoNegatives);
    }
    try {
        train_cascade({}, {{gray_noise(30, 30, 1), {}}}, cfg, {12, 12});
        FAIL("expected NoPositives");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NoPositives);
    }
}
