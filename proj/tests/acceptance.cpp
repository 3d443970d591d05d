// Acceptance run: one PASS/FAIL/SKIP line per criterion, exit status 1 if
// anything failed.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "fruitgrader/codec.hpp"
#include "fruitgrader/dataset.hpp"
#include "fruitgrader/error.hpp"
#include "fruitgrader/eval.hpp"
#include "fruitgrader/pipeline.hpp"
#include "fruitgrader/service.hpp"
#include "fruitgrader/training.hpp"
#include "stub_models.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace fruitgrader;

namespace {

enum class Status { Pass, Fail, Skip };

struct Outcome {
    Status status = Status::Pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::Pass : Status::Fail, std::move(detail)}; }

// ---- integral image

Outcome integral_oracle() {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> side(1, 64);
    std::size_t rects = 0, mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        const int w = side(rng), h = side(rng);
        const auto img = testing::random_image(w, h, 1, rng);
        const imaging::IntegralImage ii(img);
        for (int r = 0; r < 20; ++r) {
            std::uniform_int_distribution<int> xs(0, w), ys(0, h);
            int x0 = xs(rng), x1 = xs(rng), y0 = ys(rng), y1 = ys(rng);
            if (x0 > x1) std::swap(x0, x1);
            if (y0 > y1) std::swap(y0, y1);
            double brute = 0.0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) brute += img.at(x, y);
            mismatches += ii.rect_sum_unchecked(x0, y0, x1 - x0, y1 - y0) != brute;
            ++rects;
        }
    }
    return verdict(mismatches == 0, fmt("1000 images, %zu rects, %zu mismatches", rects, mismatches));
}

// ---- gradient check

template <typename T>
nn::BasicTensor<T> random_batch(int n, nn::InputShape in, std::uint64_t seed) {
    nn::BasicTensor<T> t({n, in.channels, in.height, in.width});
    Rng rng(seed);
    for (auto& v : t.data()) v = static_cast<T>(uniform(rng, 0.0, 1.0));
    return t;
}

Outcome gradient_check() {
    const int labels[] = {0, 2, 1, 2};
    const std::span<const int> lab(labels);

    const nn::Network toy(nn::build_linear_softmax({3, 6, 6}, 3), 1);
    const auto toy_r = nn::gradient_check(toy, random_batch<float>(4, toy.spec().input, 2), lab);

    const nn::BasicNetwork<double> conv(nn::build_tiny_conv({3, 8, 8}, 3), 3);
    const auto conv_r = nn::gradient_check(conv, random_batch<double>(4, conv.spec().input, 4), lab);

    const nn::Network res32(nn::build_mini_resnet({3, 8, 8}, 3), 5);
    const auto res32_r = nn::gradient_check(res32, random_batch<float>(4, res32.spec().input, 6), lab);

    const bool ok = toy_r.max_rel_error < 1e-3 && conv_r.max_rel_error < 1e-3 && res32_r.max_rel_error < 1e-2;
    return verdict(ok, fmt("linear_softmax f32 %.2e, tiny_conv f64 %.2e (limit 1e-3); mini_resnet f32 %.2e at %s "
                           "(limit 1e-2); %zu coordinates",
                           toy_r.max_rel_error, conv_r.max_rel_error, res32_r.max_rel_error,
                           res32_r.worst_tensor.c_str(), toy_r.coordinates + conv_r.coordinates + res32_r.coordinates));
}

// ---- schedule

Outcome schedule_math() {
    nn::TrainConfig test2;
    test2.initial_learn_rate = 0.01;
    test2.schedule = nn::Schedule::Piecewise;
    test2.drop_period = 3;
    test2.drop_factor = 0.1;
    nn::TrainConfig final_recipe;
    final_recipe.initial_learn_rate = 0.001;
    final_recipe.schedule = nn::Schedule::Piecewise;
    final_recipe.drop_period = 1;
    final_recipe.drop_factor = 0.01;
    const bool ok = nn::lr_at_epoch(test2, 1) == 0.01 && nn::lr_at_epoch(test2, 3) == 0.01 &&
                    nn::lr_at_epoch(test2, 4) == 0.001 && nn::lr_at_epoch(final_recipe, 1) == 0.001 &&
                    nn::lr_at_epoch(final_recipe, 2) == 1e-5;
    return verdict(ok, fmt("epoch 4 of (0.01, 3, 0.1) = %g; epoch 2 of (0.001, 1, 0.01) = %g",
                           nn::lr_at_epoch(test2, 4), nn::lr_at_epoch(final_recipe, 2)));
}

// ---- classifier learnability

Outcome learnability() {
    Rng rng(2024);
    std::vector<imaging::Image> train_img, valid_img;
    std::vector<int> train_lab, valid_lab;
    for (int i = 0; i < 90; ++i) {
        const int cls = i % 3;
        auto img = testing::blob_image(cls, 64, rng);
        if (i < 60) {
            train_img.push_back(std::move(img));
            train_lab.push_back(cls);
        } else {
            valid_img.push_back(std::move(img));
            valid_lab.push_back(cls);
        }
    }
    const nn::InMemorySource train(train_img, train_lab), valid(valid_img, valid_lab);

    nn::TrainConfig cfg;
    cfg.initial_learn_rate = 0.01;
    cfg.mini_batch_size = 32;
    nn::TrainOptions opt;
    opt.init_seed = 11;
    // Rounds of 10 epochs, scored in infer mode between rounds. Velocity
    // restarts each round; the schedule is constant so nothing else changes.
    cfg.max_epochs = 10;
    std::optional<nn::Network> net;
    int epochs = 0;
    double train_acc = 0.0, valid_acc = 0.0;
    while (epochs < 200) {
        opt.initial = net;
        cfg.shuffle_seed = derive_seed(7, static_cast<std::uint64_t>(epochs));
        net = nn::train_classifier(train, nullptr, nn::build_mini_resnet({3, 64, 64}, 3), cfg, opt).net;
        epochs += cfg.max_epochs;
        train_acc = nn::evaluate_accuracy(*net, train);
        valid_acc = nn::evaluate_accuracy(*net, valid);
        if (train_acc >= 0.99 && valid_acc >= 0.9) break;
    }
    return verdict(train_acc >= 0.99 && valid_acc >= 0.9,
                   fmt("mini_resnet, %d epochs: train %.3f, valid %.3f", epochs, train_acc, valid_acc));
}

// ---- cascade

struct Corpus {
    std::vector<dataset::DetectionSample> samples;
    std::vector<imaging::Image> images;
};

Corpus scenes(int n, std::uint64_t seed, bool jitter) {
    Rng rng(seed);
    Corpus c;
    for (int i = 0; i < n; ++i) {
        auto s = testing::ellipse_scene(96, 96, 2, rng);
        c.samples.push_back(testing::scene_sample(s, "mango", jitter ? &rng : nullptr));
        c.images.push_back(std::move(s.image));
    }
    return c;
}

// Also covers the AdaBoost bound, which is checked on the same model.
std::pair<Outcome, Outcome> cascade_guarantees() {
    const auto train = scenes(100, 31, true);
    Rng rng(32);
    std::vector<cascade::NegativeSource> extra;
    for (int i = 0; i < 50; ++i) extra.push_back({testing::textured_noise(96, 96, rng), {}});

    cascade::CascadeTrainConfig cfg;
    cfg.false_alarm_rate = 0.5;
    cfg.num_cascade_stages = 5;
    cfg.seed = 33;
    cascade::CascadeTrainReport report;
    const auto model = cascade::train_cascade(train.samples, train.images, "mango", extra, cfg, &report);

    std::size_t positives = 0;
    for (const auto& s : train.samples) positives += s.objects.size();
    bool stages_ok = model.stages.size() == 5;
    double worst_far = 0.0;
    for (const auto& st : model.stages) {
        stages_ok = stages_ok && st.trained_far <= 0.5;
        worst_far = std::max(worst_far, st.trained_far);
    }
    const bool far_ok = report.training_negative_far <= std::pow(0.5, 5) * (1 + 1e-9);

    const auto held = scenes(20, 34, false);
    cascade::ScanOptions scan;
    scan.min_neighbors = 3;
    std::vector<std::vector<cascade::Detection>> dets;
    std::vector<std::vector<imaging::BBox>> truths;
    for (std::size_t i = 0; i < held.images.size(); ++i) {
        dets.push_back(cascade::detect(model, held.images[i], scan));
        auto& t = truths.emplace_back();
        for (const auto& o : held.samples[i].objects) t.push_back(o.box);
    }
    const auto pr = eval::detection_pr(dets, truths, 0.5);
    const bool pr_ok = pr.recall >= 0.9 && pr.precision >= 0.8;

    Outcome guarantees = verdict(
        stages_ok && far_ok && pr_ok,
        fmt("%zu positives, 150 negative images; max stage far %.3f; training far %.5f (limit %.5f); held-out "
            "recall %.3f, precision %.3f (%zu TP, %zu FP, %zu FN)",
            positives, worst_far, report.training_negative_far, std::pow(0.5, 5), pr.recall, pr.precision,
            pr.true_positives, pr.false_positives, pr.false_negatives));

    std::size_t steps = 0;
    bool decreasing = true;
    for (const auto& st : model.stages) {
        for (std::size_t k = 1; k < st.loss_bound.size(); ++k) {
            decreasing = decreasing && st.loss_bound[k] < st.loss_bound[k - 1];
            ++steps;
        }
        decreasing = decreasing && !st.loss_bound.empty() && st.loss_bound.front() < 1.0;
    }
    Outcome bound = verdict(decreasing, fmt("%zu stages, %zu stump additions after the first, all strictly decreasing",
                                            model.stages.size(), steps));
    if (!decreasing) bound.detail = "bound did not decrease at some stump";
    return {guarantees, bound};
}

// ---- bbox rescale

Outcome bbox_round_trip() {
    Rng rng(5);
    dataset::DetectionSample s{"x.png", 640, 640, {}};
    for (int i = 0; i < 1000; ++i) {
        const double x0 = uniform(rng, 0, 630), y0 = uniform(rng, 0, 630);
        const double x1 = uniform(rng, x0 + 1, 640), y1 = uniform(rng, y0 + 1, 640);
        s.objects.push_back({"mango", {x0, y0, x1 - x0, y1 - y0}});
    }
    const imaging::Image img(640, 640, 3, 0.5f);
    const auto [small, down] = dataset::resize_with_boxes(s, img, 224, 224);
    const auto [big, up] = dataset::resize_with_boxes(down, small, 640, 640);
    double worst = 0.0;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
        const auto& a = s.objects[i].box;
        const auto& b = up.objects[i].box;
        worst = std::max({worst, std::abs(a.x - b.x), std::abs(a.y - b.y), std::abs(a.right() - b.right()),
                          std::abs(a.bottom() - b.bottom())});
    }
    return verdict(up.objects.size() == 1000 && worst <= 0.5, fmt("1000 boxes, max error %.3g px", worst));
}

// ---- persistence

std::vector<imaging::Image> rgb_scenes(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<imaging::Image> out;
    for (int i = 0; i < n; ++i) {
        const auto s = testing::ellipse_scene(96, 96, 1 + i % 3, rng);
        imaging::Image rgb(96, 96, 3);
        for (int y = 0; y < 96; ++y)
            for (int x = 0; x < 96; ++x)
                for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = s.image.at(x, y);
        out.push_back(std::move(rgb));
    }
    return out;
}

Outcome persistence(const cascade::CascadeModel& detector) {
    testing::TempDir dir;
    auto model = testing::stub_pipeline(detector, 3, 0);  // every crop triggers the disease model
    pipeline::save_pipeline(model, dir / "model.fgpm");
    const auto loaded = pipeline::load_pipeline(dir / "model.fgpm");
    std::size_t reports = 0;
    bool identical = loaded == model;
    for (const auto& img : rgb_scenes(10, 8)) {
        const auto a = pipeline::grade_image(model, img);
        const auto b = pipeline::grade_image(loaded, img);
        identical = identical && a == b;
        reports += a.size();
    }
    const auto bytes = imaging::read_file_bytes(dir / "model.fgpm");
    Rng rng(9);
    int caught = 0;
    const int flips = 500;
    for (int t = 0; t < flips; ++t) {
        auto copy = bytes;
        copy[uniform_index(rng, copy.size())] ^= static_cast<std::uint8_t>(1 + uniform_index(rng, 255));
        try {
            pipeline::deserialize_pipeline(copy);
        } catch (const Error& e) {
            caught += e.kind() == ErrorKind::CorruptContainer;
        }
    }
    return verdict(identical && reports > 0 && caught == flips,
                   fmt("%zu reports bit-identical after reload: %s; %d/%d byte flips detected", reports,
                       identical ? "yes" : "no", caught, flips));
}

// ---- pipeline equivalence

Outcome pipeline_equivalence(const cascade::CascadeModel& detector) {
    testing::TempDir dir;
    service::ServiceConfig cfg;
    cfg.image_dir = dir / "images";
    const auto model = testing::stub_pipeline(detector, 4);
    service::Service svc(cfg, service::LoadedModels::from_pipeline(model));
    using nlohmann::json;
    std::size_t boxes = 0, mismatches = 0;
    for (const auto& img : rgb_scenes(20, 12)) {
        const auto png = imaging::encode_png(img);
        const std::string id = svc.upload(std::string(png.begin(), png.end())).json()["image_id"];
        const json req{{"image_id", id}};
        const auto graded = svc.grade(req.dump()).json()["detections"];
        const auto detected = svc.detect(req.dump()).json()["boxes"];
        if (graded.size() != detected.size()) {
            ++mismatches;
            continue;
        }
        for (std::size_t k = 0; k < graded.size(); ++k) {
            json composed{{"box", detected[k]["box"]}, {"score", detected[k]["score"]}};
            json creq{{"image_id", id}, {"box", detected[k]["box"]}, {"model", "ripeness"}};
            composed["ripeness"] = svc.classify(creq.dump()).json();
            const auto& trig = model.disease_trigger;
            if (std::find(trig.begin(), trig.end(), composed["ripeness"]["label"]) != trig.end()) {
                creq["model"] = "disease";
                composed["disease"] = svc.classify(creq.dump()).json();
            }
            mismatches += composed != graded[k];
            ++boxes;
        }
    }
    return verdict(mismatches == 0 && boxes > 0, fmt("20 images, %zu boxes, %zu mismatches", boxes, mismatches));
}

// ---- dataset-conditional

Outcome dataset_conditional() {
    const char* weights = std::getenv("FRUITGRADER_PRETRAINED");
    const std::pair<const char*, const char*> sets[] = {{"ripeness", std::getenv("FRUITGRADER_RIPENESS_DATA")},
                                                         {"disease", std::getenv("FRUITGRADER_DISEASE_DATA")}};
    if (!weights || (!sets[0].second && !sets[1].second)) {
        return {Status::Skip,
                "set FRUITGRADER_PRETRAINED and FRUITGRADER_RIPENESS_DATA and/or FRUITGRADER_DISEASE_DATA"};
    }
    testing::TempDir dir;
    std::string detail;
    bool ok = true;
    for (const auto& [name, data] : sets) {
        if (!data) continue;
        const std::string model = (dir / (std::string(name) + ".fgpm")).string();
        const int trained =
            cli::cli_main({"fruitgrader", "train-classifier", "--data", data, "--arch", "resnet18", "--pretrained",
                           weights, "--lr", "0.001", "--batch", "32", "--epochs", "10", "--drop-factor", "0.01",
                           "--drop-period", "1", "--augment", name, "--out", model, "--seed", "1"});
        const int evaluated = trained == 0 ? cli::cli_main({"fruitgrader", "evaluate", "--model", model, "--data",
                                                            data, "--format", "text", "--seed", "1"})
                                           : trained;
        ok = ok && evaluated == 0;
        detail += std::string(name) + (evaluated == 0 ? " reported; " : " failed; ");
    }
    return verdict(ok, detail);
}

}  // namespace

int main() {
    int failed = 0;
    const auto report = [&](const char* name, const std::function<Outcome()>& run) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {Status::Fail, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Fail ? "FAIL" : "SKIP";
        failed += o.status == Status::Fail;
        std::printf("%s  %-28s %s [%.1f s]\n", tag, name, o.detail.c_str(), secs);
        std::fflush(stdout);
    };

    report("integral-image oracle", integral_oracle);
    report("gradient check", gradient_check);
    report("schedule math", schedule_math);
    report("classifier learnability", learnability);

    std::pair<Outcome, Outcome> cascade_results;
    report("cascade guarantees", [&] {
        cascade_results = cascade_guarantees();
        return cascade_results.first;
    });
    report("adaboost bound", [&] { return cascade_results.second; });
    report("bbox rescale round trip", bbox_round_trip);

    const auto detector = testing::stub_detector();
    report("persistence", [&] { return persistence(detector); });
    report("pipeline equivalence", [&] { return pipeline_equivalence(detector); });
    report("dataset-conditional report", dataset_conditional);
    return failed ? 1 : 0;
}
