#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "fruitgrader/codec.hpp"
#include "fruitgrader/error.hpp"
#include "fruitgrader/eval.hpp"
#include "fruitgrader/http.hpp"
#include "fruitgrader/pipeline.hpp"
#include "fruitgrader/random.hpp"
#include "fruitgrader/service.hpp"
#include "fruitgrader/training.hpp"

namespace fruitgrader::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string arch_name(std::string name) {
    std::replace(name.begin(), name.end(), '-', '_');
    return name;
}

// "auto" or WxH.
std::optional<dataset::WindowSize> parse_window(const std::string& text) {
    if (text == "auto") return std::nullopt;
    int w = 0, h = 0;
    char x = 0, extra = 0;
    std::istringstream in(text);
    if (!(in >> w >> x >> h) || (x != 'x' && x != 'X') || (in >> extra) || w < 8 || h < 8) {
        throw CLI::ValidationError("--window", "expected auto or WxH with sides >= 8, got '" + text + "'");
    }
    return dataset::WindowSize{w, h};
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::MalformedFile, "cannot write " + path);
    out << text;
}

cascade::CascadeModel read_detector(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MalformedFile, "cannot open " + path.string());
    try {
        return json::parse(in).get<cascade::CascadeModel>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::MalformedFile, path.string() + ": " + e.what());
    }
}

struct ScanFlags {
    cascade::ScanOptions scan;

    void add(CLI::App* app) {
        app->add_option("--scale-factor", scan.scale_factor, "pyramid step")->check(CLI::Range(1.01, 4.0));
        app->add_option("--stride", scan.stride, "window step in pixels at scale 1")->check(CLI::PositiveNumber);
        app->add_option("--nms-iou", scan.nms_iou, "suppression overlap")->check(CLI::Range(0.0, 1.0));
        app->add_option("--min-neighbors", scan.min_neighbors, "raw hits needed around a kept box")
            ->check(CLI::PositiveNumber);
    }
};

// ---- prepare

struct PrepareArgs {
    std::string data, csv, images, out, out_dir, resize;
    double train = 0.7, valid = 0.3, test = 0.0;
    int per_class = 0;
    std::uint64_t seed = 0;
};

void run_prepare(const PrepareArgs& a) {
    const dataset::SplitFractions fr{a.train, a.valid, a.test};
    if (!a.data.empty()) {
        auto tree = dataset::load_classification_tree(a.data);
        if (a.per_class > 0) tree.samples = dataset::balanced_subsample(tree.samples, a.per_class, a.seed);
        const auto split = dataset::split_dataset(tree.samples, tree.class_names, fr, a.seed);
        dataset::save_split_manifest(split, a.out);
        std::cout << "classes " << split.class_names.size() << ", train " << split.train.size() << ", valid "
                  << split.valid.size() << ", test " << split.test.size() << " -> " << a.out << "\n";
        return;
    }
    const fs::path image_dir = a.images.empty() ? fs::path(a.csv).parent_path() : fs::path(a.images);
    auto samples = dataset::load_detection_csv(a.csv, image_dir);
    const fs::path out_dir(a.out_dir);
    fs::create_directories(out_dir);
    fs::path written_images = image_dir;
    if (!a.resize.empty()) {
        const auto size = parse_window(a.resize);
        if (!size) throw CLI::ValidationError("--resize", "expected WxH");
        written_images = out_dir / "images";
        fs::create_directories(written_images);
        for (auto& s : samples) {
            const auto [img, resized] = dataset::resize_with_boxes(s, imaging::load_image(s.image_path), size->w, size->h);
            const fs::path dst = written_images / fs::path(s.image_path).filename().replace_extension(".png");
            imaging::save_png(img, dst);
            s = resized;
            s.image_path = dst.string();
        }
    }
    const auto split = dataset::split_dataset(samples, fr, a.seed);
    const std::pair<const char*, const std::vector<dataset::DetectionSample>*> parts[] = {
        {"train.csv", &split.train}, {"valid.csv", &split.valid}, {"test.csv", &split.test}};
    for (const auto& [name, list] : parts) {
        dataset::write_detection_csv(*list, out_dir / name, written_images);
        std::cout << name << ": " << list->size() << " images\n";
    }
}

// ---- classification data

struct ClassData {
    std::vector<dataset::ClassificationSample> train, valid, test;
    std::vector<std::string> class_names;
};

// A split manifest (.json) or a folder-per-class tree split on the fly.
ClassData load_class_data(const std::string& data, double valid_fraction, std::uint64_t seed) {
    if (fs::is_regular_file(data)) {
        auto s = dataset::load_split_manifest(data);
        return {std::move(s.train), std::move(s.valid), std::move(s.test), std::move(s.class_names)};
    }
    const auto tree = dataset::load_classification_tree(data);
    auto s = dataset::split_dataset(tree.samples, tree.class_names, {1.0 - valid_fraction, valid_fraction, 0.0}, seed);
    return {std::move(s.train), std::move(s.valid), std::move(s.test), std::move(s.class_names)};
}

std::optional<dataset::AugmentationSpec> augmentation_named(const std::string& name) {
    if (name == "ripeness") return dataset::AugmentationSpec::ripeness();
    if (name == "disease") return dataset::AugmentationSpec::disease();
    return std::nullopt;
}

// ---- train-classifier

struct TrainClassifierArgs {
    std::string data, arch = "mini-resnet", out = "model.fgpm", history, pretrained, augment = "none";
    int classes = 0, batch = 32, epochs = 10, drop_period = 1, input = 0;
    double lr = 0.001, momentum = 0.9, drop_factor = 1.0, l2 = 0.0, valid_fraction = 0.3;
    bool piecewise = false;
    std::uint64_t seed = 0;
};

void run_train_classifier(const TrainClassifierArgs& a) {
    const auto data = load_class_data(a.data, a.valid_fraction, a.seed);
    const int k = static_cast<int>(data.class_names.size());
    if (a.classes != 0 && a.classes != k) {
        throw Error(ErrorKind::InvalidArgument, "--classes " + std::to_string(a.classes) + " but the data has " +
                                                    std::to_string(k) + " classes");
    }
    const std::string arch = arch_name(a.arch);
    const int side = a.input > 0 ? a.input : (arch == "resnet18" ? 224 : 64);
    nn::ArchitectureSpec spec = nn::build_architecture(arch, {3, side, side}, k);

    nn::TrainOptions opt;
    opt.init_seed = a.seed;
    opt.class_names = data.class_names;
    if (!a.pretrained.empty()) {
        auto net = pipeline::load_network(a.pretrained);
        if (net.spec().name != spec.name) {
            throw Error(ErrorKind::InvalidArgument,
                        "pretrained weights are " + net.spec().name + ", not " + spec.name);
        }
        if (net.num_classes() != k) net = nn::replace_head(net, k, derive_seed(a.seed, 1));
        spec = net.spec();
        opt.initial = std::move(net);
    }

    nn::FileSource train(data.train, augmentation_named(a.augment), derive_seed(a.seed, 2));
    nn::FileSource valid(data.valid);
    opt.before_epoch = [&train](int epoch) { train.set_epoch(epoch); };
    opt.on_epoch = [](const nn::EpochRecord& r) {
        std::printf("epoch %3d  lr %.3g  loss %.5f  train %.4f", r.epoch, r.lr, r.train_loss, r.train_acc);
        if (r.valid_acc) std::printf("  valid %.4f", *r.valid_acc);
        std::printf("\n");
        std::fflush(stdout);
        return true;
    };

    nn::TrainConfig cfg;
    cfg.initial_learn_rate = a.lr;
    cfg.momentum = a.momentum;
    cfg.mini_batch_size = a.batch;
    cfg.max_epochs = a.epochs;
    cfg.schedule = a.piecewise ? nn::Schedule::Piecewise : nn::Schedule::None;
    cfg.drop_period = a.drop_period;
    cfg.drop_factor = a.drop_factor;
    cfg.l2_regularization = a.l2;
    cfg.shuffle_seed = derive_seed(a.seed, 3);
    cfg.validation_every = data.valid.empty() ? 0 : 1;
    for (const auto& w : cfg.validate()) std::cerr << "warning: " << w << "\n";

    std::cout << spec.name << " " << side << "x" << side << ", " << k << " classes, train " << data.train.size()
              << ", valid " << data.valid.size() << "\n";
    const auto result = nn::train_classifier(train, data.valid.empty() ? nullptr : &valid, spec, cfg, opt);
    pipeline::save_network(result.net, a.out);
    if (!a.history.empty()) nn::write_history_csv(result.history, a.history);
    std::cout << "saved " << a.out << "\n";
}

// ---- train-detector

struct TrainDetectorArgs {
    std::string positives, images, negatives, class_name = "mango", window = "auto", out = "detector.json";
    double far = 0.1, tpr_floor = 0.995;
    int stages = 5, max_stumps = 50;
    std::size_t budget = 5000;
    std::uint64_t seed = 0;
};

void run_train_detector(const TrainDetectorArgs& a) {
    const fs::path image_dir = a.images.empty() ? fs::path(a.positives).parent_path() : fs::path(a.images);
    const auto samples = dataset::load_detection_csv(a.positives, image_dir);
    std::vector<std::string> paths;
    for (const auto& s : samples) paths.push_back(s.image_path);
    const auto images = dataset::load_images(paths);

    std::vector<cascade::NegativeSource> extra;
    if (!a.negatives.empty()) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(a.negatives)) {
            if (e.is_regular_file() && imaging::is_image_path(e.path())) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) extra.push_back({imaging::ensure_grayscale(imaging::load_image(f)), {}});
    }

    cascade::CascadeTrainConfig cfg;
    cfg.false_alarm_rate = a.far;
    cfg.num_cascade_stages = a.stages;
    cfg.object_training_size = parse_window(a.window);
    cfg.per_stage_tpr_floor = a.tpr_floor;
    cfg.max_stumps_per_stage = a.max_stumps;
    cfg.feature_budget = a.budget;
    cfg.seed = a.seed;

    cascade::CascadeTrainReport report;
    const auto model = cascade::train_cascade(samples, images, a.class_name, extra, cfg, &report);
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "window " << model.window_w << "x" << model.window_h << ", " << model.feature_pool.size()
              << " features\n";
    for (std::size_t i = 0; i < model.stages.size(); ++i) {
        const auto& st = model.stages[i];
        std::printf("stage %2zu  stumps %2zu  far %.4f  tpr %.4f%s\n", i + 1, st.stumps.size(), st.trained_far,
                    st.trained_tpr, st.target_met ? "" : "  (target not met)");
    }
    std::printf("training negative far %.6g\n", report.training_negative_far);
    std::ofstream out(a.out);
    if (!out) throw Error(ErrorKind::MalformedFile, "cannot write " + a.out);
    out << json(model).dump(1) << "\n";
    std::cout << "saved " << a.out << "\n";
}

// ---- evaluate

struct EvaluateArgs {
    std::string model, data, split = "auto", format = "text", out;
    std::string detector, csv, images, class_name = "mango";
    double valid_fraction = 0.3, iou = 0.5;
    std::uint64_t seed = 0;
    ScanFlags scan;
};

std::string render(const eval::ConfusionMatrix& cm, const std::string& format) {
    if (format == "csv") return eval::confusion_csv(cm);
    if (format == "json") return eval::confusion_json(cm).dump(2) + "\n";
    return eval::confusion_text(cm);
}

void evaluate_classifier(const EvaluateArgs& a) {
    const auto net = pipeline::load_network(a.model);
    std::vector<dataset::ClassificationSample> samples;
    std::vector<std::string> data_names;
    if (a.split == "all") {
        auto tree = dataset::load_classification_tree(a.data);
        samples = std::move(tree.samples);
        data_names = std::move(tree.class_names);
    } else {
        auto d = load_class_data(a.data, a.valid_fraction, a.seed);
        data_names = d.class_names;
        if (a.split == "train") samples = d.train;
        else if (a.split == "test" || (a.split == "auto" && !d.test.empty())) samples = d.test;
        else samples = d.valid;
    }
    if (samples.empty()) throw Error(ErrorKind::EmptyDataset, "no samples in the selected split");

    const auto& names = net.class_names();
    std::vector<int> truths;
    for (const auto& s : samples) {
        const auto it = std::find(names.begin(), names.end(), s.class_name);
        if (it == names.end()) {
            throw Error(ErrorKind::IdOutOfRange, "class '" + s.class_name + "' is not predicted by the model");
        }
        truths.push_back(static_cast<int>(it - names.begin()));
    }
    std::vector<int> preds;
    constexpr std::size_t chunk = 64;
    for (std::size_t i = 0; i < samples.size(); i += chunk) {
        std::vector<std::string> paths;
        for (std::size_t j = i; j < std::min(samples.size(), i + chunk); ++j) paths.push_back(samples[j].image_path);
        for (const auto& p : nn::predict_batch(net, dataset::load_images(paths))) preds.push_back(p.index);
    }
    const auto cm = eval::confusion_matrix(truths, preds, net.num_classes(), names);
    write_text(a.out, render(cm, a.format));
}

void evaluate_detector(const EvaluateArgs& a) {
    const auto model = read_detector(a.detector);
    const fs::path image_dir = a.images.empty() ? fs::path(a.csv).parent_path() : fs::path(a.images);
    const auto samples = dataset::load_detection_csv(a.csv, image_dir);
    std::vector<std::vector<cascade::Detection>> dets;
    std::vector<std::vector<imaging::BBox>> truths;
    for (const auto& s : samples) {
        dets.push_back(cascade::detect(model, imaging::load_image(s.image_path), a.scan.scan));
        auto& t = truths.emplace_back();
        for (const auto& o : s.objects) {
            if (o.class_name == a.class_name) t.push_back(o.box);
        }
    }
    const auto m = eval::detection_pr(dets, truths, a.iou);
    write_text(a.out, a.format == "json" ? eval::detection_json(m, a.iou).dump(2) + "\n"
                                         : eval::detection_text(m, a.iou));
}

// ---- grade

struct GradeArgs {
    std::string pipeline, models;
    std::vector<std::string> images;
    bool force_disease = false;
    double padding = 0.1;
    ScanFlags scan;
};

pipeline::PipelineModel pipeline_from(const std::string& file, const std::string& dir) {
    if (!file.empty()) return pipeline::load_pipeline(file);
    auto m = service::load_models_dir(dir);
    if (!m.complete()) {
        throw Error(ErrorKind::MalformedFile, dir + " lacks a complete set of models (pipeline.fgpm, or detector.json, "
                                                   "ripeness.fgpm and disease.fgpm)");
    }
    pipeline::PipelineModel p{std::move(*m.detector), std::move(*m.ripeness), std::move(*m.disease),
                              std::move(m.disease_trigger)};
    p.validate();
    return p;
}

void run_grade(const GradeArgs& a) {
    const auto model = pipeline_from(a.pipeline, a.models);
    pipeline::GradeOptions opt;
    opt.force_disease = a.force_disease;
    opt.scan = a.scan.scan;
    opt.crop_padding = a.padding;
    for (const auto& path : a.images) {
        auto detections = json::array();
        for (const auto& r : pipeline::grade_image(model, imaging::load_image(path), opt)) {
            detections.push_back(pipeline::report_json(r, model));
        }
        std::cout << json{{"image", path}, {"detections", std::move(detections)}}.dump() << "\n";
    }
}

// ---- serve

struct ServeArgs {
    std::string models = "models", host = "0.0.0.0", ui_origin, ui_dir, image_dir = "images";
    int port = 8080;
    double max_upload_mb = 16.0, padding = 0.1;
    ScanFlags scan;
};

std::atomic<service::HttpServer*> g_server{nullptr};

extern "C" void on_signal(int) {
    if (auto* s = g_server.load()) s->stop();
}

void run_serve(const ServeArgs& a) {
    auto models = service::load_models_dir(a.models);
    service::ServiceConfig cfg;
    cfg.image_dir = a.image_dir;
    cfg.max_upload_bytes = static_cast<std::size_t>(a.max_upload_mb * 1024 * 1024);
    cfg.scan = a.scan.scan;
    cfg.crop_padding = a.padding;
    std::cerr << "models from " << a.models << ": detector " << (models.detector ? "yes" : "no") << ", ripeness "
              << (models.ripeness ? "yes" : "no") << ", disease " << (models.disease ? "yes" : "no") << "\n";
    service::Service svc(cfg, std::move(models));

    service::HttpOptions http;
    http.host = a.host;
    http.port = a.port;
    if (!a.ui_origin.empty()) http.ui_origin = a.ui_origin;
    if (!a.ui_dir.empty()) http.ui_dir = a.ui_dir;
    service::HttpServer server(svc, http);
    const int port = server.bind();
    std::cerr << "listening on " << a.host << ":" << port << "\n";
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.run();
    g_server = nullptr;
}

// ---- gc, bundle

struct GcArgs {
    std::string image_dir = "images";
    double max_age_hours = 24.0;
};

void run_gc(const GcArgs& a) {
    service::ImageStore store(a.image_dir);
    const auto n = store.prune(std::chrono::seconds(static_cast<long long>(a.max_age_hours * 3600)));
    std::cout << "removed " << n << " images\n";
}

struct BundleArgs {
    std::string detector, ripeness, disease, out = "pipeline.fgpm";
    std::vector<std::string> trigger{"bad mango"};
};

void run_bundle(const BundleArgs& a) {
    pipeline::PipelineModel m{read_detector(a.detector), pipeline::load_network(a.ripeness),
                              pipeline::load_network(a.disease), a.trigger};
    m.validate();
    pipeline::save_pipeline(m, a.out);
    std::cout << "saved " << a.out << "\n";
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"Mango detection, ripeness and disease grading", "fruitgrader"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    PrepareArgs prep;
    auto* p = app.add_subcommand("prepare", "split a dataset into train/valid/test");
    auto* p_data = p->add_option("--data", prep.data, "folder-per-class image tree")->check(CLI::ExistingDirectory);
    auto* p_csv = p->add_option("--csv", prep.csv, "detection CSV")->check(CLI::ExistingFile);
    p_data->excludes(p_csv);
    p->add_option("--images", prep.images, "image directory of the CSV (default: its directory)");
    p->add_option("--out", prep.out, "split manifest to write (with --data)");
    p->add_option("--out-dir", prep.out_dir, "directory for train/valid/test CSVs (with --csv)");
    p->add_option("--resize", prep.resize, "resize images and boxes to WxH (with --csv)");
    p->add_option("--train", prep.train, "train fraction")->check(CLI::Range(0.0, 1.0));
    p->add_option("--valid", prep.valid, "validation fraction")->check(CLI::Range(0.0, 1.0));
    p->add_option("--test", prep.test, "test fraction")->check(CLI::Range(0.0, 1.0));
    p->add_option("--per-class", prep.per_class, "balance to N images per class");
    p->add_option("--seed", prep.seed, "split seed");

    TrainClassifierArgs tc;
    auto* t = app.add_subcommand("train-classifier", "train a ripeness or disease classifier");
    t->add_option("--data", tc.data, "class tree or split manifest")->required()->check(CLI::ExistingPath);
    t->add_option("--arch", tc.arch, "resnet18, mini-resnet, mini-plain, tiny-conv, linear-softmax")
        ->check([](const std::string& v) {
            const std::string n = arch_name(v);
            const bool known = n == "resnet18" || n == "mini_resnet" || n == "mini_plain" || n == "tiny_conv" ||
                               n == "linear_softmax";
            return known ? std::string() : "unknown architecture '" + v + "'";
        });
    t->add_option("--classes", tc.classes, "expected class count");
    t->add_option("--input", tc.input, "input side in pixels (default 224 for resnet18, else 64)");
    t->add_option("--lr", tc.lr, "initial learning rate")->check(CLI::PositiveNumber);
    t->add_option("--momentum", tc.momentum, "SGDM momentum");
    t->add_option("--batch", tc.batch, "mini-batch size")->check(CLI::PositiveNumber);
    t->add_option("--epochs", tc.epochs, "epochs")->check(CLI::PositiveNumber);
    auto* drop = t->add_option("--drop-factor", tc.drop_factor, "piecewise schedule factor");
    t->add_option("--drop-period", tc.drop_period, "piecewise schedule period in epochs")->check(CLI::PositiveNumber);
    t->add_option("--l2", tc.l2, "L2 regularization");
    t->add_option("--augment", tc.augment, "none, ripeness or disease")
        ->check(CLI::IsMember({"none", "ripeness", "disease"}));
    t->add_option("--valid-fraction", tc.valid_fraction, "held out when --data is a tree")
        ->check(CLI::Range(0.0, 0.9));
    t->add_option("--pretrained", tc.pretrained, "network container to start from")->check(CLI::ExistingFile);
    t->add_option("--out", tc.out, "network container to write");
    t->add_option("--history", tc.history, "per-epoch CSV to write");
    t->add_option("--seed", tc.seed, "initialization, shuffle and augmentation seed");

    TrainDetectorArgs td;
    auto* d = app.add_subcommand("train-detector", "train the cascade detector");
    d->add_option("--positives", td.positives, "detection CSV")->required()->check(CLI::ExistingFile);
    d->add_option("--images", td.images, "image directory of the CSV (default: its directory)");
    d->add_option("--negatives", td.negatives, "directory of images without the object")
        ->check(CLI::ExistingDirectory);
    d->add_option("--class", td.class_name, "object class to detect");
    d->add_option("--far", td.far, "per-stage false alarm rate")->check(CLI::Range(0.0, 1.0));
    d->add_option("--stages", td.stages, "cascade stages")->check(CLI::PositiveNumber);
    d->add_option("--window", td.window, "auto or WxH");
    d->add_option("--tpr-floor", td.tpr_floor, "per-stage true positive floor")->check(CLI::Range(0.0, 1.0));
    d->add_option("--max-stumps", td.max_stumps, "stumps per stage cap")->check(CLI::PositiveNumber);
    d->add_option("--budget", td.budget, "feature pool size")->check(CLI::PositiveNumber);
    d->add_option("--out", td.out, "detector JSON to write");
    d->add_option("--seed", td.seed, "feature pool and mining seed");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "confusion matrix for a classifier, or detection precision/recall");
    auto* e_model = e->add_option("--model", ev.model, "network container")->check(CLI::ExistingFile);
    auto* e_det = e->add_option("--detector", ev.detector, "detector JSON")->check(CLI::ExistingFile);
    e_model->excludes(e_det);
    e->add_option("--data", ev.data, "class tree or split manifest (with --model)")->check(CLI::ExistingPath);
    e->add_option("--split", ev.split, "auto, train, valid, test or all")
        ->check(CLI::IsMember({"auto", "train", "valid", "test", "all"}));
    e->add_option("--valid-fraction", ev.valid_fraction, "held out when --data is a tree");
    e->add_option("--csv", ev.csv, "detection CSV (with --detector)")->check(CLI::ExistingFile);
    e->add_option("--images", ev.images, "image directory of the CSV");
    e->add_option("--class", ev.class_name, "object class");
    e->add_option("--iou", ev.iou, "match threshold")->check(CLI::Range(0.0, 1.0));
    e->add_option("--format", ev.format, "text, csv or json")->check(CLI::IsMember({"text", "csv", "json"}));
    e->add_option("--out", ev.out, "output file (default stdout)");
    e->add_option("--seed", ev.seed, "split seed when --data is a tree");
    ev.scan.add(e);

    GradeArgs gr;
    auto* g = app.add_subcommand("grade", "detect and grade mangoes in images, one JSON line per image");
    g->add_option("images", gr.images, "image files")->required()->check(CLI::ExistingFile);
    auto* g_pipe = g->add_option("--pipeline", gr.pipeline, "pipeline container")->check(CLI::ExistingFile);
    auto* g_models = g->add_option("--models", gr.models, "models directory")->envname("FRUITGRADER_MODELS");
    g_pipe->excludes(g_models);
    g->add_flag("--force-disease", gr.force_disease, "run the disease model on every detection");
    g->add_option("--padding", gr.padding, "crop padding fraction")->check(CLI::Range(0.0, 1.0));
    gr.scan.add(g);

    ServeArgs sv;
    auto* s = app.add_subcommand("serve", "HTTP API for the operator UI");
    s->add_option("--models", sv.models, "models directory")->envname("FRUITGRADER_MODELS");
    s->add_option("--port", sv.port, "TCP port (0 picks one)")->envname("FRUITGRADER_PORT")->check(CLI::Range(0, 65535));
    s->add_option("--host", sv.host, "bind address");
    s->add_option("--ui-origin", sv.ui_origin, "origin allowed by CORS");
    s->add_option("--ui-dir", sv.ui_dir, "static UI files served at /")->check(CLI::ExistingDirectory);
    s->add_option("--image-dir", sv.image_dir, "upload store");
    s->add_option("--max-upload-mb", sv.max_upload_mb, "upload size limit")->check(CLI::PositiveNumber);
    s->add_option("--padding", sv.padding, "crop padding fraction")->check(CLI::Range(0.0, 1.0));
    sv.scan.add(s);

    GcArgs gc;
    auto* c = app.add_subcommand("gc", "prune old uploads from the image store");
    c->add_option("--image-dir", gc.image_dir, "upload store");
    c->add_option("--max-age-hours", gc.max_age_hours, "keep newer files")->check(CLI::NonNegativeNumber);

    BundleArgs bu;
    auto* b = app.add_subcommand("bundle", "pack detector and classifiers into one pipeline container");
    b->add_option("--detector", bu.detector, "detector JSON")->required()->check(CLI::ExistingFile);
    b->add_option("--ripeness", bu.ripeness, "ripeness network")->required()->check(CLI::ExistingFile);
    b->add_option("--disease", bu.disease, "disease network")->required()->check(CLI::ExistingFile);
    b->add_option("--trigger", bu.trigger, "ripeness labels that run the disease model");
    b->add_option("--out", bu.out, "pipeline container to write");

    try {
        app.parse(argc, argv);
        if (p->parsed()) {
            if (prep.data.empty() == prep.csv.empty()) throw CLI::ValidationError("prepare", "give --data or --csv");
            if (!prep.data.empty() && prep.out.empty()) throw CLI::ValidationError("prepare", "--data needs --out");
            if (!prep.csv.empty() && prep.out_dir.empty()) throw CLI::ValidationError("prepare", "--csv needs --out-dir");
        }
        if (t->parsed()) tc.piecewise = drop->count() > 0;
        if (d->parsed()) (void)parse_window(td.window);
        if (e->parsed()) {
            if (ev.model.empty() == ev.detector.empty()) {
                throw CLI::ValidationError("evaluate", "give --model or --detector");
            }
            if (!ev.model.empty() && ev.data.empty()) throw CLI::ValidationError("evaluate", "--model needs --data");
            if (!ev.detector.empty() && ev.csv.empty()) throw CLI::ValidationError("evaluate", "--detector needs --csv");
        }
        if (g->parsed() && gr.pipeline.empty() && gr.models.empty()) gr.models = "models";
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& err) {
        std::cerr << "error: " << err.what() << "\n\n";
        const auto subs = app.get_subcommands();
        std::cerr << (subs.empty() ? app.help() : subs.front()->help());
        return 1;
    }

    try {
        if (p->parsed()) run_prepare(prep);
        else if (t->parsed()) run_train_classifier(tc);
        else if (d->parsed()) run_train_detector(td);
        else if (e->parsed()) (ev.model.empty() ? evaluate_detector(ev) : evaluate_classifier(ev));
        else if (g->parsed()) run_grade(gr);
        else if (s->parsed()) run_serve(sv);
        else if (c->parsed()) run_gc(gc);
        else if (b->parsed()) run_bundle(bu);
    } catch (const CLI::ValidationError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 0;
}

int cli_main(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace fruitgrader::cli
