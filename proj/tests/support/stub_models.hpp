#pragma once

#include <optional>

#include "fruitgrader/pipeline.hpp"
#include "synthetic.hpp"

namespace fruitgrader::testing {

/// Small cascade trained on ellipse scenes; a second or two on one core.
inline cascade::CascadeModel stub_detector(std::uint64_t seed = 1, int stages = 6) {
    Rng rng(seed);
    std::vector<dataset::DetectionSample> samples;
    std::vector<imaging::Image> images;
    for (int i = 0; i < 40; ++i) {
        auto s = ellipse_scene(96, 96, 2, rng);
        samples.push_back(scene_sample(s, "mango", &rng));
        images.push_back(std::move(s.image));
    }
    cascade::CascadeTrainConfig cfg;
    cfg.false_alarm_rate = 0.5;
    cfg.num_cascade_stages = stages;
    cfg.feature_budget = 1000;
    cfg.seed = seed;
    return cascade::train_cascade(samples, images, "mango", {}, cfg);
}

/// Detector that rejects every window.
inline cascade::CascadeModel reject_all_detector() {
    cascade::CascadeModel m;
    m.feature_pool = {{cascade::HaarKind::TwoRectH, 0, 0, 24, 24}};
    m.stages.push_back({{cascade::Stump{0, 0.0, 1, 1.0, 0.1}}, std::numeric_limits<double>::infinity()});
    return m;
}

/// tiny_conv classifier at 16x16; `favour` adds a large bias to one class.
inline nn::Network stub_classifier(std::vector<std::string> labels, std::uint64_t seed,
                                   std::optional<int> favour = std::nullopt) {
    nn::Network net(nn::build_tiny_conv({3, 16, 16}, static_cast<int>(labels.size())), seed);
    net.set_class_names(std::move(labels));
    if (favour) {
        auto& head = net.layers()[static_cast<std::size_t>(nn::logits_node(net.spec()))];
        head.bias[static_cast<std::size_t>(*favour)] = 50.0f;
    }
    return net;
}

/// Pipeline of stub parts. ripeness_favour forces the ripeness label.
inline pipeline::PipelineModel stub_pipeline(const cascade::CascadeModel& detector, std::uint64_t seed = 2,
                                             std::optional<int> ripeness_favour = std::nullopt) {
    pipeline::PipelineModel m;
    m.detector = detector;
    m.ripeness_net = stub_classifier(pipeline::ripeness_labels(), seed, ripeness_favour);
    m.disease_net = stub_classifier(pipeline::disease_labels(), seed + 1);
    return m;
}

}  // namespace fruitgrader::testing
