#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "fruitgrader/error.hpp"
#include "fruitgrader/random.hpp"
#include "fruitgrader/training.hpp"
#include "test_util.hpp"

using namespace fruitgrader;
using namespace fruitgrader::nn;

namespace {

template <typename T>
BasicTensor<T> random_batch(int n, InputShape in, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    BasicTensor<T> t({n, in.channels, in.height, in.width});
    for (auto& v : t.data()) v = static_cast<T>(d(rng));
    return t;
}

// Parameter count of a canonical ResNet-18 body, written out layer by layer.
std::size_t resnet18_body_params() {
    auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k; };
    auto bn = [](std::size_t c) { return 2 * c; };
    std::size_t total = conv(3, 64, 7) + bn(64);
    // layer1: 2 blocks, 64->64
    total += 2 * (2 * (conv(64, 64, 3) + bn(64)));
    const std::size_t widths[] = {64, 128, 256, 512};
    for (int s = 1; s < 4; ++s) {
        const std::size_t in = widths[s - 1], out = widths[s];
        total += conv(in, out, 3) + bn(out) + conv(out, out, 3) + bn(out);  // first block main path
        total += conv(in, out, 1) + bn(out);                                // projection
        total += 2 * (conv(out, out, 3) + bn(out));                         // second block
    }
    return total;
}

}  // namespace

TEST_CASE("piecewise schedule follows the closed form exactly") {
    TrainConfig c;
    c.initial_learn_rate = 0.01;
    c.schedule = Schedule::Piecewise;
    c.drop_period = 3;
    c.drop_factor = 0.1;
    CHECK(lr_at_epoch(c, 1) == 0.01);
    CHECK(lr_at_epoch(c, 3) == 0.01);
    CHECK(lr_at_epoch(c, 4) == 0.001);

    TrainConfig r;
    r.initial_learn_rate = 0.001;
    r.schedule = Schedule::Piecewise;
    r.drop_period = 1;
    r.drop_factor = 0.01;
    CHECK(lr_at_epoch(r, 1) == 0.001);
    CHECK(lr_at_epoch(r, 2) == 1e-5);

    TrainConfig constant;
    constant.initial_learn_rate = 0.05;
    CHECK(lr_at_epoch(constant, 1) == 0.05);
    CHECK(lr_at_epoch(constant, 40) == 0.05);
    CHECK_THROWS_AS(lr_at_epoch(constant, 0), Error);
}

TEST_CASE("config validation") {
    TrainConfig c;
    CHECK(c.validate().empty());
    c.l2_regularization = 50;
    CHECK(c.validate().size() == 1);
    c.l2_regularization = 0.0001;
    c.max_epochs = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c.max_epochs = 1;
    c.momentum = 1.0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("cross-entropy on uniform and confident logits") {
    Tensor logits({2, 3}, 0.0f);
    const int labels[] = {0, 2};
    const auto r = loss_and_grad(logits, std::span<const int>(labels));
    CHECK(r.loss == doctest::Approx(std::log(3.0)).epsilon(1e-12));
    CHECK(r.loss == doctest::Approx(1.0986).epsilon(1e-4));
    // (1/3 - 1) / 2 for the true class, (1/3) / 2 otherwise
    CHECK(r.dlogits[0] == doctest::Approx(-1.0 / 3.0));
    CHECK(r.dlogits[1] == doctest::Approx(1.0 / 6.0));

    Tensor sure({1, 3}, std::vector<float>{100.0f, 0.0f, 0.0f});
    const int zero[] = {0};
    CHECK(loss_and_grad(sure, std::span<const int>(zero)).loss < 1e-30);

    const int bad[] = {3};
    Tensor one({1, 3});
    try {
        loss_and_grad(one, std::span<const int>(bad));
        FAIL("expected LabelOutOfRange");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::LabelOutOfRange);
    }
}

TEST_CASE("mini resnet topology") {
    for (int k : {3, 5}) {
        const auto spec = build_mini_resnet({3, 64, 64}, k);
        CHECK(head_width(spec) == k);
        CHECK(weighted_layer_count(spec) == 14);
        CHECK(count_kind(spec, LayerKind::ResidualAdd) == 6);
        Network net(spec, 1);
        const auto logits = infer(net, random_batch<float>(1, spec.input, 2));
        CHECK(logits.shape() == std::vector<int>{1, k});
    }
    CHECK_THROWS_AS(build_mini_resnet({3, 64, 64}, 1), Error);
}

TEST_CASE("resnet18 topology and parameter count") {
    const auto spec = build_resnet18({3, 224, 224}, 1000);
    const auto shapes = infer_shapes(spec);
    const int gap = static_cast<int>(spec.nodes.size()) - 3;
    REQUIRE(spec.nodes[gap].kind == LayerKind::GlobalAvgPool);
    const auto pre = shapes[spec.nodes[gap].input];
    CHECK(pre == ActivationShape{512, 7, 7});
    CHECK(head_width(spec) == 1000);
    CHECK(weighted_layer_count(spec) == 18);

    Network net(spec, 0);
    const std::size_t head = 512 * 1000 + 1000;
    CHECK(resnet18_body_params() == 11176512);
    CHECK(net.parameter_count() == resnet18_body_params() + head);
}

TEST_CASE("mini plain has no residual connections") {
    const auto spec = build_mini_plain({3, 64, 64}, 4);
    CHECK(count_kind(spec, LayerKind::ResidualAdd) == 0);
    CHECK(count_kind(spec, LayerKind::Conv) == 5);
    CHECK(count_kind(spec, LayerKind::MaxPool) == 3);
    CHECK(count_kind(spec, LayerKind::FullyConnected) == 3);
    Network net(spec, 3);
    CHECK(infer(net, random_batch<float>(2, spec.input, 4)).shape() == std::vector<int>{2, 4});
}

TEST_CASE("architecture json round trip") {
    const auto spec = build_mini_resnet({3, 32, 32}, 3);
    nlohmann::json j = spec;
    const auto back = j.get<ArchitectureSpec>();
    CHECK(back == spec);

    auto broken = j;
    broken["nodes"][5]["input"] = 40;
    CHECK_THROWS_AS(broken.get<ArchitectureSpec>(), Error);
}

TEST_CASE("residual operands must agree in shape") {
    SpecBuilder b("bad", {1, 8, 8});
    const int a = b.conv(2, 3, 1, 1);
    const int c = b.conv(2, 3, 2, 1);
    b.add(a, c);
    try {
        std::move(b).build();
        FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ShapeMismatch);
    }
}

TEST_CASE("replace_head keeps the body bit-exact") {
    const Network net(build_mini_resnet({3, 32, 32}, 5), 7);
    const Network swapped = replace_head(net, 3, 99);
    CHECK(swapped.num_classes() == 3);
    const int head = logits_node(net.spec());
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        if (static_cast<int>(i) == head) continue;
        CHECK(net.layers()[i] == swapped.layers()[i]);
    }
    Rng rng(5);
    const auto p = predict(swapped, testing::random_image(40, 30, 3, rng));
    CHECK(p.probs.size() == 3);
    CHECK(std::accumulate(p.probs.begin(), p.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));

    const Network same = replace_head(net, 5, 123);
    CHECK(!(same.layers()[head] == net.layers()[head]));
    CHECK(same.class_names() == net.class_names());

    SpecBuilder b("headless", {1, 4, 4});
    b.conv(2, 3, 1, 1);
    b.global_avg_pool();
    const Network headless(std::move(b).build(), 0);
    try {
        replace_head(headless, 3, 0);
        FAIL("expected NoHeadFound");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NoHeadFound);
    }
}

TEST_CASE("zero input through a zero-bias ReLU net gives zero logits") {
    const Network net(build_tiny_conv({3, 8, 8}, 3), 11);
    const auto logits = infer(net, Tensor({2, 3, 8, 8}, 0.0f));
    for (float v : logits.data()) CHECK(v == 0.0f);
}

TEST_CASE("infer is pure and train mode updates running statistics") {
    Network net(build_mini_resnet({3, 16, 16}, 3), 4);
    const auto batch = random_batch<float>(3, net.spec().input, 8);
    const auto a = infer(net, batch);
    const auto b = infer(net, batch);
    CHECK(a == b);

    const auto before = net.layers()[1];
    REQUIRE(net.spec().nodes[1].kind == LayerKind::BatchNorm);
    forward(net, batch, Mode::Train);
    CHECK(!(net.layers()[1].running_mean == before.running_mean));
    CHECK(net.layers()[1].gamma == before.gamma);
}

TEST_CASE("non-finite input raises NonFiniteActivation") {
    const Network net(build_tiny_conv({1, 4, 4}, 2), 0);
    Tensor x({1, 1, 4, 4}, 0.0f);
    x[5] = std::numeric_limits<float>::quiet_NaN();
    try {
        infer(net, x);
        FAIL("expected NonFiniteActivation");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFiniteActivation);
    }
    CHECK_THROWS_AS(infer(net, Tensor({1, 2, 4, 4})), Error);
}

TEST_CASE("fresh network predicts near-uniformly and argmax is shift invariant") {
    for (int k : {3, 5}) {
        const Network net(build_mini_resnet({3, 64, 64}, k), 21);
        Rng rng(3);
        for (int trial = 0; trial < 4; ++trial) {
            const auto p = predict(net, testing::random_image(64, 64, 3, rng));
            double sum = 0.0;
            for (double v : p.probs) {
                CHECK(std::abs(v - 1.0 / k) < 0.2);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    const std::vector<double> z = {0.3, 1.7, -2.0, 1.7};
    std::vector<double> shifted = z;
    for (auto& v : shifted) v += 1000.0;
    CHECK(argmax(softmax(std::span<const double>(z))) == 1);
    CHECK(argmax(softmax(std::span<const double>(shifted))) == 1);

    const Network net(build_tiny_conv({3, 8, 8}, 2), 0);
    CHECK_THROWS_AS(predict(net, imaging::Image(9, 8, 3), false), Error);
    CHECK_NOTHROW(predict(net, imaging::Image(8, 8, 1), false));
}

TEST_CASE("SGD step on a 2x2 linear layer matches hand arithmetic") {
    // Zero weights, input (1, 2), label 0: p = (1/2, 1/2), dz = (-1/2, 1/2),
    // dW = dz x^T = [[-0.5, -1], [0.5, 1]], db = dz.
    Network net(build_linear_softmax({2, 1, 1}, 2), 0);
    auto& fc = net.layers()[0];
    std::fill(fc.weight.data().begin(), fc.weight.data().end(), 0.0f);
    const Tensor x({1, 2, 1, 1}, std::vector<float>{1.0f, 2.0f});
    const int label[] = {0};
    TrainConfig cfg;
    cfg.initial_learn_rate = 0.5;
    cfg.momentum = 0.0;
    SgdmState<float> state;
    const auto loss = train_step(net, x, std::span<const int>(label), cfg, state, 1);
    CHECK(loss.loss == doctest::Approx(std::log(2.0)));
    CHECK(fc.weight.data()[0] == 0.25f);
    CHECK(fc.weight.data()[1] == 0.5f);
    CHECK(fc.weight.data()[2] == -0.25f);
    CHECK(fc.weight.data()[3] == -0.5f);
    CHECK(fc.bias.data()[0] == 0.25f);
    CHECK(fc.bias.data()[1] == -0.25f);

    // L2 applies to the weights only: second step from w with l2 = 1.
    cfg.l2_regularization = 1.0;
    Network reg(build_linear_softmax({2, 1, 1}, 2), 0);
    std::fill(reg.layers()[0].weight.data().begin(), reg.layers()[0].weight.data().end(), 0.0f);
    reg.layers()[0].bias[0] = 0.0f;
    SgdmState<float> s2;
    train_step(reg, x, std::span<const int>(label), cfg, s2, 1);
    CHECK(reg.layers()[0].weight.data()[0] == 0.25f);  // w was 0, decay adds nothing
}

TEST_CASE("momentum-free step equals w - lr g and lr 0 is a no-op") {
    Network net(build_tiny_conv({3, 8, 8}, 3), 5);
    const auto batch = random_batch<float>(4, net.spec().input, 6);
    const int labels[] = {0, 1, 2, 1};

    Network probe = net;
    auto fwd = forward(probe, batch, Mode::Train);
    const auto lg = loss_and_grad(fwd.logits, std::span<const int>(labels));
    const auto grads = backward(probe, fwd.cache, lg.dlogits);

    TrainConfig cfg;
    cfg.momentum = 0.0;
    cfg.initial_learn_rate = 0.1;
    Network stepped = net;
    SgdmState<float> state;
    train_step(stepped, batch, std::span<const int>(labels), cfg, state, 1);
    const auto& w0 = net.layers()[0].weight;
    const auto& w1 = stepped.layers()[0].weight;
    for (std::size_t i = 0; i < w0.size(); ++i) {
        const float expected = w0[i] + (0.0f * 0.0f - 0.1f * grads[0].weight[i]);
        CHECK(w1[i] == expected);
    }

    // lr 0 is outside TrainConfig::validate, but train_step must still be a no-op.
    TrainConfig nolr = cfg;
    nolr.momentum = 0.9;
    nolr.initial_learn_rate = 0.0;
    Network frozen = net;
    SgdmState<float> fresh;
    train_step(frozen, batch, std::span<const int>(labels), nolr, fresh, 1);
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        CHECK(frozen.layers()[i].weight == net.layers()[i].weight);
        CHECK(frozen.layers()[i].bias == net.layers()[i].bias);
    }
}

TEST_CASE("gradient check on nets without batch norm") {
    {
        const Network net(build_linear_softmax({3, 4, 4}, 3), 1);
        const auto batch = random_batch<float>(4, net.spec().input, 2);
        const int labels[] = {0, 2, 1, 2};
        const auto r = gradient_check(net, batch, std::span<const int>(labels));
        INFO("worst tensor ", r.worst_tensor);
        CHECK(r.coordinates == 3 * 48 + 3);  // every parameter
        CHECK(r.max_rel_error < 1e-3);
    }
    {
        const BasicNetwork<double> net(build_tiny_conv({3, 6, 6}, 3), 3);
        const auto batch = random_batch<double>(4, net.spec().input, 4);
        const int labels[] = {1, 0, 2, 2};
        const auto r = gradient_check(net, batch, std::span<const int>(labels));
        INFO("worst tensor ", r.worst_tensor, " error ", r.max_rel_error);
        CHECK(r.coordinates >= 200);
        CHECK(r.max_rel_error < 1e-3);
    }
}

TEST_CASE("gradient check on mini resnet with batch norm in train mode") {
    const BasicNetwork<double> net(build_mini_resnet({3, 8, 8}, 3), 12);
    const auto batch = random_batch<double>(4, net.spec().input, 13);
    const int labels[] = {2, 0, 1, 0};
    const auto r = gradient_check(net, batch, std::span<const int>(labels), {.coordinates_per_tensor = 40});
    INFO("worst tensor ", r.worst_tensor, " error ", r.max_rel_error);
    CHECK(r.coordinates >= 200);
    CHECK(r.max_rel_error < 1e-2);
}

TEST_CASE("gradient check rejects a zero epsilon") {
    const Network net(build_linear_softmax({1, 2, 2}, 2), 0);
    const int labels[] = {0};
    CHECK_THROWS_AS(gradient_check(net, Tensor({1, 1, 2, 2}), std::span<const int>(labels), {.epsilon = 0.0}),
                    Error);
}

TEST_CASE("train_classifier is deterministic and records history") {
    Rng rng(17);
    std::vector<imaging::Image> images;
    std::vector<int> labels;
    for (int i = 0; i < 13; ++i) {
        images.push_back(testing::random_image(12, 12, 3, rng));
        labels.push_back(i % 3);
    }
    const InMemorySource train(images, labels);
    const auto spec = build_tiny_conv({3, 8, 8}, 3);
    TrainConfig cfg;
    cfg.mini_batch_size = 4;  // 13 samples: final batch of 1 is kept
    cfg.max_epochs = 3;
    cfg.shuffle_seed = 9;
    const auto a = train_classifier(train, &train, spec, cfg);
    const auto b = train_classifier(train, &train, spec, cfg);
    REQUIRE(a.history.size() == 3);
    CHECK(a.history == b.history);
    CHECK(a.net == b.net);
    CHECK(a.history[2].valid_acc.has_value());

    testing::TempDir dir;
    write_history_csv(a.history, dir / "history.csv");
    CHECK(read_history_csv(dir / "history.csv") == a.history);

    int calls = 0;
    TrainOptions stop;
    stop.on_epoch = [&](const EpochRecord&) { return ++calls < 2; };
    CHECK(train_classifier(train, nullptr, spec, cfg, stop).history.size() == 2);

    cfg.max_epochs = 0;
    CHECK_THROWS_AS(train_classifier(train, nullptr, spec, cfg), Error);
    cfg.max_epochs = 1;
    const InMemorySource bad({images[0]}, {3});
    CHECK_THROWS_AS(train_classifier(bad, nullptr, spec, cfg), Error);
}
