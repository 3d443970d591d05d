#include "fruitgrader/architecture.hpp"

#include <algorithm>
#include <array>

#include "fruitgrader/error.hpp"
#include "fruitgrader/tensor.hpp"

namespace fruitgrader::nn {

std::string shape_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

namespace {

constexpr std::array<std::pair<LayerKind, const char*>, 8> kKindNames{{
    {LayerKind::Conv, "conv"},
    {LayerKind::BatchNorm, "batch_norm"},
    {LayerKind::ReLU, "relu"},
    {LayerKind::MaxPool, "max_pool"},
    {LayerKind::GlobalAvgPool, "global_avg_pool"},
    {LayerKind::FullyConnected, "fully_connected"},
    {LayerKind::Softmax, "softmax"},
    {LayerKind::ResidualAdd, "residual_add"},
}};

[[noreturn]] void shape_error(const LayerSpec& node, std::size_t index, const std::string& what) {
    throw Error(ErrorKind::ShapeMismatch, "node " + std::to_string(index) + " (" + node.name + "): " + what);
}

bool is_projection(const LayerSpec& node) { return node.name.find(".proj") != std::string::npos; }

void require_classes(int num_classes) {
    if (num_classes < 2) {
        throw Error(ErrorKind::InvalidArgument, "num_classes must be >= 2, got " + std::to_string(num_classes));
    }
}

// conv3x3-BN-ReLU-conv3x3-BN plus identity or 1x1 projection, then ReLU.
void basic_block(SpecBuilder& b, int in_channels, int out_channels, int stride) {
    const int entry = b.last();
    b.conv(out_channels, 3, stride, 1, false, entry);
    b.batch_norm();
    b.relu();
    b.conv(out_channels, 3, 1, 1, false);
    const int main = b.batch_norm();
    int shortcut = entry;
    if (stride != 1 || in_channels != out_channels) {
        b.conv(out_channels, 1, stride, 0, false, entry);
        shortcut = b.batch_norm();
    }
    b.add(main, shortcut);
    b.relu();
}

}  // namespace

std::string to_string(LayerKind kind) {
    for (const auto& [k, n] : kKindNames) {
        if (k == kind) return n;
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& text) {
    for (const auto& [k, n] : kKindNames) {
        if (text == n) return k;
    }
    throw Error(ErrorKind::InvalidArgument, "unknown layer kind '" + text + "'");
}

std::vector<ActivationShape> infer_shapes(const ArchitectureSpec& spec) {
    const auto& in = spec.input;
    if (in.channels <= 0 || in.height <= 0 || in.width <= 0) {
        throw Error(ErrorKind::ShapeMismatch, "input shape must be positive");
    }
    std::vector<ActivationShape> shapes;
    shapes.reserve(spec.nodes.size());
    const ActivationShape input{in.channels, in.height, in.width};

    auto fetch = [&](const LayerSpec& node, std::size_t i, int ref) -> ActivationShape {
        if (ref == kNetworkInput) return input;
        if (ref < 0 || static_cast<std::size_t>(ref) >= i) shape_error(node, i, "reads a node that is not earlier");
        return shapes[ref];
    };

    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
        const auto& node = spec.nodes[i];
        const ActivationShape x = fetch(node, i, node.input);
        ActivationShape y = x;
        switch (node.kind) {
        case LayerKind::Conv:
        case LayerKind::MaxPool: {
            if (node.kernel <= 0 || node.stride <= 0 || node.pad < 0) shape_error(node, i, "bad kernel geometry");
            const int h = (x.height + 2 * node.pad - node.kernel);
            const int w = (x.width + 2 * node.pad - node.kernel);
            if (h < 0 || w < 0) shape_error(node, i, "kernel larger than input");
            y.height = h / node.stride + 1;
            y.width = w / node.stride + 1;
            if (node.kind == LayerKind::Conv) {
                if (node.out <= 0) shape_error(node, i, "conv needs out channels");
                y.channels = node.out;
            }
            break;
        }
        case LayerKind::BatchNorm:
        case LayerKind::ReLU:
            break;
        case LayerKind::GlobalAvgPool:
            y = {x.channels, 1, 1};
            break;
        case LayerKind::FullyConnected:
            if (node.out <= 0) shape_error(node, i, "fully connected needs out features");
            y = {node.out, 1, 1};
            break;
        case LayerKind::Softmax:
            if (i + 1 != spec.nodes.size()) shape_error(node, i, "softmax must be the last node");
            if (x.height != 1 || x.width != 1) shape_error(node, i, "softmax input must be a vector");
            break;
        case LayerKind::ResidualAdd: {
            const ActivationShape z = fetch(node, i, node.other);
            if (!(x == z)) shape_error(node, i, "residual operands differ in shape");
            break;
        }
        }
        shapes.push_back(y);
    }
    return shapes;
}

int logits_node(const ArchitectureSpec& spec) {
    if (spec.nodes.empty() || spec.nodes.back().kind != LayerKind::Softmax) return static_cast<int>(spec.nodes.size()) - 1;
    return spec.nodes.back().input;
}

int head_width(const ArchitectureSpec& spec) {
    const int idx = logits_node(spec);
    if (idx < 0 || spec.nodes[idx].kind != LayerKind::FullyConnected) return -1;
    return spec.nodes[idx].out;
}

int weighted_layer_count(const ArchitectureSpec& spec) {
    return static_cast<int>(std::count_if(spec.nodes.begin(), spec.nodes.end(), [](const LayerSpec& n) {
        return (n.kind == LayerKind::Conv || n.kind == LayerKind::FullyConnected) && !is_projection(n);
    }));
}

int count_kind(const ArchitectureSpec& spec, LayerKind kind) {
    return static_cast<int>(
        std::count_if(spec.nodes.begin(), spec.nodes.end(), [&](const LayerSpec& n) { return n.kind == kind; }));
}

SpecBuilder::SpecBuilder(std::string name, InputShape input) {
    spec_.name = std::move(name);
    spec_.input = input;
}

int SpecBuilder::push(LayerSpec node) {
    if (node.name.empty()) node.name = to_string(node.kind) + std::to_string(spec_.nodes.size());
    spec_.nodes.push_back(std::move(node));
    last_ = static_cast<int>(spec_.nodes.size()) - 1;
    return last_;
}

int SpecBuilder::conv(int out_channels, int kernel, int stride, int pad, bool bias, int from) {
    LayerSpec n{.kind = LayerKind::Conv, .input = from, .kernel = kernel, .stride = stride, .pad = pad,
                .out = out_channels, .bias = bias};
    // A 1x1 conv branching off an earlier node is a shortcut projection.
    if (kernel == 1 && from != last_) n.name = "conv" + std::to_string(spec_.nodes.size()) + ".proj";
    return push(n);
}

int SpecBuilder::batch_norm(int from) {
    LayerSpec n{.kind = LayerKind::BatchNorm, .input = from};
    if (from >= 0 && is_projection(spec_.nodes[from])) n.name = "bn" + std::to_string(spec_.nodes.size()) + ".proj";
    return push(n);
}

int SpecBuilder::relu(int from) { return push({.kind = LayerKind::ReLU, .input = from}); }

int SpecBuilder::max_pool(int kernel, int stride, int pad) {
    return push({.kind = LayerKind::MaxPool, .input = last_, .kernel = kernel, .stride = stride, .pad = pad});
}

int SpecBuilder::global_avg_pool() { return push({.kind = LayerKind::GlobalAvgPool, .input = last_}); }

int SpecBuilder::fully_connected(int out_features, bool bias) {
    return push({.kind = LayerKind::FullyConnected, .input = last_, .out = out_features, .bias = bias});
}

int SpecBuilder::softmax() { return push({.kind = LayerKind::Softmax, .input = last_}); }

int SpecBuilder::add(int a, int b) { return push({.kind = LayerKind::ResidualAdd, .input = a, .other = b}); }

ArchitectureSpec SpecBuilder::build() && {
    infer_shapes(spec_);
    return std::move(spec_);
}

ArchitectureSpec build_mini_resnet(InputShape input, int num_classes) {
    require_classes(num_classes);
    SpecBuilder b("mini_resnet", input);
    b.conv(16, 3, 1, 1);
    b.batch_norm();
    b.relu();
    int channels = 16;
    const int widths[] = {16, 32, 64};
    for (int s = 0; s < 3; ++s) {
        basic_block(b, channels, widths[s], 2);
        basic_block(b, widths[s], widths[s], 1);
        channels = widths[s];
    }
    b.global_avg_pool();
    b.fully_connected(num_classes);
    b.softmax();
    return std::move(b).build();
}

ArchitectureSpec build_resnet18(InputShape input, int num_classes) {
    require_classes(num_classes);
    SpecBuilder b("resnet18", input);
    b.conv(64, 7, 2, 3);
    b.batch_norm();
    b.relu();
    b.max_pool(3, 2, 1);
    int channels = 64;
    const int widths[] = {64, 128, 256, 512};
    for (int s = 0; s < 4; ++s) {
        basic_block(b, channels, widths[s], s == 0 ? 1 : 2);
        basic_block(b, widths[s], widths[s], 1);
        channels = widths[s];
    }
    b.global_avg_pool();
    b.fully_connected(num_classes);
    b.softmax();
    return std::move(b).build();
}

ArchitectureSpec build_mini_plain(InputShape input, int num_classes) {
    require_classes(num_classes);
    SpecBuilder b("mini_plain", input);
    b.conv(32, 3, 1, 1, true);
    b.relu();
    b.max_pool(2, 2);
    b.conv(64, 3, 1, 1, true);
    b.relu();
    b.max_pool(2, 2);
    b.conv(96, 3, 1, 1, true);
    b.relu();
    b.conv(96, 3, 1, 1, true);
    b.relu();
    b.conv(64, 3, 1, 1, true);
    b.relu();
    b.max_pool(2, 2);
    b.fully_connected(128);
    b.relu();
    b.fully_connected(64);
    b.relu();
    b.fully_connected(num_classes);
    b.softmax();
    return std::move(b).build();
}

ArchitectureSpec build_linear_softmax(InputShape input, int num_classes) {
    require_classes(num_classes);
    SpecBuilder b("linear_softmax", input);
    b.fully_connected(num_classes);
    b.softmax();
    return std::move(b).build();
}

ArchitectureSpec build_tiny_conv(InputShape input, int num_classes) {
    require_classes(num_classes);
    SpecBuilder b("tiny_conv", input);
    b.conv(4, 3, 1, 1, true);
    b.relu();
    b.max_pool(2, 2);
    b.fully_connected(num_classes);
    b.softmax();
    return std::move(b).build();
}

ArchitectureSpec build_architecture(const std::string& arch_name, InputShape input, int num_classes) {
    if (arch_name == "mini_resnet") return build_mini_resnet(input, num_classes);
    if (arch_name == "resnet18") return build_resnet18(input, num_classes);
    if (arch_name == "mini_plain") return build_mini_plain(input, num_classes);
    if (arch_name == "linear_softmax") return build_linear_softmax(input, num_classes);
    if (arch_name == "tiny_conv") return build_tiny_conv(input, num_classes);
    throw Error(ErrorKind::InvalidArgument, "unknown architecture '" + arch_name + "'");
}

void to_json(nlohmann::json& j, const ArchitectureSpec& spec) {
    j = nlohmann::json::object();
    j["name"] = spec.name;
    j["input"] = {spec.input.channels, spec.input.height, spec.input.width};
    auto nodes = nlohmann::json::array();
    for (const auto& n : spec.nodes) {
        nlohmann::json o{{"kind", to_string(n.kind)}, {"name", n.name}, {"input", n.input}};
        switch (n.kind) {
        case LayerKind::Conv:
            o["out"] = n.out;
            o["bias"] = n.bias;
            [[fallthrough]];
        case LayerKind::MaxPool:
            o["kernel"] = n.kernel;
            o["stride"] = n.stride;
            o["pad"] = n.pad;
            break;
        case LayerKind::FullyConnected:
            o["out"] = n.out;
            o["bias"] = n.bias;
            break;
        case LayerKind::ResidualAdd:
            o["other"] = n.other;
            break;
        default:
            break;
        }
        nodes.push_back(std::move(o));
    }
    j["nodes"] = std::move(nodes);
}

void from_json(const nlohmann::json& j, ArchitectureSpec& spec) {
    try {
        spec = {};
        spec.name = j.at("name").get<std::string>();
        const auto& in = j.at("input");
        spec.input = {in.at(0).get<int>(), in.at(1).get<int>(), in.at(2).get<int>()};
        for (const auto& o : j.at("nodes")) {
            LayerSpec n;
            n.kind = layer_kind_from_string(o.at("kind").get<std::string>());
            n.name = o.value("name", std::string{});
            n.input = o.at("input").get<int>();
            n.other = o.value("other", kNetworkInput);
            n.kernel = o.value("kernel", 0);
            n.stride = o.value("stride", 1);
            n.pad = o.value("pad", 0);
            n.out = o.value("out", 0);
            n.bias = o.value("bias", false);
            spec.nodes.push_back(std::move(n));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedFile, std::string("architecture json: ") + e.what());
    }
    infer_shapes(spec);
}

}  // namespace fruitgrader::nn
