#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace fruitgrader::nn {

enum class LayerKind { Conv, BatchNorm, ReLU, MaxPool, GlobalAvgPool, FullyConnected, Softmax, ResidualAdd };

/// Index sentinel meaning "the network input".
inline constexpr int kNetworkInput = -1;

struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    std::string name;
    int input = kNetworkInput;  // producing node, or kNetworkInput
    int other = kNetworkInput;  // second operand of ResidualAdd
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    int out = 0;               // conv output channels / fc output features
    bool bias = false;         // conv / fc bias term

    bool operator==(const LayerSpec&) const = default;
};

struct InputShape {
    int channels = 3;
    int height = 64;
    int width = 64;

    bool operator==(const InputShape&) const = default;
};

struct ArchitectureSpec {
    std::string name;
    InputShape input;
    std::vector<LayerSpec> nodes;

    bool operator==(const ArchitectureSpec&) const = default;
};

struct ActivationShape {
    int channels = 0;
    int height = 1;
    int width = 1;

    std::size_t size() const noexcept { return static_cast<std::size_t>(channels) * height * width; }
    bool operator==(const ActivationShape&) const = default;
};

/// Output shape of every node. Throws ShapeMismatch on inconsistent graphs
/// (bad residual operands, non-terminal softmax, layers reading later nodes).
std::vector<ActivationShape> infer_shapes(const ArchitectureSpec& spec);

/// Index of the node whose output feeds the trailing softmax.
int logits_node(const ArchitectureSpec& spec);

/// Output width of the trailing fully connected head, or -1.
int head_width(const ArchitectureSpec& spec);

/// Conv and fully connected layers on the main path (projection shortcuts excluded).
int weighted_layer_count(const ArchitectureSpec& spec);
int count_kind(const ArchitectureSpec& spec, LayerKind kind);

/// Stem conv3x3 (16) + BN + ReLU, three stages of two basic blocks at
/// 16/32/64 channels, each stage entered with a stride-2 block whose
/// shortcut is a 1x1 projection, global average pool, FC head, softmax.
ArchitectureSpec build_mini_resnet(InputShape input, int num_classes);

/// 7x7/2 stem, 3x3/2 max pool, four stages of two basic blocks at
/// 64/128/256/512 channels, global average pool, FC head, softmax.
ArchitectureSpec build_resnet18(InputShape input, int num_classes);

/// Five conv + ReLU layers, three max pools, two hidden FC layers and the
/// head. No residual connections.
ArchitectureSpec build_mini_plain(InputShape input, int num_classes);

/// Single fully connected layer plus softmax over the flattened input.
ArchitectureSpec build_linear_softmax(InputShape input, int num_classes);

/// conv3x3 (4) + ReLU + max pool + FC + softmax, no batch norm.
ArchitectureSpec build_tiny_conv(InputShape input, int num_classes);

ArchitectureSpec build_architecture(const std::string& arch_name, InputShape input, int num_classes);

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& text);

void to_json(nlohmann::json& j, const ArchitectureSpec& spec);
void from_json(const nlohmann::json& j, ArchitectureSpec& spec);

/// Appends nodes wired to the previous node unless told otherwise.
class SpecBuilder {
public:
    SpecBuilder(std::string name, InputShape input);

    int conv(int out_channels, int kernel, int stride, int pad, bool bias, int from);
    int conv(int out_channels, int kernel, int stride, int pad, bool bias = false) {
        return conv(out_channels, kernel, stride, pad, bias, last_);
    }
    int batch_norm(int from);
    int batch_norm() { return batch_norm(last_); }
    int relu(int from);
    int relu() { return relu(last_); }
    int max_pool(int kernel, int stride, int pad = 0);
    int global_avg_pool();
    int fully_connected(int out_features, bool bias = true);
    int softmax();
    int add(int a, int b);

    int last() const noexcept { return last_; }
    ArchitectureSpec build() &&;

private:
    int push(LayerSpec node);

    ArchitectureSpec spec_;
    int last_ = kNetworkInput;
};

}  // namespace fruitgrader::nn
