#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fruitgrader/architecture.hpp"
#include "fruitgrader/image.hpp"
#include "fruitgrader/tensor.hpp"

namespace fruitgrader::nn {

using imaging::Image;

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;  // weight of the new batch in running stats

/// Parameters owned by one node. Unused members stay empty.
template <typename T>
struct LayerParams {
    BasicTensor<T> weight;
    BasicTensor<T> bias;
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;

    bool operator==(const LayerParams&) const = default;
};

template <typename T>
class BasicNetwork {
public:
    BasicNetwork() = default;
    /// He-normal conv/FC weights, zero biases, gamma 1, beta 0. The head FC
    /// draws from N(0, 0.01^2) so a fresh network predicts near-uniformly.
    BasicNetwork(ArchitectureSpec spec, std::uint64_t init_seed);

    const ArchitectureSpec& spec() const noexcept { return spec_; }
    const std::vector<ActivationShape>& shapes() const noexcept { return shapes_; }
    std::vector<LayerParams<T>>& layers() noexcept { return layers_; }
    const std::vector<LayerParams<T>>& layers() const noexcept { return layers_; }

    int num_classes() const noexcept { return head_width(spec_); }
    const std::vector<std::string>& class_names() const noexcept { return class_names_; }
    /// Length must match num_classes().
    void set_class_names(std::vector<std::string> names);

    /// Trainable values (weights, biases, gamma, beta).
    std::size_t parameter_count() const;

    template <typename U>
    BasicNetwork<U> cast() const;

    bool operator==(const BasicNetwork&) const = default;

private:
    template <typename U>
    friend class BasicNetwork;
    template <typename U>
    friend BasicNetwork<U> replace_head(const BasicNetwork<U>& net, int new_num_classes, std::uint64_t seed);

    void init_layer(std::size_t index, std::uint64_t seed);

    ArchitectureSpec spec_;
    std::vector<ActivationShape> shapes_;
    std::vector<LayerParams<T>> layers_;
    std::vector<std::string> class_names_;
};

using Network = BasicNetwork<float>;

/// Returns a copy whose trailing FC head has new_num_classes outputs, freshly
/// initialized. Every other parameter is copied bit-exact. Class names reset
/// to "class0".. unless the width is unchanged. Throws NoHeadFound.
template <typename T>
BasicNetwork<T> replace_head(const BasicNetwork<T>& net, int new_num_classes, std::uint64_t seed);

enum class Mode { Train, Infer };

/// Intermediate values retained by a forward pass for backward.
template <typename T>
struct ForwardCache {
    BasicTensor<T> input;
    std::vector<BasicTensor<T>> outputs;       // per node
    std::vector<std::vector<T>> cols;          // conv im2col buffers
    std::vector<std::vector<std::int32_t>> argmax;
    std::vector<BasicTensor<T>> xhat;          // batch norm
    std::vector<std::vector<double>> inv_std;  // batch norm
    int batch = 0;
};

template <typename T>
struct ForwardResult {
    BasicTensor<T> logits;  // (N, num_classes), pre-softmax
    ForwardCache<T> cache;
};

/// Train mode normalizes with batch statistics and updates the running
/// statistics; infer mode reads them only. Throws ShapeMismatch and
/// NonFiniteActivation (naming the node).
template <typename T>
ForwardResult<T> forward(BasicNetwork<T>& net, const BasicTensor<T>& batch, Mode mode);

/// Infer-mode forward on an immutable network. Safe for concurrent callers.
template <typename T>
BasicTensor<T> infer(const BasicNetwork<T>& net, const BasicTensor<T>& batch);

/// Gradients of the loss with respect to every trainable parameter, laid out
/// like BasicNetwork::layers() (running stats stay empty).
template <typename T>
std::vector<LayerParams<T>> backward(const BasicNetwork<T>& net, const ForwardCache<T>& cache,
                                     const BasicTensor<T>& dlogits);

template <typename T>
struct LossResult {
    double loss = 0.0;
    BasicTensor<T> dlogits;
    int correct = 0;  // argmax hits, ties to the lowest index
};

/// Mean softmax cross-entropy. Throws LabelOutOfRange.
template <typename T>
LossResult<T> loss_and_grad(const BasicTensor<T>& logits, std::span<const int> labels);

/// Numerically stable softmax of one logit row, in double.
std::vector<double> softmax(std::span<const float> logits);
std::vector<double> softmax(std::span<const double> logits);

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const double> values);

struct Prediction {
    std::vector<double> probs;
    int index = 0;
    std::string label;

    bool operator==(const Prediction&) const = default;
};

/// Converts an image to the network input: channel replication or
/// grayscale conversion, then bilinear resize when the size differs.
Image prepare_input(const Image& image, InputShape input);

/// Packs prepared images into an (N, C, H, W) tensor.
Tensor images_to_tensor(std::span<const Image> images, InputShape input);

/// With resize disabled, an image whose size differs from the network input
/// raises ShapeMismatch.
Prediction predict(const Network& net, const Image& image, bool resize = true);
std::vector<Prediction> predict_batch(const Network& net, std::span<const Image> images);

}  // namespace fruitgrader::nn
