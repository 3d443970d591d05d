#include "fruitgrader/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fruitgrader/error.hpp"
#include "fruitgrader/kernels.hpp"
#include "fruitgrader/random.hpp"

namespace fruitgrader::nn {
namespace {

constexpr double kHeadInitStd = 0.01;

ActivationShape input_of(const ArchitectureSpec& spec, const std::vector<ActivationShape>& shapes, int ref) {
    if (ref == kNetworkInput) return {spec.input.channels, spec.input.height, spec.input.width};
    return shapes[ref];
}

std::vector<std::string> default_class_names(int n) {
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) names.push_back("class" + std::to_string(i));
    return names;
}

template <typename T>
void fill_normal(BasicTensor<T>& t, double stddev, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void check_finite(const BasicTensor<T>& t, const LayerSpec& node, std::size_t index) {
    for (const T v : t.data()) {
        if (!std::isfinite(v)) {
            throw Error(ErrorKind::NonFiniteActivation,
                        "node " + std::to_string(index) + " (" + node.name + ") produced a non-finite value");
        }
    }
}

template <typename T>
kernels::ConvGeometry conv_geometry(const LayerSpec& node, const ActivationShape& x, int batch) {
    return {.batch = batch, .in_channels = x.channels, .in_h = x.height, .in_w = x.width,
            .out_channels = node.out, .kernel = node.kernel, .stride = node.stride, .pad = node.pad};
}

kernels::PoolGeometry pool_geometry(const LayerSpec& node, const ActivationShape& x, int batch) {
    return {.batch = batch, .channels = x.channels, .in_h = x.height, .in_w = x.width,
            .kernel = node.kernel, .stride = node.stride, .pad = node.pad};
}

// Shared forward. running is non-null only for train-mode passes that update
// the batch norm running statistics.
template <typename T>
ForwardResult<T> run_forward(const BasicNetwork<T>& net, std::vector<LayerParams<T>>* running,
                             const BasicTensor<T>& batch, Mode mode) {
    const auto& spec = net.spec();
    const auto& shapes = net.shapes();
    const auto& in = spec.input;
    if (batch.rank() != 4 || batch.dim(0) < 1 || batch.dim(1) != in.channels || batch.dim(2) != in.height ||
        batch.dim(3) != in.width) {
        throw Error(ErrorKind::ShapeMismatch, "batch " + shape_string(batch.shape()) + " does not match input (" +
                                                  std::to_string(in.channels) + "," + std::to_string(in.height) +
                                                  "," + std::to_string(in.width) + ")");
    }
    const int n = batch.dim(0);
    const std::size_t count = spec.nodes.size();

    ForwardResult<T> result;
    auto& cache = result.cache;
    cache.input = batch;
    cache.batch = n;
    cache.outputs.resize(count);
    cache.cols.resize(count);
    cache.argmax.resize(count);
    cache.xhat.resize(count);
    cache.inv_std.resize(count);

    for (std::size_t i = 0; i < count; ++i) {
        const auto& node = spec.nodes[i];
        const auto& p = net.layers()[i];
        const BasicTensor<T>& x = node.input == kNetworkInput ? cache.input : cache.outputs[node.input];
        const ActivationShape xs = input_of(spec, shapes, node.input);
        const ActivationShape ys = shapes[i];
        if (node.kind == LayerKind::Softmax) continue;

        BasicTensor<T> y({n, ys.channels, ys.height, ys.width});
        const int spatial = xs.height * xs.width;
        switch (node.kind) {
        case LayerKind::Conv: {
            const auto g = conv_geometry<T>(node, xs, n);
            cache.cols[i].resize(g.col_size());
            kernels::conv2d_forward(g, x.ptr(), p.weight.ptr(), p.bias.empty() ? nullptr : p.bias.ptr(), y.ptr(),
                                    cache.cols[i].data());
            break;
        }
        case LayerKind::BatchNorm:
            if (mode == Mode::Train) {
                std::vector<double> mean(xs.channels), var(xs.channels);
                cache.xhat[i] = BasicTensor<T>(x.shape());
                cache.inv_std[i].resize(xs.channels);
                kernels::batch_norm_forward_train(n, xs.channels, spatial, x.ptr(), p.gamma.ptr(), p.beta.ptr(),
                                                  kBatchNormEpsilon, y.ptr(), cache.xhat[i].ptr(), mean.data(),
                                                  var.data(), cache.inv_std[i].data());
                if (running) {
                    auto& r = (*running)[i];
                    const double m = static_cast<double>(n) * spatial;
                    const double unbias = m > 1 ? m / (m - 1) : 1.0;
                    for (int c = 0; c < xs.channels; ++c) {
                        r.running_mean[c] = static_cast<T>((1 - kBatchNormMomentum) * r.running_mean[c] +
                                                           kBatchNormMomentum * mean[c]);
                        r.running_var[c] = static_cast<T>((1 - kBatchNormMomentum) * r.running_var[c] +
                                                          kBatchNormMomentum * var[c] * unbias);
                    }
                }
            } else {
                kernels::batch_norm_forward_infer(n, xs.channels, spatial, x.ptr(), p.gamma.ptr(), p.beta.ptr(),
                                                  p.running_mean.ptr(), p.running_var.ptr(), kBatchNormEpsilon,
                                                  y.ptr());
            }
            break;
        case LayerKind::ReLU:
            for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] > T(0) ? x[k] : T(0);
            break;
        case LayerKind::MaxPool: {
            const auto g = pool_geometry(node, xs, n);
            cache.argmax[i].resize(y.size());
            kernels::max_pool_forward(g, x.ptr(), y.ptr(), cache.argmax[i].data());
            break;
        }
        case LayerKind::GlobalAvgPool:
            for (std::size_t plane = 0; plane < static_cast<std::size_t>(n) * xs.channels; ++plane) {
                double acc = 0.0;
                for (int k = 0; k < spatial; ++k) acc += x[plane * spatial + k];
                y[plane] = static_cast<T>(acc / spatial);
            }
            break;
        case LayerKind::FullyConnected:
            kernels::fc_forward(n, static_cast<int>(xs.size()), node.out, x.ptr(), p.weight.ptr(),
                                p.bias.empty() ? nullptr : p.bias.ptr(), y.ptr());
            break;
        case LayerKind::ResidualAdd: {
            const BasicTensor<T>& z = node.other == kNetworkInput ? cache.input : cache.outputs[node.other];
            for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] + z[k];
            break;
        }
        case LayerKind::Softmax:
            break;
        }
        check_finite(y, node, i);
        cache.outputs[i] = std::move(y);
    }

    const int last = logits_node(spec);
    const int k = static_cast<int>(shapes[last].size());
    const BasicTensor<T>& out = last == kNetworkInput ? cache.input : cache.outputs[last];
    result.logits = BasicTensor<T>({n, k}, std::vector<T>(out.data().begin(), out.data().end()));
    return result;
}

template <typename T>
void accumulate(std::vector<BasicTensor<T>>& grads, int target, BasicTensor<T>&& g) {
    if (target == kNetworkInput) return;
    auto& slot = grads[target];
    if (slot.empty()) {
        slot = std::move(g);
        return;
    }
    for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += g[k];
}

}  // namespace

template <typename T>
BasicNetwork<T>::BasicNetwork(ArchitectureSpec spec, std::uint64_t init_seed)
    : spec_(std::move(spec)), shapes_(infer_shapes(spec_)) {
    layers_.resize(spec_.nodes.size());
    for (std::size_t i = 0; i < spec_.nodes.size(); ++i) init_layer(i, derive_seed(init_seed, i));
    class_names_ = default_class_names(std::max(num_classes(), 0));
}

template <typename T>
void BasicNetwork<T>::init_layer(std::size_t index, std::uint64_t seed) {
    const auto& node = spec_.nodes[index];
    const ActivationShape x = input_of(spec_, shapes_, node.input);
    auto& p = layers_[index];
    p = {};
    switch (node.kind) {
    case LayerKind::Conv: {
        const int fan_in = x.channels * node.kernel * node.kernel;
        p.weight = BasicTensor<T>({node.out, x.channels, node.kernel, node.kernel});
        fill_normal(p.weight, std::sqrt(2.0 / fan_in), seed);
        if (node.bias) p.bias = BasicTensor<T>({node.out});
        break;
    }
    case LayerKind::FullyConnected: {
        const int fan_in = static_cast<int>(x.size());
        const bool head = static_cast<int>(index) == logits_node(spec_);
        p.weight = BasicTensor<T>({node.out, fan_in});
        fill_normal(p.weight, head ? kHeadInitStd : std::sqrt(2.0 / fan_in), seed);
        if (node.bias) p.bias = BasicTensor<T>({node.out});
        break;
    }
    case LayerKind::BatchNorm:
        p.gamma = BasicTensor<T>({x.channels}, T(1));
        p.beta = BasicTensor<T>({x.channels});
        p.running_mean = BasicTensor<T>({x.channels});
        p.running_var = BasicTensor<T>({x.channels}, T(1));
        break;
    default:
        break;
    }
}

template <typename T>
void BasicNetwork<T>::set_class_names(std::vector<std::string> names) {
    if (static_cast<int>(names.size()) != num_classes()) {
        throw Error(ErrorKind::ShapeMismatch, std::to_string(names.size()) + " class names for a " +
                                                  std::to_string(num_classes()) + "-way head");
    }
    class_names_ = std::move(names);
}

template <typename T>
std::size_t BasicNetwork<T>::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : layers_) total += p.weight.size() + p.bias.size() + p.gamma.size() + p.beta.size();
    return total;
}

template <typename T>
template <typename U>
BasicNetwork<U> BasicNetwork<T>::cast() const {
    BasicNetwork<U> out;
    out.spec_ = spec_;
    out.shapes_ = shapes_;
    out.class_names_ = class_names_;
    out.layers_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& a = layers_[i];
        auto& b = out.layers_[i];
        b.weight = a.weight.template cast<U>();
        b.bias = a.bias.template cast<U>();
        b.gamma = a.gamma.template cast<U>();
        b.beta = a.beta.template cast<U>();
        b.running_mean = a.running_mean.template cast<U>();
        b.running_var = a.running_var.template cast<U>();
    }
    return out;
}

template <typename T>
BasicNetwork<T> replace_head(const BasicNetwork<T>& net, int new_num_classes, std::uint64_t seed) {
    const int head = logits_node(net.spec_);
    if (head < 0 || net.spec_.nodes[head].kind != LayerKind::FullyConnected ||
        net.spec_.nodes.back().kind != LayerKind::Softmax) {
        throw Error(ErrorKind::NoHeadFound, "network '" + net.spec_.name + "' has no trailing fully connected + softmax");
    }
    if (new_num_classes < 2) throw Error(ErrorKind::InvalidArgument, "head needs at least 2 outputs");
    BasicNetwork<T> out = net;
    out.spec_.nodes[head].out = new_num_classes;
    out.shapes_ = infer_shapes(out.spec_);
    out.init_layer(static_cast<std::size_t>(head), derive_seed(seed, static_cast<std::uint64_t>(head)));
    if (new_num_classes != net.num_classes()) out.class_names_ = default_class_names(new_num_classes);
    return out;
}

template <typename T>
ForwardResult<T> forward(BasicNetwork<T>& net, const BasicTensor<T>& batch, Mode mode) {
    return run_forward(net, mode == Mode::Train ? &net.layers() : nullptr, batch, mode);
}

template <typename T>
BasicTensor<T> infer(const BasicNetwork<T>& net, const BasicTensor<T>& batch) {
    return run_forward<T>(net, nullptr, batch, Mode::Infer).logits;
}

template <typename T>
std::vector<LayerParams<T>> backward(const BasicNetwork<T>& net, const ForwardCache<T>& cache,
                                     const BasicTensor<T>& dlogits) {
    const auto& spec = net.spec();
    const auto& shapes = net.shapes();
    const int n = cache.batch;
    std::vector<LayerParams<T>> grads(spec.nodes.size());
    std::vector<BasicTensor<T>> dact(spec.nodes.size());

    const int last = logits_node(spec);
    if (last == kNetworkInput) return grads;
    if (dlogits.size() != cache.outputs[last].size()) {
        throw Error(ErrorKind::ShapeMismatch, "dlogits " + shape_string(dlogits.shape()) + " vs logits " +
                                                  shape_string(cache.outputs[last].shape()));
    }
    dact[last] = BasicTensor<T>(cache.outputs[last].shape(), std::vector<T>(dlogits.data().begin(), dlogits.data().end()));

    for (int i = last; i >= 0; --i) {
        if (dact[i].empty()) continue;
        const auto& node = spec.nodes[i];
        const auto& p = net.layers()[i];
        const BasicTensor<T> dy = std::move(dact[i]);
        dact[i] = {};
        const BasicTensor<T>& x = node.input == kNetworkInput ? cache.input : cache.outputs[node.input];
        const ActivationShape xs = input_of(spec, shapes, node.input);
        const int spatial = xs.height * xs.width;
        const bool need_din = node.input != kNetworkInput;
        BasicTensor<T> din;
        if (need_din) din = BasicTensor<T>(x.shape());
        auto& g = grads[i];

        switch (node.kind) {
        case LayerKind::Conv: {
            const auto geom = conv_geometry<T>(node, xs, n);
            g.weight = BasicTensor<T>(p.weight.shape());
            if (!p.bias.empty()) g.bias = BasicTensor<T>(p.bias.shape());
            kernels::conv2d_backward(geom, dy.ptr(), p.weight.ptr(), cache.cols[i].data(), g.weight.ptr(),
                                     g.bias.empty() ? nullptr : g.bias.ptr(), need_din ? din.ptr() : nullptr);
            break;
        }
        case LayerKind::BatchNorm: {
            if (cache.xhat[i].empty()) {
                throw Error(ErrorKind::InvalidArgument, "backward needs a train-mode forward cache");
            }
            g.gamma = BasicTensor<T>(p.gamma.shape());
            g.beta = BasicTensor<T>(p.beta.shape());
            BasicTensor<T> scratch;
            if (!need_din) scratch = BasicTensor<T>(x.shape());
            kernels::batch_norm_backward(n, xs.channels, spatial, dy.ptr(), cache.xhat[i].ptr(), p.gamma.ptr(),
                                         cache.inv_std[i].data(), g.gamma.ptr(), g.beta.ptr(),
                                         need_din ? din.ptr() : scratch.ptr());
            break;
        }
        case LayerKind::ReLU:
            if (need_din) {
                const auto& y = cache.outputs[i];
                for (std::size_t k = 0; k < dy.size(); ++k) din[k] = y[k] > T(0) ? dy[k] : T(0);
            }
            break;
        case LayerKind::MaxPool:
            if (need_din) kernels::max_pool_backward(pool_geometry(node, xs, n), dy.ptr(), cache.argmax[i].data(), din.ptr());
            break;
        case LayerKind::GlobalAvgPool:
            if (need_din) {
                for (std::size_t plane = 0; plane < static_cast<std::size_t>(n) * xs.channels; ++plane) {
                    const T v = static_cast<T>(dy[plane] / static_cast<T>(spatial));
                    std::fill(din.ptr() + plane * spatial, din.ptr() + (plane + 1) * spatial, v);
                }
            }
            break;
        case LayerKind::FullyConnected:
            g.weight = BasicTensor<T>(p.weight.shape());
            if (!p.bias.empty()) g.bias = BasicTensor<T>(p.bias.shape());
            kernels::fc_backward(n, static_cast<int>(xs.size()), node.out, x.ptr(), dy.ptr(), p.weight.ptr(),
                                 g.weight.ptr(), g.bias.empty() ? nullptr : g.bias.ptr(),
                                 need_din ? din.ptr() : nullptr);
            break;
        case LayerKind::ResidualAdd:
            if (need_din) din = dy;
            accumulate(dact, node.other, BasicTensor<T>(dy));
            break;
        case LayerKind::Softmax:
            break;
        }
        if (need_din) accumulate(dact, node.input, std::move(din));
    }
    return grads;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty()) return p;
    const double mx = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (auto& v : p) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (auto& v : p) v /= sum;
    return p;
}

std::vector<double> softmax(std::span<const float> logits) {
    const std::vector<double> d(logits.begin(), logits.end());
    return softmax(std::span<const double>(d));
}

int argmax(std::span<const double> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = static_cast<int>(i);
    }
    return best;
}

template <typename T>
LossResult<T> loss_and_grad(const BasicTensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size()) {
        throw Error(ErrorKind::ShapeMismatch, "logits " + shape_string(logits.shape()) + " vs " +
                                                  std::to_string(labels.size()) + " labels");
    }
    const int n = logits.dim(0);
    const int k = logits.dim(1);
    LossResult<T> r;
    r.dlogits = BasicTensor<T>(logits.shape());
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const int label = labels[i];
        if (label < 0 || label >= k) {
            throw Error(ErrorKind::LabelOutOfRange,
                        "label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
        }
        const std::vector<double> row(logits.ptr() + static_cast<std::size_t>(i) * k,
                                      logits.ptr() + static_cast<std::size_t>(i + 1) * k);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double v : row) sum += std::exp(v - mx);
        const double log_z = mx + std::log(sum);
        total += log_z - row[label];
        for (int c = 0; c < k; ++c) {
            const double prob = std::exp(row[c] - log_z);
            r.dlogits[static_cast<std::size_t>(i) * k + c] = static_cast<T>((prob - (c == label ? 1.0 : 0.0)) / n);
        }
        if (argmax(row) == label) ++r.correct;
    }
    r.loss = total / n;
    return r;
}

Image prepare_input(const Image& image, InputShape input) {
    if (image.empty()) throw Error(ErrorKind::ZeroDimension, "empty image");
    Image img = image;
    if (input.channels == 1 && img.channels() == 3) {
        img = imaging::to_grayscale(img);
    } else if (input.channels == 3 && img.channels() == 1) {
        Image rgb(img.width(), img.height(), 3);
        for (int y = 0; y < img.height(); ++y) {
            for (int x = 0; x < img.width(); ++x) {
                for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = img.at(x, y);
            }
        }
        img = std::move(rgb);
    } else if (img.channels() != input.channels) {
        throw Error(ErrorKind::WrongChannelCount, "cannot map " + std::to_string(img.channels()) + " channels to " +
                                                      std::to_string(input.channels));
    }
    if (img.width() != input.width || img.height() != input.height) {
        img = imaging::resize_bilinear(img, input.width, input.height);
    }
    return img;
}

Tensor images_to_tensor(std::span<const Image> images, InputShape input) {
    const int n = static_cast<int>(images.size());
    Tensor t({n, input.channels, input.height, input.width});
    const std::size_t plane = static_cast<std::size_t>(input.height) * input.width;
    for (int i = 0; i < n; ++i) {
        const Image& img = images[i];
        if (img.width() != input.width || img.height() != input.height || img.channels() != input.channels) {
            throw Error(ErrorKind::ShapeMismatch, "image " + std::to_string(i) + " is not prepared for the input");
        }
        float* dst = t.ptr() + static_cast<std::size_t>(i) * input.channels * plane;
        for (int c = 0; c < input.channels; ++c) {
            for (int y = 0; y < input.height; ++y) {
                for (int x = 0; x < input.width; ++x) {
                    dst[c * plane + static_cast<std::size_t>(y) * input.width + x] = img.at(x, y, c);
                }
            }
        }
    }
    return t;
}

std::vector<Prediction> predict_batch(const Network& net, std::span<const Image> images) {
    std::vector<Image> prepared;
    prepared.reserve(images.size());
    for (const auto& img : images) prepared.push_back(prepare_input(img, net.spec().input));
    const Tensor logits = infer(net, images_to_tensor(prepared, net.spec().input));
    const int k = logits.dim(1);
    std::vector<Prediction> out(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        auto& p = out[i];
        p.probs = softmax(std::span<const float>(logits.ptr() + i * k, static_cast<std::size_t>(k)));
        p.index = argmax(p.probs);
        p.label = net.class_names().at(p.index);
    }
    return out;
}

Prediction predict(const Network& net, const Image& image, bool resize) {
    const auto& in = net.spec().input;
    if (!resize && (image.width() != in.width || image.height() != in.height)) {
        throw Error(ErrorKind::ShapeMismatch, std::to_string(image.width()) + "x" + std::to_string(image.height()) +
                                                  " image for a " + std::to_string(in.width) + "x" +
                                                  std::to_string(in.height) + " network");
    }
    return predict_batch(net, std::span<const Image>(&image, 1)).front();
}

#define FRUITGRADER_INSTANTIATE(T)                                                                          \
    template class BasicNetwork<T>;                                                                         \
    template BasicNetwork<T> replace_head(const BasicNetwork<T>&, int, std::uint64_t);                      \
    template ForwardResult<T> forward(BasicNetwork<T>&, const BasicTensor<T>&, Mode);                       \
    template BasicTensor<T> infer(const BasicNetwork<T>&, const BasicTensor<T>&);                           \
    template std::vector<LayerParams<T>> backward(const BasicNetwork<T>&, const ForwardCache<T>&,           \
                                                  const BasicTensor<T>&);                                   \
    template LossResult<T> loss_and_grad(const BasicTensor<T>&, std::span<const int>);

FRUITGRADER_INSTANTIATE(float)
FRUITGRADER_INSTANTIATE(double)
#undef FRUITGRADER_INSTANTIATE

template BasicNetwork<double> BasicNetwork<float>::cast<double>() const;
template BasicNetwork<float> BasicNetwork<double>::cast<float>() const;
template BasicNetwork<double> BasicNetwork<double>::cast<double>() const;

}  // namespace fruitgrader::nn
