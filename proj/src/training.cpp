#include "fruitgrader/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fruitgrader/codec.hpp"
#include "fruitgrader/error.hpp"
#include "fruitgrader/random.hpp"

namespace fruitgrader::nn {
namespace {

bool is_decayed(LayerKind kind) { return kind == LayerKind::Conv || kind == LayerKind::FullyConnected; }

// Visits (param, grad, velocity, decayed) for every trainable tensor.
template <typename T, typename F>
void for_each_trainable(BasicNetwork<T>& net, std::vector<LayerParams<T>>& grads,
                        std::vector<LayerParams<T>>& velocity, F&& fn) {
    auto& layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const bool decayed = is_decayed(net.spec().nodes[i].kind);
        auto& p = layers[i];
        auto& g = grads[i];
        auto& v = velocity[i];
        fn(p.weight, g.weight, v.weight, decayed);
        fn(p.bias, g.bias, v.bias, false);
        fn(p.gamma, g.gamma, v.gamma, false);
        fn(p.beta, g.beta, v.beta, false);
    }
}

// Hash of every ReLU on/off state and max pool winner in a forward pass.
template <typename T>
std::uint64_t kink_pattern(const ArchitectureSpec& spec, const ForwardCache<T>& cache) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) { h = (h ^ v) * 1099511628211ULL; };
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
        if (spec.nodes[i].kind == LayerKind::ReLU) {
            for (const T v : cache.outputs[i].data()) mix(v > T(0));
        } else if (spec.nodes[i].kind == LayerKind::MaxPool) {
            for (const std::int32_t a : cache.argmax[i]) mix(static_cast<std::uint64_t>(a));
        }
    }
    return h;
}

std::string format_double(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

}  // namespace

std::vector<std::string> TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidArgument, m); };
    if (!(initial_learn_rate > 0.0) || !std::isfinite(initial_learn_rate)) fail("initial_learn_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0,1)");
    if (mini_batch_size < 1) fail("mini_batch_size must be >= 1");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (schedule == Schedule::Piecewise) {
        if (drop_period < 1) fail("drop_period must be >= 1");
        if (!(drop_factor > 0.0 && drop_factor <= 1.0)) fail("drop_factor must be in (0,1]");
    }
    if (!(l2_regularization >= 0.0) || !std::isfinite(l2_regularization)) fail("l2_regularization must be >= 0");
    if (validation_every < 0) fail("validation_every must be >= 0");
    std::vector<std::string> warnings;
    if (l2_regularization > 1.0) {
        warnings.push_back("l2_regularization " + format_double(l2_regularization) +
                           " is unusually large and will dominate the loss");
    }
    return warnings;
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
    if (epoch < 1) throw Error(ErrorKind::InvalidArgument, "epoch must be >= 1");
    double lr = config.initial_learn_rate;
    if (config.schedule == Schedule::Piecewise) {
        const int drops = (epoch - 1) / config.drop_period;
        for (int i = 0; i < drops; ++i) lr *= config.drop_factor;
    }
    return lr;
}

template <typename T>
LossResult<T> train_step(BasicNetwork<T>& net, const BasicTensor<T>& batch, std::span<const int> labels,
                         const TrainConfig& config, SgdmState<T>& state, int epoch) {
    const double lr = lr_at_epoch(config, epoch);
    auto fwd = forward(net, batch, Mode::Train);
    auto loss = loss_and_grad(fwd.logits, labels);
    auto grads = backward(net, fwd.cache, loss.dlogits);

    if (state.velocity.size() != net.layers().size()) {
        state.velocity.assign(net.layers().size(), {});
    }
    const auto& nodes = net.spec().nodes;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto check = [&](const BasicTensor<T>& g) {
            for (const T v : g.data()) {
                if (!std::isfinite(v)) {
                    throw Error(ErrorKind::NonFiniteGradient, "non-finite gradient in node " + std::to_string(i) +
                                                                  " (" + nodes[i].name + ")");
                }
            }
        };
        check(grads[i].weight);
        check(grads[i].bias);
        check(grads[i].gamma);
        check(grads[i].beta);
    }

    const T m = static_cast<T>(config.momentum);
    const T rate = static_cast<T>(lr);
    const T l2 = static_cast<T>(config.l2_regularization);
    for_each_trainable(net, grads, state.velocity,
                       [&](BasicTensor<T>& w, const BasicTensor<T>& g, BasicTensor<T>& v, bool decayed) {
                           if (w.empty()) return;
                           if (v.size() != w.size()) v = BasicTensor<T>(w.shape());
                           for (std::size_t k = 0; k < w.size(); ++k) {
                               const T grad = decayed ? g[k] + l2 * w[k] : g[k];
                               v[k] = m * v[k] - rate * grad;
                               w[k] += v[k];
                           }
                       });
    return loss;
}

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::InvalidArgument, "cannot write " + path.string());
    out << "epoch,lr,train_loss,train_acc,valid_acc\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ','
            << format_double(r.train_acc) << ',';
        if (r.valid_acc) out << format_double(*r.valid_acc);
        out << '\n';
    }
}

TrainHistory read_history_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MalformedFile, "cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "epoch,lr,train_loss,train_acc,valid_acc") throw Error(ErrorKind::MissingColumn, "bad history header");
    TrainHistory h;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() == 4) f.emplace_back();
        if (f.size() != 5) throw Error(ErrorKind::MalformedFile, "bad history row: " + line);
        EpochRecord r;
        r.epoch = std::stoi(f[0]);
        r.lr = std::stod(f[1]);
        r.train_loss = std::stod(f[2]);
        r.train_acc = std::stod(f[3]);
        if (!f[4].empty()) r.valid_acc = std::stod(f[4]);
        h.push_back(r);
    }
    return h;
}

InMemorySource::InMemorySource(std::vector<Image> images, std::vector<int> labels)
    : images_(std::move(images)), labels_(std::move(labels)) {
    if (images_.size() != labels_.size()) {
        throw Error(ErrorKind::LengthMismatch, std::to_string(images_.size()) + " images vs " +
                                                   std::to_string(labels_.size()) + " labels");
    }
}

FileSource::FileSource(std::vector<dataset::ClassificationSample> samples,
                       std::optional<dataset::AugmentationSpec> augmentation, std::uint64_t augment_seed)
    : samples_(std::move(samples)), augmentation_(std::move(augmentation)), augment_seed_(augment_seed) {
    if (augmentation_) augmentation_->validate();
}

Image FileSource::load(std::size_t i) const {
    Image img = imaging::load_image(samples_.at(i).image_path);
    if (!augmentation_) return img;
    const std::uint64_t seed = derive_seed(derive_seed(augment_seed_, static_cast<std::uint64_t>(epoch_)), i);
    return dataset::augment(img, *augmentation_, seed);
}

Tensor load_batch(const SampleSource& source, std::span<const std::size_t> indices, InputShape input) {
    std::vector<Image> images(indices.size());
    const long n = static_cast<long>(indices.size());
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (long k = 0; k < n; ++k) {
        try {
            images[k] = prepare_input(source.load(indices[k]), input);
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return images_to_tensor(images, input);
}

double evaluate_accuracy(const Network& net, const SampleSource& source, int batch_size) {
    if (source.size() == 0) return 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < source.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(source.size(), start + batch_size); ++i) idx.push_back(i);
        const Tensor logits = infer(net, load_batch(source, idx, net.spec().input));
        const int k = logits.dim(1);
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const auto p = softmax(std::span<const float>(logits.ptr() + j * k, static_cast<std::size_t>(k)));
            if (argmax(p) == source.label(idx[j])) ++correct;
        }
    }
    return static_cast<double>(correct) / source.size();
}

TrainResult train_classifier(const SampleSource& train, const SampleSource* valid, const ArchitectureSpec& spec,
                             const TrainConfig& config, const TrainOptions& options) {
    config.validate();
    if (train.size() == 0) throw Error(ErrorKind::InvalidArgument, "no training samples");
    TrainResult result{options.initial ? *options.initial : Network(spec, options.init_seed), {}};
    Network& net = result.net;
    const int k = net.num_classes();
    if (!options.class_names.empty()) net.set_class_names(options.class_names);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const int label = train.label(i);
        if (label < 0 || label >= k) {
            throw Error(ErrorKind::LabelOutOfRange, "training label " + std::to_string(label) + " outside head of " +
                                                        std::to_string(k));
        }
    }

    SgdmState<float> state;
    std::vector<std::size_t> order(train.size());
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        if (options.before_epoch) options.before_epoch(epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(config.shuffle_seed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += config.mini_batch_size) {
            const std::size_t end = std::min(order.size(), start + config.mini_batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(train.label(i));
            const Tensor batch = load_batch(train, idx, net.spec().input);
            const auto loss = train_step(net, batch, labels, config, state, epoch);
            loss_sum += loss.loss * static_cast<double>(idx.size());
            correct += static_cast<std::size_t>(loss.correct);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr_at_epoch(config, epoch);
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
        if (valid && valid->size() > 0 && config.validation_every > 0 &&
            (epoch % config.validation_every == 0 || epoch == config.max_epochs)) {
            rec.valid_acc = evaluate_accuracy(net, *valid);
        }
        result.history.push_back(rec);
        if (options.on_epoch && !options.on_epoch(rec)) break;
    }
    return result;
}

template <typename T>
GradientCheckReport gradient_check(const BasicNetwork<T>& net, const BasicTensor<T>& batch,
                                   std::span<const int> labels, const GradientCheckOptions& options) {
    if (!(options.epsilon >= 1e-3 && options.epsilon <= 1e-1)) {
        throw Error(ErrorKind::InvalidArgument, "epsilon must be in [1e-3, 1e-1]");
    }
    // Analytic gradients at the network's own precision. The finite
    // differences run on a double copy: in float the loss resolution divided
    // by epsilon swamps small gradients.
    BasicNetwork<T> own = net;
    auto fwd = forward(own, batch, Mode::Train);
    const auto grads = backward(own, fwd.cache, loss_and_grad(fwd.logits, labels).dlogits);

    BasicNetwork<double> work = net.template cast<double>();
    const BasicTensor<double> input = batch.template cast<double>();
    const std::uint64_t base_pattern = kink_pattern(work.spec(), forward(work, input, Mode::Train).cache);

    // Loss at the current parameters, or nullopt when the ReLU masks or
    // pooling winners differ from the unperturbed pass.
    auto loss_at = [&]() -> std::optional<double> {
        auto f = forward(work, input, Mode::Train);
        if (kink_pattern(work.spec(), f.cache) != base_pattern) return std::nullopt;
        return loss_and_grad(f.logits, labels).loss;
    };

    GradientCheckReport report;
    Rng rng(options.seed);
    const double h = options.epsilon;
    auto check_tensor = [&](BasicTensor<double>& param, const BasicTensor<T>& grad, const std::string& name) {
        if (param.empty()) return;
        std::vector<std::size_t> coords(param.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        std::shuffle(coords.begin(), coords.end(), rng);
        std::size_t checked = 0;
        for (std::size_t c : coords) {
            if (checked == static_cast<std::size_t>(options.coordinates_per_tensor)) break;
            const double saved = param[c];
            double f[4];
            const double offsets[4] = {2 * h, h, -h, -2 * h};
            bool smooth = true;
            for (int k = 0; k < 4 && smooth; ++k) {
                param[c] = saved + offsets[k];
                const auto loss = loss_at();
                if (loss) f[k] = *loss;
                smooth = loss.has_value();
            }
            param[c] = saved;
            if (!smooth) {
                ++report.skipped;
                continue;
            }
            // Fourth-order central difference.
            const double numeric = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h);
            const double analytic = grad[c];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            const double rel = std::abs(analytic - numeric) / denom;
            ++checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_tensor = name;
            }
        }
        report.coordinates += checked;
    };

    const auto& nodes = work.spec().nodes;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        auto& p = work.layers()[i];
        const auto& g = grads[i];
        check_tensor(p.weight, g.weight, nodes[i].name + ".weight");
        check_tensor(p.bias, g.bias, nodes[i].name + ".bias");
        check_tensor(p.gamma, g.gamma, nodes[i].name + ".gamma");
        check_tensor(p.beta, g.beta, nodes[i].name + ".beta");
    }
    return report;
}

template LossResult<float> train_step(BasicNetwork<float>&, const BasicTensor<float>&, std::span<const int>,
                                      const TrainConfig&, SgdmState<float>&, int);
template LossResult<double> train_step(BasicNetwork<double>&, const BasicTensor<double>&, std::span<const int>,
                                       const TrainConfig&, SgdmState<double>&, int);
template GradientCheckReport gradient_check(const BasicNetwork<float>&, const BasicTensor<float>&,
                                            std::span<const int>, const GradientCheckOptions&);
template GradientCheckReport gradient_check(const BasicNetwork<double>&, const BasicTensor<double>&,
                                            std::span<const int>, const GradientCheckOptions&);

}  // namespace fruitgrader::nn
