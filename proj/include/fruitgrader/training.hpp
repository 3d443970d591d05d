#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fruitgrader/dataset.hpp"
#include "fruitgrader/network.hpp"

namespace fruitgrader::nn {

enum class Schedule { None, Piecewise };

struct TrainConfig {
    double initial_learn_rate = 0.01;
    double momentum = 0.9;
    int mini_batch_size = 32;
    int max_epochs = 10;
    Schedule schedule = Schedule::None;
    int drop_period = 1;
    double drop_factor = 1.0;
    double l2_regularization = 0.0;
    std::uint64_t shuffle_seed = 0;
    int validation_every = 1;  // epochs; 0 disables validation

    /// Throws InvalidArgument on out-of-contract values. Returns warnings for
    /// accepted but suspicious values (L2 above 1).
    std::vector<std::string> validate() const;
};

double lr_at_epoch(const TrainConfig& config, int epoch);

/// SGDM velocity per parameter, laid out like the network layers.
template <typename T>
struct SgdmState {
    std::vector<LayerParams<T>> velocity;
};

/// One SGDM step on a batch. grad += l2 * w for conv and FC weights only;
/// v = momentum * v - lr * grad; w += v. Returns the batch loss. Throws
/// NonFiniteGradient before any parameter changes.
template <typename T>
LossResult<T> train_step(BasicNetwork<T>& net, const BasicTensor<T>& batch, std::span<const int> labels,
                         const TrainConfig& config, SgdmState<T>& state, int epoch);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    std::optional<double> valid_acc;

    bool operator==(const EpochRecord&) const = default;
};

using TrainHistory = std::vector<EpochRecord>;

/// Writes `epoch,lr,train_loss,train_acc,valid_acc` rows; skipped
/// validations leave the last column empty.
void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory read_history_csv(const std::filesystem::path& path);

/// Random-access labelled images. Implementations must be safe to read
/// concurrently.
class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual int label(std::size_t i) const = 0;
    virtual Image load(std::size_t i) const = 0;
};

class InMemorySource final : public SampleSource {
public:
    InMemorySource(std::vector<Image> images, std::vector<int> labels);
    std::size_t size() const override { return images_.size(); }
    int label(std::size_t i) const override { return labels_.at(i); }
    Image load(std::size_t i) const override { return images_.at(i); }

private:
    std::vector<Image> images_;
    std::vector<int> labels_;
};

/// Reads image files on demand, optionally augmenting them with a seed
/// that depends on the sample index and a caller-advanced epoch counter.
class FileSource final : public SampleSource {
public:
    explicit FileSource(std::vector<dataset::ClassificationSample> samples,
                        std::optional<dataset::AugmentationSpec> augmentation = std::nullopt,
                        std::uint64_t augment_seed = 0);
    std::size_t size() const override { return samples_.size(); }
    int label(std::size_t i) const override { return samples_.at(i).class_id; }
    Image load(std::size_t i) const override;
    void set_epoch(int epoch) { epoch_ = epoch; }

private:
    std::vector<dataset::ClassificationSample> samples_;
    std::optional<dataset::AugmentationSpec> augmentation_;
    std::uint64_t augment_seed_;
    int epoch_ = 0;
};

struct TrainOptions {
    std::uint64_t init_seed = 0;
    std::vector<std::string> class_names;
    /// Start from these weights instead of a fresh initialization.
    std::optional<Network> initial;
    /// Called after every epoch; return false to stop early.
    std::function<bool(const EpochRecord&)> on_epoch;
    /// Called before every epoch (e.g. to advance augmentation).
    std::function<void(int epoch)> before_epoch;
};

struct TrainResult {
    Network net;
    TrainHistory history;
};

/// Seeded shuffle per epoch, partial final batch kept. Deterministic for a
/// fixed seed. Throws InvalidArgument for empty inputs or bad configs and
/// LabelOutOfRange for labels beyond the head.
TrainResult train_classifier(const SampleSource& train, const SampleSource* valid, const ArchitectureSpec& spec,
                             const TrainConfig& config, const TrainOptions& options = {});

/// Infer-mode accuracy in batches.
double evaluate_accuracy(const Network& net, const SampleSource& source, int batch_size = 64);

/// Loads and prepares a batch, in parallel, preserving order.
Tensor load_batch(const SampleSource& source, std::span<const std::size_t> indices, InputShape input);

struct GradientCheckOptions {
    double epsilon = 1e-3;
    int coordinates_per_tensor = 200;  // tensors smaller than this are checked in full
    std::uint64_t seed = 0;
};

struct GradientCheckReport {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::size_t skipped = 0;  // perturbation crossed a ReLU or pooling kink
    std::string worst_tensor;
};

/// Fourth-order central finite differences of the training loss (train-mode
/// batch norm) against backward() on a seeded subset of every trainable
/// tensor. backward() runs at T; the differences are taken on a double copy
/// of the same weights and batch. Coordinates whose perturbation flips a ReLU mask or max pool
/// winner are not differentiable there and are skipped in favour of the next
/// candidate. Relative error uses max(|a|, |n|, 1e-6) as denominator. Throws
/// InvalidArgument when epsilon is outside [1e-3, 1e-1].
template <typename T>
GradientCheckReport gradient_check(const BasicNetwork<T>& net, const BasicTensor<T>& batch,
                                   std::span<const int> labels, const GradientCheckOptions& options = {});

}  // namespace fruitgrader::nn
