#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace fruitgrader::nn {

/// Dense row-major tensor. Activations use (N, C, H, W).
template <typename T>
class BasicTensor {
public:
    BasicTensor() = default;
    explicit BasicTensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
        data_.assign(element_count(shape_), fill);
    }
    BasicTensor(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {}

    const std::vector<int>& shape() const noexcept { return shape_; }
    int dim(std::size_t i) const noexcept { return i < shape_.size() ? shape_[i] : 1; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }
    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Elements per leading index (C*H*W for activations).
    std::size_t stride0() const noexcept { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

    template <typename U>
    BasicTensor<U> cast() const {
        return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const BasicTensor&) const = default;

    static std::size_t element_count(const std::vector<int>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

std::string shape_string(const std::vector<int>& shape);

}  // namespace fruitgrader::nn
