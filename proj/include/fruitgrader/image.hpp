#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace fruitgrader::imaging {

/// Raster image with interleaved channels, samples in [0,1].
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels, float fill = 0.0f);
    Image(int width, int height, int channels, std::vector<float> data);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int channels() const noexcept { return channels_; }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t size() const noexcept { return data_.size(); }

    float& at(int x, int y, int c = 0) {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }
    float at(int x, int y, int c = 0) const {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    bool operator==(const Image&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    int channels_ = 0;
    std::vector<float> data_;
};

/// Axis-aligned box, top-left origin, real-valued pixels.
struct BBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double right() const noexcept { return x + w; }
    double bottom() const noexcept { return y + h; }
    double area() const noexcept { return w * h; }
    bool valid() const noexcept;

    bool operator==(const BBox&) const = default;
};

/// Intersection over union; 0 when either box has no area.
double iou(const BBox& a, const BBox& b) noexcept;

/// 2-D prefix sums of a single-channel image, plus the same for squared
/// samples. Row and column 0 are zero padding.
class IntegralImage {
public:
    IntegralImage() = default;
    explicit IntegralImage(const Image& gray);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }

    double sum_at(int row, int col) const noexcept { return sums_[index(row, col)]; }
    double squared_sum_at(int row, int col) const noexcept { return squared_[index(row, col)]; }

    /// Corner lookup without bounds checks. Callers guarantee the rectangle is in range.
    double rect_sum_unchecked(int x, int y, int w, int h) const noexcept {
        const std::size_t stride = static_cast<std::size_t>(width_) + 1;
        const double* s = sums_.data();
        const std::size_t top = static_cast<std::size_t>(y) * stride;
        const std::size_t bot = static_cast<std::size_t>(y + h) * stride;
        return s[bot + x + w] - s[bot + x] - s[top + x + w] + s[top + x];
    }
    double squared_rect_sum_unchecked(int x, int y, int w, int h) const noexcept {
        const std::size_t stride = static_cast<std::size_t>(width_) + 1;
        const double* s = squared_.data();
        const std::size_t top = static_cast<std::size_t>(y) * stride;
        const std::size_t bot = static_cast<std::size_t>(y + h) * stride;
        return s[bot + x + w] - s[bot + x] - s[top + x + w] + s[top + x];
    }

private:
    std::size_t index(int row, int col) const noexcept {
        return static_cast<std::size_t>(row) * (static_cast<std::size_t>(width_) + 1) + col;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<double> sums_;
    std::vector<double> squared_;
};

enum class FlipAxis { Horizontal, Vertical };

Image to_grayscale(const Image& img);
Image resize_bilinear(const Image& img, int out_w, int out_h);
Image crop(const Image& img, const BBox& box);
Image flip(const Image& img, FlipAxis axis);
Image rotate(const Image& img, double degrees);
Image gaussian_blur(const Image& img, double sigma);

/// Normalized 1-D Gaussian kernel with radius ceil(3*sigma). sigma must be > 0.
std::vector<double> gaussian_kernel(double sigma);

IntegralImage integral_image(const Image& gray);
double rect_sum(const IntegralImage& ii, int x, int y, int w, int h);

/// Gray conversion that passes 1-channel images through unchanged.
Image ensure_grayscale(const Image& img);

}  // namespace fruitgrader::imaging
