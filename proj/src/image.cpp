#include "fruitgrader/image.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fruitgrader/error.hpp"

namespace fruitgrader::imaging {

Image::Image(int width, int height, int channels, float fill)
    : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || (channels != 1 && channels != 3)) {
        throw Error(ErrorKind::InvalidArgument, "bad image geometry " + std::to_string(width) + "x" +
                                                    std::to_string(height) + "x" + std::to_string(channels));
    }
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

Image::Image(int width, int height, int channels, std::vector<float> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    if (width < 0 || height < 0 || (channels != 1 && channels != 3)) {
        throw Error(ErrorKind::InvalidArgument, "bad image geometry");
    }
    if (data_.size() != static_cast<std::size_t>(width) * height * channels) {
        throw Error(ErrorKind::InvalidArgument, "image data length does not match geometry");
    }
}

bool BBox::valid() const noexcept {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) && w > 0.0 && h > 0.0;
}

double iou(const BBox& a, const BBox& b) noexcept {
    const double ix = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    if (inter <= 0.0 || uni <= 0.0) return 0.0;
    if (a == b) return 1.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

IntegralImage::IntegralImage(const Image& gray) : width_(gray.width()), height_(gray.height()) {
    if (gray.channels() != 1) {
        throw Error(ErrorKind::WrongChannelCount, "integral image needs 1 channel, got " +
                                                      std::to_string(gray.channels()));
    }
    const std::size_t stride = static_cast<std::size_t>(width_) + 1;
    sums_.assign(stride * (static_cast<std::size_t>(height_) + 1), 0.0);
    squared_.assign(sums_.size(), 0.0);
    for (int y = 0; y < height_; ++y) {
        double row = 0.0;
        double row_sq = 0.0;
        for (int x = 0; x < width_; ++x) {
            const double v = gray.at(x, y);
            row += v;
            row_sq += v * v;
            sums_[(y + 1) * stride + x + 1] = sums_[y * stride + x + 1] + row;
            squared_[(y + 1) * stride + x + 1] = squared_[y * stride + x + 1] + row_sq;
        }
    }
}

Image to_grayscale(const Image& img) {
    if (img.channels() != 3) {
        throw Error(ErrorKind::WrongChannelCount, "to_grayscale needs 3 channels, got " +
                                                      std::to_string(img.channels()));
    }
    Image out(img.width(), img.height(), 1);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const double luma = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
            out.at(x, y) = static_cast<float>(std::clamp(luma, 0.0, 1.0));
        }
    }
    return out;
}

Image ensure_grayscale(const Image& img) {
    return img.channels() == 1 ? img : to_grayscale(img);
}

Image resize_bilinear(const Image& img, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) {
        throw Error(ErrorKind::ZeroDimension, "resize target " + std::to_string(out_w) + "x" +
                                                  std::to_string(out_h));
    }
    if (img.empty()) throw Error(ErrorKind::ZeroDimension, "resize of empty image");
    if (out_w == img.width() && out_h == img.height()) return img;

    const int ch = img.channels();
    const double sx = static_cast<double>(img.width()) / out_w;
    const double sy = static_cast<double>(img.height()) / out_h;

    // Per-axis source indices and weights, center-aligned and clamped.
    auto axis = [](int n_out, int n_in, double scale) {
        std::vector<int> lo(n_out), hi(n_out);
        std::vector<double> frac(n_out);
        for (int i = 0; i < n_out; ++i) {
            double s = (i + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
            lo[i] = static_cast<int>(std::floor(s));
            hi[i] = std::min(lo[i] + 1, n_in - 1);
            frac[i] = s - lo[i];
        }
        return std::tuple{lo, hi, frac};
    };
    const auto [x0, x1, fx] = axis(out_w, img.width(), sx);
    const auto [y0, y1, fy] = axis(out_h, img.height(), sy);

    Image out(out_w, out_h, ch);
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            for (int c = 0; c < ch; ++c) {
                const double top = (1.0 - fx[x]) * img.at(x0[x], y0[y], c) + fx[x] * img.at(x1[x], y0[y], c);
                const double bot = (1.0 - fx[x]) * img.at(x0[x], y1[y], c) + fx[x] * img.at(x1[x], y1[y], c);
                const double v = (1.0 - fy[y]) * top + fy[y] * bot;
                out.at(x, y, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

Image crop(const Image& img, const BBox& box) {
    const int x0 = std::max(0, static_cast<int>(std::floor(box.x)));
    const int y0 = std::max(0, static_cast<int>(std::floor(box.y)));
    const int x1 = std::min(img.width(), static_cast<int>(std::ceil(box.x + box.w)));
    const int y1 = std::min(img.height(), static_cast<int>(std::ceil(box.y + box.h)));
    if (!std::isfinite(box.x) || !std::isfinite(box.y) || x1 <= x0 || y1 <= y0) {
        throw Error(ErrorKind::EmptyIntersection, "crop box does not intersect the image");
    }
    Image out(x1 - x0, y1 - y0, img.channels());
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            for (int c = 0; c < img.channels(); ++c) out.at(x - x0, y - y0, c) = img.at(x, y, c);
        }
    }
    return out;
}

Image flip(const Image& img, FlipAxis axis) {
    Image out(img.width(), img.height(), img.channels());
    const int w = img.width();
    const int h = img.height();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int sx = axis == FlipAxis::Horizontal ? w - 1 - x : x;
            const int sy = axis == FlipAxis::Vertical ? h - 1 - y : y;
            for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.at(sx, sy, c);
        }
    }
    return out;
}

Image rotate(const Image& img, double degrees) {
    if (!(std::abs(degrees) <= 180.0)) {
        throw Error(ErrorKind::InvalidArgument, "rotation must lie in [-180, 180] degrees");
    }
    if (degrees == 0.0) return img;

    double cs = 0.0;
    double sn = 0.0;
    // Quarter turns use exact trig so grid points map onto grid points.
    const double quarter = degrees / 90.0;
    if (quarter == std::round(quarter)) {
        static constexpr double kCos[] = {1.0, 0.0, -1.0, 0.0};
        static constexpr double kSin[] = {0.0, 1.0, 0.0, -1.0};
        const int q = ((static_cast<int>(std::round(quarter)) % 4) + 4) % 4;
        cs = kCos[q];
        sn = kSin[q];
    } else {
        const double rad = degrees * std::numbers::pi / 180.0;
        cs = std::cos(rad);
        sn = std::sin(rad);
    }

    const int w = img.width();
    const int h = img.height();
    const double cx = (w - 1) / 2.0;
    const double cy = (h - 1) / 2.0;
    constexpr double kEdge = 1e-9;
    Image out(w, h, img.channels(), 0.0f);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double dx = x - cx;
            const double dy = y - cy;
            double sx = cs * dx - sn * dy + cx;
            double sy = sn * dx + cs * dy + cy;
            if (sx < -kEdge || sy < -kEdge || sx > w - 1 + kEdge || sy > h - 1 + kEdge) continue;
            sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
            const int ix = static_cast<int>(std::floor(sx));
            const int iy = static_cast<int>(std::floor(sy));
            const int ix1 = std::min(ix + 1, w - 1);
            const int iy1 = std::min(iy + 1, h - 1);
            const double fx = sx - ix;
            const double fy = sy - iy;
            for (int c = 0; c < img.channels(); ++c) {
                const double top = (1.0 - fx) * img.at(ix, iy, c) + fx * img.at(ix1, iy, c);
                const double bot = (1.0 - fx) * img.at(ix, iy1, c) + fx * img.at(ix1, iy1, c);
                out.at(x, y, c) = static_cast<float>(std::clamp((1.0 - fy) * top + fy * bot, 0.0, 1.0));
            }
        }
    }
    return out;
}

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        total += k[i + radius];
    }
    for (double& v : k) v /= total;
    return k;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (!(sigma >= 0.0)) throw Error(ErrorKind::NegativeSigma, "sigma " + std::to_string(sigma));
    if (sigma == 0.0) return img;

    const auto kernel = gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const int w = img.width();
    const int h = img.height();
    const int ch = img.channels();

    std::vector<double> tmp(img.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int sx = std::clamp(x + k, 0, w - 1);
                    acc += kernel[k + radius] * img.at(sx, y, c);
                }
                tmp[(static_cast<std::size_t>(y) * w + x) * ch + c] = acc;
            }
        }
    }
    Image out(w, h, ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int sy = std::clamp(y + k, 0, h - 1);
                    acc += kernel[k + radius] * tmp[(static_cast<std::size_t>(sy) * w + x) * ch + c];
                }
                out.at(x, y, c) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
        }
    }
    return out;
}

IntegralImage integral_image(const Image& gray) { return IntegralImage(gray); }

double rect_sum(const IntegralImage& ii, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w < 0 || h < 0 || x + w > ii.width() || y + h > ii.height()) {
        throw Error(ErrorKind::OutOfBounds, "rect (" + std::to_string(x) + "," + std::to_string(y) + "," +
                                                std::to_string(w) + "," + std::to_string(h) + ") outside " +
                                                std::to_string(ii.width()) + "x" + std::to_string(ii.height()));
    }
    return ii.rect_sum_unchecked(x, y, w, h);
}

}  // namespace fruitgrader::imaging
