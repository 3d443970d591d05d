#include "fruitgrader/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace fruitgrader::kernels {
namespace {

template <typename T>
void gemm_row_range(int i0, int i1, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
    int i = i0;
    for (; i + 4 <= i1; i += 4) {
        T* __restrict c0 = c + static_cast<std::size_t>(i) * ldc;
        T* __restrict c1 = c0 + ldc;
        T* __restrict c2 = c1 + ldc;
        T* __restrict c3 = c2 + ldc;
        const T* ar = a + static_cast<std::size_t>(i) * lda;
        for (int p = 0; p < k; ++p) {
            const T a0 = ar[p];
            const T a1 = ar[lda + p];
            const T a2 = ar[2 * lda + p];
            const T a3 = ar[3 * lda + p];
            const T* __restrict br = b + static_cast<std::size_t>(p) * ldb;
            for (int j = 0; j < n; ++j) {
                const T bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for (; i < i1; ++i) {
        T* __restrict c0 = c + static_cast<std::size_t>(i) * ldc;
        const T* ar = a + static_cast<std::size_t>(i) * lda;
        for (int p = 0; p < k; ++p) {
            const T a0 = ar[p];
            const T* __restrict br = b + static_cast<std::size_t>(p) * ldb;
            for (int j = 0; j < n; ++j) c0[j] += a0 * br[j];
        }
    }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
    const int oh = g.out_h();
    const int ow = g.out_w();
    for (int c = 0; c < g.in_channels; ++c) {
        const T* plane = in + static_cast<std::size_t>(c) * g.in_h * g.in_w;
        for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
                T* row = col + ((static_cast<std::size_t>(c) * g.kernel + ky) * g.kernel + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* dst = row + static_cast<std::size_t>(oy) * ow;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.in_w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* out) {
    const int oh = g.out_h();
    const int ow = g.out_w();
    std::fill(out, out + static_cast<std::size_t>(g.in_channels) * g.in_h * g.in_w, T(0));
    for (int c = 0; c < g.in_channels; ++c) {
        T* plane = out + static_cast<std::size_t>(c) * g.in_h * g.in_w;
        for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
                const T* row = col + ((static_cast<std::size_t>(c) * g.kernel + ky) * g.kernel + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
                    const T* src = row + static_cast<std::size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
void gemm_accumulate(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                     bool parallel_rows) {
    const int blocks = (m + 3) / 4;
#pragma omp parallel for schedule(static) if (parallel_rows && blocks > 1)
    for (int blk = 0; blk < blocks; ++blk) {
        const int i0 = blk * 4;
        gemm_row_range(i0, std::min(m, i0 + 4), n, k, a, lda, b, ldb, c, ldc);
    }
}

template <typename T>
void transpose(int rows, int cols, const T* src, T* dst) {
    constexpr int kTile = 32;
    for (int r0 = 0; r0 < rows; r0 += kTile) {
        for (int c0 = 0; c0 < cols; c0 += kTile) {
            const int r1 = std::min(rows, r0 + kTile);
            const int c1 = std::min(cols, c0 + kTile);
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c)
                    dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
        }
    }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out, T* cols) {
    const std::size_t patch = g.patch();
    const std::size_t positions = g.positions();
    const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.in_h * g.in_w;
    const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * positions;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < g.batch; ++n) {
        T* col = cols + n * patch * positions;
        im2col(g, in + n * in_stride, col);
        T* o = out + n * out_stride;
        for (int oc = 0; oc < g.out_channels; ++oc) {
            std::fill(o + oc * positions, o + (oc + 1) * positions, bias ? bias[oc] : T(0));
        }
        gemm_row_range(0, g.out_channels, static_cast<int>(positions), static_cast<int>(patch), weight,
                       static_cast<int>(patch), col, static_cast<int>(positions), o, static_cast<int>(positions));
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* dout, const T* weight, const T* cols, T* dweight, T* dbias,
                     T* din) {
    const std::size_t patch = g.patch();
    const std::size_t positions = g.positions();
    const std::size_t out_stride = static_cast<std::size_t>(g.out_channels) * positions;
    const int ip = static_cast<int>(patch);
    const int pp = static_cast<int>(positions);

    if (dbias) {
#pragma omp parallel for schedule(static)
        for (int oc = 0; oc < g.out_channels; ++oc) {
            double acc = 0.0;
            for (int n = 0; n < g.batch; ++n) {
                const T* d = dout + n * out_stride + oc * positions;
                for (std::size_t p = 0; p < positions; ++p) acc += d[p];
            }
            dbias[oc] = static_cast<T>(acc);
        }
    }

    // dW = sum_n dout_n * cols_n^T, accumulated over n in order.
    std::vector<T> cols_t(static_cast<std::size_t>(g.batch) * patch * positions);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < g.batch; ++n) {
        transpose(ip, pp, cols + n * patch * positions, cols_t.data() + n * patch * positions);
    }
    std::fill(dweight, dweight + static_cast<std::size_t>(g.out_channels) * patch, T(0));
    for (int n = 0; n < g.batch; ++n) {
        gemm_accumulate(g.out_channels, ip, pp, dout + n * out_stride, pp, cols_t.data() + n * patch * positions, ip,
                        dweight, ip, true);
    }

    if (!din) return;
    std::vector<T> weight_t(static_cast<std::size_t>(g.out_channels) * patch);
    transpose(g.out_channels, ip, weight, weight_t.data());
    const std::size_t in_stride = static_cast<std::size_t>(g.in_channels) * g.in_h * g.in_w;
#pragma omp parallel
    {
        std::vector<T> dcol(patch * positions);
#pragma omp for schedule(static)
        for (int n = 0; n < g.batch; ++n) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_row_range(0, ip, pp, g.out_channels, weight_t.data(), g.out_channels, dout + n * out_stride, pp,
                           dcol.data(), pp);
            col2im(g, dcol.data(), din + n * in_stride);
        }
    }
}

template <typename T>
void fc_forward(int batch, int in_features, int out_features, const T* in, const T* weight, const T* bias, T* out) {
    std::vector<T> weight_t(static_cast<std::size_t>(in_features) * out_features);
    transpose(out_features, in_features, weight, weight_t.data());
    for (int n = 0; n < batch; ++n) {
        for (int o = 0; o < out_features; ++o) {
            out[static_cast<std::size_t>(n) * out_features + o] = bias ? bias[o] : T(0);
        }
    }
    gemm_accumulate(batch, out_features, in_features, in, in_features, weight_t.data(), out_features, out,
                    out_features, true);
}

template <typename T>
void fc_backward(int batch, int in_features, int out_features, const T* in, const T* dout, const T* weight,
                 T* dweight, T* dbias, T* din) {
    if (dbias) {
        for (int o = 0; o < out_features; ++o) {
            double acc = 0.0;
            for (int n = 0; n < batch; ++n) acc += dout[static_cast<std::size_t>(n) * out_features + o];
            dbias[o] = static_cast<T>(acc);
        }
    }
    std::vector<T> dout_t(static_cast<std::size_t>(batch) * out_features);
    transpose(batch, out_features, dout, dout_t.data());
    std::fill(dweight, dweight + static_cast<std::size_t>(out_features) * in_features, T(0));
    gemm_accumulate(out_features, in_features, batch, dout_t.data(), batch, in, in_features, dweight, in_features,
                    true);
    if (din) {
        std::fill(din, din + static_cast<std::size_t>(batch) * in_features, T(0));
        gemm_accumulate(batch, in_features, out_features, dout, out_features, weight, in_features, din, in_features,
                        true);
    }
}

template <typename T>
void max_pool_forward(const PoolGeometry& g, const T* in, T* out, std::int32_t* argmax) {
    const int oh = g.out_h();
    const int ow = g.out_w();
    const int planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
    for (int plane = 0; plane < planes; ++plane) {
        const std::size_t in_base = static_cast<std::size_t>(plane) * g.in_h * g.in_w;
        const std::size_t out_base = static_cast<std::size_t>(plane) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::int32_t best_idx = -1;
                for (int ky = 0; ky < g.kernel; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    for (int kx = 0; kx < g.kernel; ++kx) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.in_w) continue;
                        const std::size_t idx = in_base + static_cast<std::size_t>(iy) * g.in_w + ix;
                        if (best_idx < 0 || in[idx] > best) {
                            best = in[idx];
                            best_idx = static_cast<std::int32_t>(idx);
                        }
                    }
                }
                out[out_base + static_cast<std::size_t>(oy) * ow + ox] = best;
                argmax[out_base + static_cast<std::size_t>(oy) * ow + ox] = best_idx;
            }
        }
    }
}

template <typename T>
void max_pool_backward(const PoolGeometry& g, const T* dout, const std::int32_t* argmax, T* din) {
    const std::size_t out_plane = static_cast<std::size_t>(g.out_h()) * g.out_w();
    const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
    const int planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
    for (int plane = 0; plane < planes; ++plane) {
        std::fill(din + plane * in_plane, din + (plane + 1) * in_plane, T(0));
        for (std::size_t i = plane * out_plane; i < (plane + 1) * out_plane; ++i) din[argmax[i]] += dout[i];
    }
}

template <typename T>
void batch_norm_forward_train(int batch, int channels, int spatial, const T* in, const T* gamma, const T* beta,
                              double eps, T* out, T* xhat, double* batch_mean, double* batch_var, double* inv_std) {
    const double count = static_cast<double>(batch) * spatial;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        double sum = 0.0;
        for (int n = 0; n < batch; ++n) {
            const T* x = in + (static_cast<std::size_t>(n) * channels + c) * spatial;
            for (int i = 0; i < spatial; ++i) sum += x[i];
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (int n = 0; n < batch; ++n) {
            const T* x = in + (static_cast<std::size_t>(n) * channels + c) * spatial;
            for (int i = 0; i < spatial; ++i) {
                const double d = x[i] - mean;
                sq += d * d;
            }
        }
        const double var = sq / count;
        const double is = 1.0 / std::sqrt(var + eps);
        batch_mean[c] = mean;
        batch_var[c] = var;
        inv_std[c] = is;
        const double gm = gamma[c];
        const double bt = beta[c];
        for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * spatial;
            for (int i = 0; i < spatial; ++i) {
                const double xh = (in[base + i] - mean) * is;
                xhat[base + i] = static_cast<T>(xh);
                out[base + i] = static_cast<T>(gm * xh + bt);
            }
        }
    }
}

template <typename T>
void batch_norm_forward_infer(int batch, int channels, int spatial, const T* in, const T* gamma, const T* beta,
                              const T* running_mean, const T* running_var, double eps, T* out) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const double is = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
        const double scale = gamma[c] * is;
        const double shift = beta[c] - running_mean[c] * scale;
        for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * spatial;
            for (int i = 0; i < spatial; ++i) out[base + i] = static_cast<T>(in[base + i] * scale + shift);
        }
    }
}

template <typename T>
void batch_norm_backward(int batch, int channels, int spatial, const T* dout, const T* xhat, const T* gamma,
                         const double* inv_std, T* dgamma, T* dbeta, T* din) {
    const double count = static_cast<double>(batch) * spatial;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * spatial;
            for (int i = 0; i < spatial; ++i) {
                sum_dy += dout[base + i];
                sum_dy_xhat += static_cast<double>(dout[base + i]) * xhat[base + i];
            }
        }
        dgamma[c] = static_cast<T>(sum_dy_xhat);
        dbeta[c] = static_cast<T>(sum_dy);
        const double k = gamma[c] * inv_std[c] / count;
        for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * spatial;
            for (int i = 0; i < spatial; ++i) {
                din[base + i] = static_cast<T>(k * (count * dout[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat));
            }
        }
    }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out) {
    const int oh = g.out_h();
    const int ow = g.out_w();
    for (int n = 0; n < g.batch; ++n)
        for (int oc = 0; oc < g.out_channels; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bias ? bias[oc] : 0.0;
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int ky = 0; ky < g.kernel; ++ky)
                            for (int kx = 0; kx < g.kernel; ++kx) {
                                const int iy = oy * g.stride - g.pad + ky;
                                const int ix = ox * g.stride - g.pad + kx;
                                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                                acc += static_cast<double>(
                                           weight[((static_cast<std::size_t>(oc) * g.in_channels + c) * g.kernel + ky) *
                                                      g.kernel +
                                                  kx]) *
                                       in[((static_cast<std::size_t>(n) * g.in_channels + c) * g.in_h + iy) * g.in_w + ix];
                            }
                    out[((static_cast<std::size_t>(n) * g.out_channels + oc) * oh + oy) * ow + ox] = static_cast<T>(acc);
                }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* in, const T* dout, const T* weight, T* dweight, T* dbias,
                     T* din) {
    const int oh = g.out_h();
    const int ow = g.out_w();
    std::vector<double> dw(static_cast<std::size_t>(g.out_channels) * g.patch(), 0.0);
    std::vector<double> db(g.out_channels, 0.0);
    std::vector<double> dx(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_h * g.in_w, 0.0);
    for (int n = 0; n < g.batch; ++n)
        for (int oc = 0; oc < g.out_channels; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const double d = dout[((static_cast<std::size_t>(n) * g.out_channels + oc) * oh + oy) * ow + ox];
                    db[oc] += d;
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int ky = 0; ky < g.kernel; ++ky)
                            for (int kx = 0; kx < g.kernel; ++kx) {
                                const int iy = oy * g.stride - g.pad + ky;
                                const int ix = ox * g.stride - g.pad + kx;
                                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(oc) * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
                                const std::size_t xi =
                                    ((static_cast<std::size_t>(n) * g.in_channels + c) * g.in_h + iy) * g.in_w + ix;
                                dw[wi] += d * in[xi];
                                dx[xi] += d * weight[wi];
                            }
                }
    for (std::size_t i = 0; i < dw.size(); ++i) dweight[i] = static_cast<T>(dw[i]);
    if (dbias)
        for (int oc = 0; oc < g.out_channels; ++oc) dbias[oc] = static_cast<T>(db[oc]);
    if (din)
        for (std::size_t i = 0; i < dx.size(); ++i) din[i] = static_cast<T>(dx[i]);
}

template <typename T>
void fc_forward(int batch, int in_features, int out_features, const T* in, const T* weight, const T* bias, T* out) {
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < out_features; ++o) {
            double acc = bias ? bias[o] : 0.0;
            for (int i = 0; i < in_features; ++i)
                acc += static_cast<double>(weight[static_cast<std::size_t>(o) * in_features + i]) *
                       in[static_cast<std::size_t>(n) * in_features + i];
            out[static_cast<std::size_t>(n) * out_features + o] = static_cast<T>(acc);
        }
}

}  // namespace reference

#define FRUITGRADER_INSTANTIATE_KERNELS(T)                                                                        \
    template void gemm_accumulate<T>(int, int, int, const T*, int, const T*, int, T*, int, bool);                 \
    template void transpose<T>(int, int, const T*, T*);                                                           \
    template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*);                   \
    template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, T*);              \
    template void fc_forward<T>(int, int, int, const T*, const T*, const T*, T*);                                 \
    template void fc_backward<T>(int, int, int, const T*, const T*, const T*, T*, T*, T*);                        \
    template void max_pool_forward<T>(const PoolGeometry&, const T*, T*, std::int32_t*);                          \
    template void max_pool_backward<T>(const PoolGeometry&, const T*, const std::int32_t*, T*);                   \
    template void batch_norm_forward_train<T>(int, int, int, const T*, const T*, const T*, double, T*, T*,        \
                                              double*, double*, double*);                                         \
    template void batch_norm_forward_infer<T>(int, int, int, const T*, const T*, const T*, const T*, const T*,    \
                                              double, T*);                                                        \
    template void batch_norm_backward<T>(int, int, int, const T*, const T*, const T*, const double*, T*, T*, T*); \
    template void reference::conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);            \
    template void reference::conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*, T*);   \
    template void reference::fc_forward<T>(int, int, int, const T*, const T*, const T*, T*);

FRUITGRADER_INSTANTIATE_KERNELS(float)
FRUITGRADER_INSTANTIATE_KERNELS(double)

#undef FRUITGRADER_INSTANTIATE_KERNELS

}  // namespace fruitgrader::kernels
