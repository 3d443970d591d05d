#pragma once

// Dense numeric kernels behind the nn layers.
//
// The functions in fruitgrader::kernels are the production paths: im2col plus
// a row-blocked GEMM, parallelized with OpenMP over independent outputs. Every
// output element is reduced in a fixed order by a single thread, so results
// are bitwise identical for any thread count.
//
// fruitgrader::kernels::reference holds direct-loop serial versions. They are
// slow and exist to check the production paths in tests and benchmarks.

#include <cstddef>
#include <cstdint>

namespace fruitgrader::kernels {

struct ConvGeometry {
    int batch = 1;
    int in_channels = 1;
    int in_h = 1;
    int in_w = 1;
    int out_channels = 1;
    int kernel = 1;
    int stride = 1;
    int pad = 0;

    int out_h() const noexcept { return (in_h + 2 * pad - kernel) / stride + 1; }
    int out_w() const noexcept { return (in_w + 2 * pad - kernel) / stride + 1; }
    std::size_t patch() const noexcept { return static_cast<std::size_t>(in_channels) * kernel * kernel; }
    std::size_t positions() const noexcept { return static_cast<std::size_t>(out_h()) * out_w(); }
    std::size_t col_size() const noexcept { return static_cast<std::size_t>(batch) * patch() * positions(); }
};

struct PoolGeometry {
    int batch = 1;
    int channels = 1;
    int in_h = 1;
    int in_w = 1;
    int kernel = 2;
    int stride = 2;
    int pad = 0;

    int out_h() const noexcept { return (in_h + 2 * pad - kernel) / stride + 1; }
    int out_w() const noexcept { return (in_w + 2 * pad - kernel) / stride + 1; }
};

/// C[M x N] += A[M x K] * B[K x N], row-major with leading dimensions.
/// Each C element accumulates over k in ascending order.
template <typename T>
void gemm_accumulate(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                     bool parallel_rows);

/// dst[cols x rows] = src[rows x cols]^T
template <typename T>
void transpose(int rows, int cols, const T* src, T* dst);

/// out: [batch, out_channels, out_h, out_w]. cols receives the unfolded input
/// (col_size() elements) for reuse by conv2d_backward. bias may be null.
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out, T* cols);

/// Overwrites dweight (and dbias when non-null). din may be null when the
/// input gradient is not needed.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* dout, const T* weight, const T* cols, T* dweight, T* dbias,
                     T* din);

/// out[batch x out_features] = in[batch x in_features] * weight^T + bias
template <typename T>
void fc_forward(int batch, int in_features, int out_features, const T* in, const T* weight, const T* bias, T* out);

template <typename T>
void fc_backward(int batch, int in_features, int out_features, const T* in, const T* dout, const T* weight,
                 T* dweight, T* dbias, T* din);

/// argmax receives the flat input index that won each output cell.
template <typename T>
void max_pool_forward(const PoolGeometry& g, const T* in, T* out, std::int32_t* argmax);

template <typename T>
void max_pool_backward(const PoolGeometry& g, const T* dout, const std::int32_t* argmax, T* din);

/// Training-mode batch norm over [batch, channels, spatial]. Writes the
/// normalized activations (xhat) and per-channel 1/sqrt(var+eps); mean and
/// biased variance per channel are returned through batch_mean/batch_var.
template <typename T>
void batch_norm_forward_train(int batch, int channels, int spatial, const T* in, const T* gamma, const T* beta,
                              double eps, T* out, T* xhat, double* batch_mean, double* batch_var, double* inv_std);

template <typename T>
void batch_norm_forward_infer(int batch, int channels, int spatial, const T* in, const T* gamma, const T* beta,
                              const T* running_mean, const T* running_var, double eps, T* out);

template <typename T>
void batch_norm_backward(int batch, int channels, int spatial, const T* dout, const T* xhat, const T* gamma,
                         const double* inv_std, T* dgamma, T* dbeta, T* din);

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* in, const T* weight, const T* bias, T* out);

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* in, const T* dout, const T* weight, T* dweight, T* dbias,
                     T* din);

template <typename T>
void fc_forward(int batch, int in_features, int out_features, const T* in, const T* weight, const T* bias, T* out);

}  // namespace reference

}  // namespace fruitgrader::kernels
