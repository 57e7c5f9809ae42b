#pragma once

// OpenMP-parallel numeric kernels. Feature maps are NHWC; convolution
// weights are stored as (k, k, c_in, c_out), i.e. a (k*k*c_in) x c_out
// matrix that multiplies im2col rows directly.
//
// Backward kernels accumulate into their gradient outputs.
//
// Serial counterparts used as test oracles and benchmark baselines live in
// reference.hpp.

#include <cstddef>

namespace keyrestore::kernels {

/// Row-major C = alpha * op(A) * op(B) + beta * C, backed by BLAS.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

struct ConvGeometry {
  std::size_t height = 0;  // input
  std::size_t width = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return kernel * kernel * in_channels; }
};

/// One image (h, w, c_in) -> cols (out_h*out_w, k*k*c_in); zero padding.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols);

/// Adjoint of im2col; accumulates into image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* image);

/// images: n images of (h, w, c_in); out: n images of (out_h, out_w, c_out).
template <typename T>
void conv2d_forward(const T* input, std::size_t n, const ConvGeometry& g, const T* weight,
                    const T* bias, T* output);

/// Accumulates dweight/dbias; writes dinput when non-null.
template <typename T>
void conv2d_backward(const T* input, std::size_t n, const ConvGeometry& g, const T* weight,
                     const T* doutput, T* dweight, T* dbias, T* dinput);

/// Per-row layer normalization over `cols` features. mean/rstd are per-row outputs.
template <typename T>
void layer_norm_forward(const T* x, std::size_t rows, std::size_t cols, const T* gamma,
                        const T* beta, T eps, T* y, T* mean, T* rstd);

template <typename T>
void layer_norm_backward(const T* x, const T* dy, std::size_t rows, std::size_t cols,
                         const T* gamma, const T* mean, const T* rstd, T* dx, T* dgamma,
                         T* dbeta);

/// Exact (erf) GELU.
template <typename T>
void gelu_forward(const T* x, std::size_t n, T* y);
template <typename T>
void gelu_backward(const T* x, const T* dy, std::size_t n, T* dx);

template <typename T>
void leaky_relu_forward(const T* x, std::size_t n, T slope, T* y);
template <typename T>
void leaky_relu_backward(const T* x, const T* dy, std::size_t n, T slope, T* dx);

/// In-place numerically-stable softmax over each row.
template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols);

/// 2x2 stride-2 max pooling over n images of (h, w, c); argmax holds the
/// flat input offset chosen for each output element.
template <typename T>
void maxpool2_forward(const T* x, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                      T* y, std::size_t* argmax);
template <typename T>
void maxpool2_backward(const T* dy, const std::size_t* argmax, std::size_t out_size, T* dx);

/// Depth-to-space: (h, w, c*r*r) -> (h*r, w*r, c); input channel c*r*r + i*r + j
/// lands at output offset (i, j) inside each r x r block.
template <typename T>
void pixel_shuffle_forward(const T* x, std::size_t n, std::size_t h, std::size_t w,
                           std::size_t c_out, std::size_t r, T* y);
template <typename T>
void pixel_shuffle_backward(const T* dy, std::size_t n, std::size_t h, std::size_t w,
                            std::size_t c_out, std::size_t r, T* dx);

}  // namespace keyrestore::kernels
