#pragma once

// Serial reference implementations. Straight loops with no BLAS and no
// OpenMP; the parallel kernels are checked against these and the benchmark
// target times both.

#include <cmath>
#include <cstddef>
#include <limits>

#include "keyrestore/kernels.hpp"

namespace keyrestore::reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + (beta == T{0} ? T{0} : beta * c[i * ldc + j]);
    }
}

/// Direct convolution, same layout contract as kernels::conv2d_forward.
template <typename T>
void conv2d(const T* input, std::size_t n, const kernels::ConvGeometry& g, const T* weight,
            const T* bias, T* output) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  for (std::size_t img = 0; img < n; ++img) {
    const T* x = input + img * g.height * g.width * g.in_channels;
    T* y = output + img * oh * ow * g.out_channels;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t co = 0; co < g.out_channels; ++co) {
          T acc = bias ? bias[co] : T{0};
          for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                  ix >= static_cast<std::ptrdiff_t>(g.width))
                continue;
              for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
                const T xv = x[(static_cast<std::size_t>(iy) * g.width +
                                static_cast<std::size_t>(ix)) * g.in_channels + ci];
                const T wv = weight[((ky * g.kernel + kx) * g.in_channels + ci) * g.out_channels + co];
                acc += xv * wv;
              }
            }
          y[(oy * ow + ox) * g.out_channels + co] = acc;
        }
  }
}

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* xr = x + r * cols;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) m = xr[c] > m ? xr[c] : m;
    T sum{0};
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(xr[c] - m);
    for (std::size_t c = 0; c < cols; ++c) xr[c] = std::exp(xr[c] - m) / sum;
  }
}

template <typename T>
void layer_norm(const T* x, std::size_t rows, std::size_t cols, const T* gamma, const T* beta,
                T eps, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mu{0};
    for (std::size_t c = 0; c < cols; ++c) mu += x[r * cols + c];
    mu /= static_cast<T>(cols);
    T var{0};
    for (std::size_t c = 0; c < cols; ++c) var += (x[r * cols + c] - mu) * (x[r * cols + c] - mu);
    var /= static_cast<T>(cols);
    for (std::size_t c = 0; c < cols; ++c)
      y[r * cols + c] = (x[r * cols + c] - mu) / std::sqrt(var + eps) * gamma[c] + beta[c];
  }
}

}  // namespace keyrestore::reference
