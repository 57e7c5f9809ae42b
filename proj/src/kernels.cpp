#include "keyrestore/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace keyrestore::kernels {

namespace {

CBLAS_TRANSPOSE op(bool t) { return t ? CblasTrans : CblasNoTrans; }

}  // namespace

template <>
void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 float alpha, const float* a, std::size_t lda, const float* b, std::size_t ldb,
                 float beta, float* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_sgemm(CblasRowMajor, op(trans_a), op(trans_b), static_cast<blasint>(m),
              static_cast<blasint>(n), static_cast<blasint>(k), alpha, a,
              static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c,
              static_cast<blasint>(ldc));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  double alpha, const double* a, std::size_t lda, const double* b,
                  std::size_t ldb, double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, op(trans_a), op(trans_b), static_cast<blasint>(m),
              static_cast<blasint>(n), static_cast<blasint>(k), alpha, a,
              static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c,
              static_cast<blasint>(ldc));
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(g.out_height());
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(g.out_width());
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.height);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(g.width);
  const std::ptrdiff_t k = static_cast<std::ptrdiff_t>(g.kernel);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t cin = g.in_channels;
  const std::size_t patch = g.patch();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t oy = 0; oy < oh; ++oy) {
    for (std::ptrdiff_t ox = 0; ox < ow; ++ox) {
      T* row = cols + static_cast<std::size_t>(oy * ow + ox) * patch;
      for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t iy = oy * s - p + ky;
        for (std::ptrdiff_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t ix = ox * s - p + kx;
          T* dst = row + static_cast<std::size_t>(ky * k + kx) * cin;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(dst, dst + cin, T{0});
          } else {
            const T* src = image + static_cast<std::size_t>(iy * w + ix) * cin;
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* image) {
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(g.out_height());
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(g.out_width());
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.height);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(g.width);
  const std::ptrdiff_t k = static_cast<std::ptrdiff_t>(g.kernel);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t cin = g.in_channels;
  const std::size_t patch = g.patch();
  // Gather form: each input pixel sums the taps that read it, so rows are race-free.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t iy = 0; iy < h; ++iy) {
    for (std::ptrdiff_t ix = 0; ix < w; ++ix) {
      T* dst = image + static_cast<std::size_t>(iy * w + ix) * cin;
      for (std::ptrdiff_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t ny = iy + p - ky;
        if (ny < 0 || ny % s != 0) continue;
        const std::ptrdiff_t oy = ny / s;
        if (oy >= oh) continue;
        for (std::ptrdiff_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t nx = ix + p - kx;
          if (nx < 0 || nx % s != 0) continue;
          const std::ptrdiff_t ox = nx / s;
          if (ox >= ow) continue;
          const T* src = cols + static_cast<std::size_t>(oy * ow + ox) * patch +
                         static_cast<std::size_t>(ky * k + kx) * cin;
          for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward(const T* input, std::size_t n, const ConvGeometry& g, const T* weight,
                    const T* bias, T* output) {
  const std::size_t pixels_out = g.out_height() * g.out_width();
  const std::size_t in_stride = g.height * g.width * g.in_channels;
  const std::size_t out_stride = pixels_out * g.out_channels;
  std::vector<T> cols(pixels_out * g.patch());
  for (std::size_t i = 0; i < n; ++i) {
    im2col(input + i * in_stride, g, cols.data());
    T* y = output + i * out_stride;
    if (bias) {
      for (std::size_t p = 0; p < pixels_out; ++p)
        std::copy(bias, bias + g.out_channels, y + p * g.out_channels);
    }
    gemm<T>(false, false, pixels_out, g.out_channels, g.patch(), T{1}, cols.data(), g.patch(),
            weight, g.out_channels, bias ? T{1} : T{0}, y, g.out_channels);
  }
}

template <typename T>
void conv2d_backward(const T* input, std::size_t n, const ConvGeometry& g, const T* weight,
                     const T* doutput, T* dweight, T* dbias, T* dinput) {
  const std::size_t pixels_out = g.out_height() * g.out_width();
  const std::size_t in_stride = g.height * g.width * g.in_channels;
  const std::size_t out_stride = pixels_out * g.out_channels;
  std::vector<T> cols(pixels_out * g.patch());
  std::vector<T> dcols(dinput ? pixels_out * g.patch() : 0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* dy = doutput + i * out_stride;
    im2col(input + i * in_stride, g, cols.data());
    gemm<T>(true, false, g.patch(), g.out_channels, pixels_out, T{1}, cols.data(), g.patch(), dy,
            g.out_channels, T{1}, dweight, g.out_channels);
    if (dbias) {
      for (std::size_t p = 0; p < pixels_out; ++p)
        for (std::size_t c = 0; c < g.out_channels; ++c) dbias[c] += dy[p * g.out_channels + c];
    }
    if (dinput) {
      gemm<T>(false, true, pixels_out, g.patch(), g.out_channels, T{1}, dy, g.out_channels, weight,
              g.out_channels, T{0}, dcols.data(), g.patch());
      col2im(dcols.data(), g, dinput + i * in_stride);
    }
  }
}

template <typename T>
void layer_norm_forward(const T* x, std::size_t rows, std::size_t cols, const T* gamma,
                        const T* beta, T eps, T* y, T* mean, T* rstd) {
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mu{0};
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<T>(cols);
    T var{0};
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(cols);
    const T rs = T{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

template <typename T>
void layer_norm_backward(const T* x, const T* dy, std::size_t rows, std::size_t cols,
                         const T* gamma, const T* mean, const T* rstd, T* dx, T* dgamma,
                         T* dbeta) {
  // Parameter gradients are reduced serially so summation order is fixed.
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      dgamma[c] += dyr[c] * (xr[c] - mean[r]) * rstd[r];
      dbeta[c] += dyr[c];
    }
  }
  const T inv_n = T{1} / static_cast<T>(cols);
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx + r * cols;
    T sum_g{0};
    T sum_gx{0};
    for (std::size_t c = 0; c < cols; ++c) {
      const T g = dyr[c] * gamma[c];
      const T xhat = (xr[c] - mean[r]) * rstd[r];
      sum_g += g;
      sum_gx += g * xhat;
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const T g = dyr[c] * gamma[c];
      const T xhat = (xr[c] - mean[r]) * rstd[r];
      dxr[c] += rstd[r] * (g - inv_n * sum_g - xhat * inv_n * sum_gx);
    }
  }
}

template <typename T>
void gelu_forward(const T* x, std::size_t n, T* y) {
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = T{0.5} * x[i] * (T{1} + std::erf(x[i] * inv_sqrt2));
}

template <typename T>
void gelu_backward(const T* x, const T* dy, std::size_t n, T* dx) {
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  const T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const T cdf = T{0.5} * (T{1} + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * x[i] * x[i]);
    dx[i] += dy[i] * (cdf + x[i] * pdf);
  }
}

template <typename T>
void leaky_relu_forward(const T* x, std::size_t n, T slope, T* y) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] >= T{0} ? x[i] : slope * x[i];
}

template <typename T>
void leaky_relu_backward(const T* x, const T* dy, std::size_t n, T slope, T* dx) {
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) dx[i] += x[i] >= T{0} ? dy[i] : slope * dy[i];
}

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    T* xr = x + r * cols;
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) m = std::max(m, xr[c]);
    T sum{0};
    for (std::size_t c = 0; c < cols; ++c) {
      xr[c] = std::exp(xr[c] - m);
      sum += xr[c];
    }
    const T inv = T{1} / sum;
    for (std::size_t c = 0; c < cols; ++c) xr[c] *= inv;
  }
}

template <typename T>
void maxpool2_forward(const T* x, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                      T* y, std::size_t* argmax) {
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
#pragma omp parallel for schedule(static)
  for (std::size_t img = 0; img < n; ++img) {
    const std::size_t in_base = img * h * w * c;
    const std::size_t out_base = img * oh * ow * c;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = in_base + ((2 * oy) * w + 2 * ox) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = in_base + ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (x[idx] > x[best]) best = idx;
            }
          const std::size_t o = out_base + (oy * ow + ox) * c + ch;
          y[o] = x[best];
          argmax[o] = best;
        }
  }
}

template <typename T>
void maxpool2_backward(const T* dy, const std::size_t* argmax, std::size_t out_size, T* dx) {
  // Each input element is the argmax of at most one output window.
#pragma omp parallel for schedule(static)
  for (std::size_t o = 0; o < out_size; ++o) dx[argmax[o]] += dy[o];
}

template <typename T>
void pixel_shuffle_forward(const T* x, std::size_t n, std::size_t h, std::size_t w,
                           std::size_t c_out, std::size_t r, T* y) {
  const std::size_t c_in = c_out * r * r;
  const std::size_t ow = w * r;
#pragma omp parallel for schedule(static)
  for (std::size_t img_row = 0; img_row < n * h; ++img_row) {
    const std::size_t img = img_row / h;
    const std::size_t iy = img_row % h;
    for (std::size_t ix = 0; ix < w; ++ix) {
      const T* src = x + ((img * h + iy) * w + ix) * c_in;
      for (std::size_t c = 0; c < c_out; ++c)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < r; ++j) {
            const std::size_t oy = iy * r + i;
            const std::size_t ox = ix * r + j;
            y[((img * h * r + oy) * ow + ox) * c_out + c] = src[c * r * r + i * r + j];
          }
    }
  }
}

template <typename T>
void pixel_shuffle_backward(const T* dy, std::size_t n, std::size_t h, std::size_t w,
                            std::size_t c_out, std::size_t r, T* dx) {
  const std::size_t c_in = c_out * r * r;
  const std::size_t ow = w * r;
#pragma omp parallel for schedule(static)
  for (std::size_t img_row = 0; img_row < n * h; ++img_row) {
    const std::size_t img = img_row / h;
    const std::size_t iy = img_row % h;
    for (std::size_t ix = 0; ix < w; ++ix) {
      T* dst = dx + ((img * h + iy) * w + ix) * c_in;
      for (std::size_t c = 0; c < c_out; ++c)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < r; ++j) {
            const std::size_t oy = iy * r + i;
            const std::size_t ox = ix * r + j;
            dst[c * r * r + i * r + j] += dy[((img * h * r + oy) * ow + ox) * c_out + c];
          }
    }
  }
}

#define KEYRESTORE_INSTANTIATE(T)                                                                \
  template void im2col<T>(const T*, const ConvGeometry&, T*);                                  \
  template void col2im<T>(const T*, const ConvGeometry&, T*);                                  \
  template void conv2d_forward<T>(const T*, std::size_t, const ConvGeometry&, const T*,        \
                                  const T*, T*);                                               \
  template void conv2d_backward<T>(const T*, std::size_t, const ConvGeometry&, const T*,       \
                                   const T*, T*, T*, T*);                                      \
  template void layer_norm_forward<T>(const T*, std::size_t, std::size_t, const T*, const T*,  \
                                      T, T*, T*, T*);                                          \
  template void layer_norm_backward<T>(const T*, const T*, std::size_t, std::size_t, const T*, \
                                       const T*, const T*, T*, T*, T*);                        \
  template void gelu_forward<T>(const T*, std::size_t, T*);                                    \
  template void gelu_backward<T>(const T*, const T*, std::size_t, T*);                         \
  template void leaky_relu_forward<T>(const T*, std::size_t, T, T*);                           \
  template void leaky_relu_backward<T>(const T*, const T*, std::size_t, T, T*);                \
  template void softmax_rows<T>(T*, std::size_t, std::size_t);                                 \
  template void maxpool2_forward<T>(const T*, std::size_t, std::size_t, std::size_t,           \
                                    std::size_t, T*, std::size_t*);                            \
  template void maxpool2_backward<T>(const T*, const std::size_t*, std::size_t, T*);           \
  template void pixel_shuffle_forward<T>(const T*, std::size_t, std::size_t, std::size_t,      \
                                         std::size_t, std::size_t, T*);                        \
  template void pixel_shuffle_backward<T>(const T*, std::size_t, std::size_t, std::size_t,     \
                                          std::size_t, std::size_t, T*);

KEYRESTORE_INSTANTIATE(float)
KEYRESTORE_INSTANTIATE(double)
#undef KEYRESTORE_INSTANTIATE

}  // namespace keyrestore::kernels
