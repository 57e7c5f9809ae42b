// Independent reference computations used only by tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "keyrestore/tensor.hpp"

namespace oracle {

using keyrestore::Tensor;

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
}

/// Softmax attention computed token by token with explicit loops.
/// q: (Lq, c), k/v: (Lk, c); weights laid out as (c_in, c_out); mask (Lq, Lk) optional.
inline std::vector<double> dense_attention(const std::vector<double>& xq, const std::vector<double>& xkv,
                                           std::size_t lq, std::size_t lk, std::size_t c, std::size_t heads,
                                           const std::vector<double>* wq, const std::vector<double>* bq,
                                           const std::vector<double>* wk, const std::vector<double>* bk,
                                           const std::vector<double>* wv, const std::vector<double>* bv,
                                           const std::vector<double>* wo, const std::vector<double>* bo,
                                           const std::vector<double>* mask) {
  auto project = [&](const std::vector<double>& x, std::size_t n, const std::vector<double>& w,
                     const std::vector<double>& b) {
    std::vector<double> y(n * c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < c; ++o) {
        double s = b[o];
        for (std::size_t k = 0; k < c; ++k) s += x[i * c + k] * w[k * c + o];
        y[i * c + o] = s;
      }
    return y;
  };
  const auto q = project(xq, lq, *wq, *bq), k = project(xkv, lk, *wk, *bk), v = project(xkv, lk, *wv, *bv);
  const std::size_t d = c / heads;
  std::vector<double> ctx(lq * c, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> s(lk);
      double mx = -1e300;
      for (std::size_t j = 0; j < lk; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < d; ++e) dot += q[i * c + h * d + e] * k[j * c + h * d + e];
        s[j] = dot / std::sqrt(static_cast<double>(d)) + (mask ? (*mask)[i * lk + j] : 0.0);
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < lk; ++j)
        for (std::size_t e = 0; e < d; ++e) ctx[i * c + h * d + e] += s[j] / z * v[j * c + h * d + e];
    }
  return project(ctx, lq, *wo, *bo);
}

/// Central finite difference of f with respect to x[i].
template <typename T>
double central_difference(const std::function<double()>& f, T& x, double h) {
  const T orig = x;
  x = static_cast<T>(orig + h);
  const double up = f();
  x = static_cast<T>(orig - h);
  const double down = f();
  x = orig;
  return (up - down) / (2.0 * h);
}

// Central difference with the step picked from the estimates themselves:
// large steps straddle activation kinks, small ones drown in roundoff, so
// scan a ladder of steps and keep the adjacent pair that agrees best.
template <typename T>
double adaptive_central_difference(const std::function<double()>& f, T& x,
                                   double h_max = 1e-4, double h_min = 1e-7) {
  std::vector<double> d;
  for (double h = h_max; h >= h_min * 0.99; h /= std::sqrt(10.0)) d.push_back(central_difference(f, x, h));
  std::size_t best = 0;
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k + 1 < d.size(); ++k) {
    const double g = std::abs(d[k] - d[k + 1]) / std::max({std::abs(d[k]), std::abs(d[k + 1]), 1e-300});
    if (g < gap) gap = g, best = k;
  }
  return 0.5 * (d[best] + d[best + 1]);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Frame-level AUC as the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (y[i])
      for (std::size_t j = 0; j < s.size(); ++j)
        if (!y[j]) {
          pairs += 1.0;
          good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
  return good / pairs;
}

/// Per-frame mean squared error with plain loops.
inline std::vector<double> frame_mse(const Tensor<float>& a, const Tensor<float>& b) {
  const std::size_t t = a.dim(0), k = a.size() / t;
  std::vector<double> out(t);
  for (std::size_t f = 0; f < t; ++f) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double d = double(a[f * k + i]) - double(b[f * k + i]);
      s += d * d;
    }
    out[f] = s / double(k);
  }
  return out;
}

/// Scatter-form 3-D transposed convolution, stride 1, padding 1 on every
/// axis, with weights W[kt][ky][kx][ci][co] of a temporal kernel kt_n and a
/// 3x3 spatial kernel. x: (3, h, w, c) -> (kt_n, h, w, c).
inline std::vector<double> transposed_conv3d(const std::vector<double>& x, std::size_t h, std::size_t w,
                                             std::size_t c, std::size_t kt_n, const std::vector<double>& wt,
                                             const std::vector<double>& bias) {
  // Full (unpadded) output has 3 + kt_n - 1 frames and (h + 2) x (w + 2)
  // pixels; padding 1 crops one from each side of every axis.
  const std::size_t ft = 3 + kt_n - 1, fh = h + 2, fw = w + 2;
  std::vector<double> full(ft * fh * fw * c, 0.0);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t kt = 0; kt < kt_n; ++kt)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx)
              for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t co = 0; co < c; ++co)
                  full[(((t + kt) * fh + y + ky) * fw + xx + kx) * c + co] +=
                      x[((t * h + y) * w + xx) * c + ci] * wt[((((kt * 3) + ky) * 3 + kx) * c + ci) * c + co];
  std::vector<double> out(kt_n * h * w * c);
  for (std::size_t t = 0; t < kt_n; ++t)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t co = 0; co < c; ++co)
          out[((t * h + y) * w + xx) * c + co] = full[(((t + 1) * fh + y + 1) * fw + xx + 1) * c + co] + bias[co];
  return out;
}

}  // namespace oracle
