#include "keyrestore/layers.hpp"

#include <cmath>

namespace keyrestore {

template <typename T>
Param<T>& ParameterStore<T>::add(const std::string& name, Shape shape, bool trainable) {
  if (params_.count(name)) throw ConfigError("duplicate parameter path: " + name);
  Param<T> p;
  p.value = Tensor<T>(shape);
  p.grad = Tensor<T>(shape);
  p.trainable = trainable;
  return params_.emplace(name, std::move(p)).first->second;
}

template <typename T>
Param<T>& ParameterStore<T>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter path: " + name);
  return it->second;
}

template <typename T>
const Param<T>& ParameterStore<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter path: " + name);
  return it->second;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(T{0});
}

template <typename T>
std::size_t ParameterStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

template <typename T>
void Initializer::truncated_normal(Tensor<T>& t, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.values()) {
    double z = dist(engine_);
    while (std::abs(z) > 2.0) z = dist(engine_);
    v = static_cast<T>(z * stddev);
  }
}

template <typename T>
void Initializer::uniform(Tensor<T>& t, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(engine_));
}

namespace {

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual framework default for convolutions.
double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape());
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(ParameterStore<T>& store, Initializer& init, const std::string& name,
                  std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  std::size_t stride, std::size_t pad)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad) {
  weight = &store.add(name + ".weight", {kernel, kernel, in_channels, out_channels});
  bias = &store.add(name + ".bias", {out_channels});
  init.uniform(weight->value, fan_in_bound(kernel * kernel * in_channels));
}

template <typename T>
kernels::ConvGeometry Conv2d<T>::geometry_for(const Shape& s) const {
  if (s.size() < 3 || s.back() != in_) {
    throw ShapeError("conv expects (..., h, w, " + std::to_string(in_) + "), got " +
                     shape_string(s));
  }
  kernels::ConvGeometry g;
  g.height = s[s.size() - 3];
  g.width = s[s.size() - 2];
  g.in_channels = in_;
  g.out_channels = out_;
  g.kernel = kernel_;
  g.stride = stride_;
  g.pad = pad_;
  return g;
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode mode) {
  const auto g = geometry_for(x.shape());
  const std::size_t n = x.size() / (g.height * g.width * g.in_channels);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 3] = g.out_height();
  out_shape[out_shape.size() - 2] = g.out_width();
  out_shape.back() = out_;
  Tensor<T> y(out_shape);
  kernels::conv2d_forward(x.data(), n, g, weight->value.data(), bias->value.data(), y.data());
  if (mode == Mode::kTrain) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy) {
  const auto g = geometry_for(input_.shape());
  const std::size_t n = input_.size() / (g.height * g.width * g.in_channels);
  Tensor<T> dx = zeros_like(input_);
  kernels::conv2d_backward(input_.data(), n, g, weight->value.data(), dy.data(),
                           weight->grad.data(), bias->grad.data(), dx.data());
  return dx;
}

// ---------------------------------------------------------------- BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(ParameterStore<T>& store, const std::string& name, std::size_t channels)
    : channels_(channels) {
  gamma = &store.add(name + ".gamma", {channels});
  beta = &store.add(name + ".beta", {channels});
  running_mean = &store.add(name + ".running_mean", {channels}, false);
  running_var = &store.add(name + ".running_var", {channels}, false);
  gamma->value.fill(T{1});
  running_var->value.fill(T{1});
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.shape().back() != channels_) throw ShapeError("batch norm channel mismatch");
  const std::size_t c = channels_;
  const std::size_t rows = x.size() / c;
  Tensor<T> y(x.shape());
  const T eps = static_cast<T>(kEps);
  if (mode == Mode::kInfer) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const T rs = T{1} / std::sqrt(running_var->value[k] + eps);
        y[r * c + k] =
            (x[r * c + k] - running_mean->value[k]) * rs * gamma->value[k] + beta->value[k];
      }
    return y;
  }
  std::vector<T> mean(c, T{0}), var(c, T{0});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) mean[k] += x[r * c + k];
  for (auto& m : mean) m /= static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) {
      const T d = x[r * c + k] - mean[k];
      var[k] += d * d;
    }
  for (auto& v : var) v /= static_cast<T>(rows);
  rstd_.assign(c, T{0});
  for (std::size_t k = 0; k < c; ++k) rstd_[k] = T{1} / std::sqrt(var[k] + eps);
  xhat_ = Tensor<T>(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) {
      const T xh = (x[r * c + k] - mean[k]) * rstd_[k];
      xhat_[r * c + k] = xh;
      y[r * c + k] = xh * gamma->value[k] + beta->value[k];
    }
  const T mom = static_cast<T>(kMomentum);
  const T unbias = rows > 1 ? static_cast<T>(rows) / static_cast<T>(rows - 1) : T{1};
  for (std::size_t k = 0; k < c; ++k) {
    running_mean->value[k] = (T{1} - mom) * running_mean->value[k] + mom * mean[k];
    running_var->value[k] = (T{1} - mom) * running_var->value[k] + mom * var[k] * unbias;
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& dy) {
  const std::size_t c = channels_;
  const std::size_t rows = dy.size() / c;
  std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) {
      const T g = dy[r * c + k];
      sum_g[k] += g;
      sum_gx[k] += g * xhat_[r * c + k];
    }
  for (std::size_t k = 0; k < c; ++k) {
    gamma->grad[k] += sum_gx[k];
    beta->grad[k] += sum_g[k];
  }
  Tensor<T> dx(dy.shape());
  const T inv_n = T{1} / static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) {
      const T g = dy[r * c + k];
      dx[r * c + k] = gamma->value[k] * rstd_[k] *
                      (g - inv_n * sum_g[k] - xhat_[r * c + k] * inv_n * sum_gx[k]);
    }
  return dx;
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> LeakyRelu<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> y(x.shape());
  kernels::leaky_relu_forward(x.data(), x.size(), static_cast<T>(kLeakySlope), y.data());
  if (mode == Mode::kTrain) input_ = x;
  return y;
}

template <typename T>
Tensor<T> LeakyRelu<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.shape());
  kernels::leaky_relu_backward(input_.data(), dy.data(), dy.size(), static_cast<T>(kLeakySlope),
                               dx.data());
  return dx;
}

template <typename T>
Tensor<T> Gelu<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> y(x.shape());
  kernels::gelu_forward(x.data(), x.size(), y.data());
  if (mode == Mode::kTrain) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Gelu<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.shape());
  kernels::gelu_backward(input_.data(), dy.data(), dy.size(), dx.data());
  return dx;
}

// ---------------------------------------------------------------- pooling / shuffle

template <typename T>
Tensor<T> MaxPool2<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape& s = x.shape();
  const std::size_t h = s[s.size() - 3], w = s[s.size() - 2], c = s.back();
  if (h % 2 || w % 2) throw ShapeError("max pool needs even spatial dims, got " + shape_string(s));
  const std::size_t n = x.size() / (h * w * c);
  Shape out = s;
  out[out.size() - 3] = h / 2;
  out[out.size() - 2] = w / 2;
  Tensor<T> y(out);
  std::vector<std::size_t> arg(y.size());
  kernels::maxpool2_forward(x.data(), n, h, w, c, y.data(), arg.data());
  if (mode == Mode::kTrain) {
    in_shape_ = s;
    argmax_ = std::move(arg);
  }
  return y;
}

template <typename T>
Tensor<T> MaxPool2<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(in_shape_);
  kernels::maxpool2_backward(dy.data(), argmax_.data(), dy.size(), dx.data());
  return dx;
}

template <typename T>
Tensor<T> PixelShuffle<T>::forward(const Tensor<T>& x, Mode) const {
  const Shape& s = x.shape();
  const std::size_t h = s[s.size() - 3], w = s[s.size() - 2], c = s.back();
  if (c % (r_ * r_)) throw ShapeError("depth-to-space channels not divisible by r^2");
  const std::size_t n = x.size() / (h * w * c);
  Shape out = s;
  out[out.size() - 3] = h * r_;
  out[out.size() - 2] = w * r_;
  out.back() = c / (r_ * r_);
  Tensor<T> y(out);
  kernels::pixel_shuffle_forward(x.data(), n, h, w, c / (r_ * r_), r_, y.data());
  return y;
}

template <typename T>
Tensor<T> PixelShuffle<T>::backward(const Tensor<T>& dy) const {
  const Shape& s = dy.shape();
  const std::size_t h = s[s.size() - 3] / r_, w = s[s.size() - 2] / r_, c_out = s.back();
  const std::size_t n = dy.size() / (h * w * c_out * r_ * r_);
  Shape in = s;
  in[in.size() - 3] = h;
  in[in.size() - 2] = w;
  in.back() = c_out * r_ * r_;
  Tensor<T> dx(in);
  kernels::pixel_shuffle_backward(dy.data(), n, h, w, c_out, r_, dx.data());
  return dx;
}

// ---------------------------------------------------------------- Linear / LayerNorm / MLP

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, Initializer& init, const std::string& name,
                  std::size_t in_features, std::size_t out_features)
    : in_(in_features), out_(out_features) {
  weight = &store.add(name + ".weight", {in_features, out_features});
  bias = &store.add(name + ".bias", {out_features});
  init.truncated_normal(weight->value, 0.02);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.shape().back() != in_) {
    throw ShapeError("linear expects last dim " + std::to_string(in_) + ", got " +
                     shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / in_;
  Shape out_shape = x.shape();
  out_shape.back() = out_;
  Tensor<T> y(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bias->value.data(), bias->value.data() + out_, y.data() + r * out_);
  kernels::gemm<T>(false, false, rows, out_, in_, T{1}, x.data(), in_, weight->value.data(), out_,
                   T{1}, y.data(), out_);
  if (mode == Mode::kTrain) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy) {
  const std::size_t rows = dy.size() / out_;
  kernels::gemm<T>(true, false, in_, out_, rows, T{1}, input_.data(), in_, dy.data(), out_, T{1},
                   weight->grad.data(), out_);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < out_; ++k) bias->grad[k] += dy[r * out_ + k];
  Tensor<T> dx(input_.shape());
  kernels::gemm<T>(false, true, rows, in_, out_, T{1}, dy.data(), out_, weight->value.data(), out_,
                   T{0}, dx.data(), in_);
  return dx;
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t features)
    : features_(features) {
  gamma = &store.add(name + ".gamma", {features});
  beta = &store.add(name + ".beta", {features});
  gamma->value.fill(T{1});
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.shape().back() != features_) throw ShapeError("layer norm feature mismatch");
  const std::size_t rows = x.size() / features_;
  Tensor<T> y(x.shape());
  std::vector<T> mean(rows), rstd(rows);
  kernels::layer_norm_forward(x.data(), rows, features_, gamma->value.data(), beta->value.data(),
                              static_cast<T>(kEps), y.data(), mean.data(), rstd.data());
  if (mode == Mode::kTrain) {
    input_ = x;
    mean_ = std::move(mean);
    rstd_ = std::move(rstd);
  }
  return y;
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Tensor<T>& dy) {
  const std::size_t rows = dy.size() / features_;
  Tensor<T> dx(dy.shape());
  kernels::layer_norm_backward(input_.data(), dy.data(), rows, features_, gamma->value.data(),
                               mean_.data(), rstd_.data(), dx.data(), gamma->grad.data(),
                               beta->grad.data());
  return dx;
}

template <typename T>
Mlp<T>::Mlp(ParameterStore<T>& store, Initializer& init, const std::string& name,
            std::size_t features, std::size_t hidden)
    : fc1(store, init, name + ".fc1", features, hidden),
      fc2(store, init, name + ".fc2", hidden, features) {}

template <typename T>
Tensor<T> Mlp<T>::forward(const Tensor<T>& x, Mode mode) {
  return fc2.forward(act_.forward(fc1.forward(x, mode), mode), mode);
}

template <typename T>
Tensor<T> Mlp<T>::backward(const Tensor<T>& dy) {
  return fc1.backward(act_.backward(fc2.backward(dy)));
}

// ---------------------------------------------------------------- Upsample2x

template <typename T>
Upsample2x<T>::Upsample2x(ParameterStore<T>& store, Initializer& init, const std::string& name,
                          std::size_t in_channels, std::size_t out_channels)
    : in_(in_channels), out_(out_channels) {
  weight = &store.add(name + ".weight", {in_channels, 2, 2, out_channels});
  bias = &store.add(name + ".bias", {out_channels});
  // Transposed convolutions conventionally take fan-in from the (out, k, k) axes.
  init.uniform(weight->value, fan_in_bound(4 * out_channels));
}

template <typename T>
Tensor<T> Upsample2x<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape& s = x.shape();
  if (s.size() < 3 || s.back() != in_) throw ShapeError("upsample channel mismatch");
  const std::size_t h = s[s.size() - 3], w = s[s.size() - 2];
  const std::size_t n = x.size() / (h * w * in_);
  const std::size_t rows = n * h * w;
  std::vector<T> tmp(rows * 4 * out_);
  kernels::gemm<T>(false, false, rows, 4 * out_, in_, T{1}, x.data(), in_, weight->value.data(),
                   4 * out_, T{0}, tmp.data(), 4 * out_);
  Shape out_shape = s;
  out_shape[s.size() - 3] = 2 * h;
  out_shape[s.size() - 2] = 2 * w;
  out_shape.back() = out_;
  Tensor<T> y(out_shape);
  const T* b = bias->value.data();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t img = r / (h * w);
    const std::size_t iy = (r / w) % h;
    const std::size_t ix = r % w;
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx) {
        T* dst = y.data() + ((img * 2 * h + 2 * iy + dy) * 2 * w + 2 * ix + dx) * out_;
        const T* src = tmp.data() + r * 4 * out_ + (dy * 2 + dx) * out_;
        for (std::size_t c = 0; c < out_; ++c) dst[c] = src[c] + b[c];
      }
  }
  if (mode == Mode::kTrain) input_ = x;
  return y;
}

template <typename T>
Tensor<T> Upsample2x<T>::backward(const Tensor<T>& dy) {
  const Shape& s = input_.shape();
  const std::size_t h = s[s.size() - 3], w = s[s.size() - 2];
  const std::size_t n = input_.size() / (h * w * in_);
  const std::size_t rows = n * h * w;
  std::vector<T> dtmp(rows * 4 * out_);
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t img = r / (h * w);
    const std::size_t iy = (r / w) % h;
    const std::size_t ix = r % w;
    for (std::size_t oy = 0; oy < 2; ++oy)
      for (std::size_t ox = 0; ox < 2; ++ox) {
        const T* src = dy.data() + ((img * 2 * h + 2 * iy + oy) * 2 * w + 2 * ix + ox) * out_;
        std::copy(src, src + out_, dtmp.data() + r * 4 * out_ + (oy * 2 + ox) * out_);
      }
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t c = 0; c < out_; ++c) bias->grad[c] += dtmp[r * 4 * out_ + k * out_ + c];
  kernels::gemm<T>(true, false, in_, 4 * out_, rows, T{1}, input_.data(), in_, dtmp.data(),
                   4 * out_, T{1}, weight->grad.data(), 4 * out_);
  Tensor<T> dx(s);
  kernels::gemm<T>(false, true, rows, in_, 4 * out_, T{1}, dtmp.data(), 4 * out_,
                   weight->value.data(), 4 * out_, T{0}, dx.data(), in_);
  return dx;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template void Initializer::truncated_normal<float>(Tensor<float>&, double);
template void Initializer::truncated_normal<double>(Tensor<double>&, double);
template void Initializer::uniform<float>(Tensor<float>&, double);
template void Initializer::uniform<double>(Tensor<double>&, double);
template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template class LeakyRelu<float>;
template class LeakyRelu<double>;
template class Gelu<float>;
template class Gelu<double>;
template class MaxPool2<float>;
template class MaxPool2<double>;
template class PixelShuffle<float>;
template class PixelShuffle<double>;
template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class Mlp<float>;
template class Mlp<double>;
template class Upsample2x<float>;
template class Upsample2x<double>;

}  // namespace keyrestore
