#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "keyrestore/kernels.hpp"
#include "keyrestore/tensor.hpp"

namespace keyrestore {

/// A named learnable array plus its gradient accumulator. Non-trainable
/// entries (batch-norm running statistics) live in the same store so that
/// checkpoints capture them.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Hierarchical name -> parameter map. Node-based, so references handed out
/// by add()/at() stay valid for the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  Param<T>& add(const std::string& name, Shape shape, bool trainable = true);
  Param<T>& at(const std::string& name);
  const Param<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Param<T>>& entries() { return params_; }
  const std::map<std::string, Param<T>>& entries() const { return params_; }

  void zero_grad();
  std::size_t trainable_count() const;

 private:
  std::map<std::string, Param<T>> params_;
};

enum class Mode { kTrain, kInfer };

/// Seeded initializer. Every parameter draws from one engine in creation
/// order, so a seed fully determines the initial network.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : engine_(seed) {}

  template <typename T>
  void truncated_normal(Tensor<T>& t, double stddev);
  template <typename T>
  void uniform(Tensor<T>& t, double bound);

 private:
  std::mt19937_64 engine_;
};

inline constexpr double kLeakySlope = 0.2;

/// k x k convolution over NHWC images. Leading axes beyond (h, w, c) are
/// flattened into the image count.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, Initializer& init, const std::string& name,
         std::size_t in_channels, std::size_t out_channels, std::size_t kernel = 3,
         std::size_t stride = 1, std::size_t pad = 1);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T>* weight = nullptr;
  Param<T>* bias = nullptr;

 private:
  kernels::ConvGeometry geometry_for(const Shape& s) const;
  std::size_t in_ = 0, out_ = 0, kernel_ = 3, stride_ = 1, pad_ = 1;
  Tensor<T> input_;
};

/// Per-channel batch normalization; batch statistics in training, running
/// statistics (momentum 0.1, unbiased variance) at inference.
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParameterStore<T>& store, const std::string& name, std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  Param<T>* running_mean = nullptr;
  Param<T>* running_var = nullptr;

  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

 private:
  std::size_t channels_ = 0;
  Tensor<T> xhat_;
  std::vector<T> rstd_;
};

template <typename T>
class LeakyRelu {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Tensor<T> input_;
};

template <typename T>
class MaxPool2 {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

/// Depth-to-space by factor r on NHWC images.
template <typename T>
class PixelShuffle {
 public:
  explicit PixelShuffle(std::size_t factor = 2) : r_(factor) {}
  Tensor<T> forward(const Tensor<T>& x, Mode mode) const;
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  std::size_t r_;
};

/// y = x W + b on the last axis; W is stored (in, out).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, Initializer& init, const std::string& name,
         std::size_t in_features, std::size_t out_features);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T>* weight = nullptr;
  Param<T>* bias = nullptr;

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> input_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t features);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  static constexpr double kEps = 1e-5;

 private:
  std::size_t features_ = 0;
  Tensor<T> input_;
  std::vector<T> mean_, rstd_;
};

template <typename T>
class Gelu {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Tensor<T> input_;
};

/// Two-layer perceptron with GELU: in -> hidden -> in.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore<T>& store, Initializer& init, const std::string& name, std::size_t features,
      std::size_t hidden);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Linear<T> fc1, fc2;

 private:
  Gelu<T> act_;
};

/// 2x2 stride-2 transposed convolution on (..., h, w, c_in) -> (..., 2h, 2w, c_out).
/// Weight layout (c_in, 2, 2, c_out).
template <typename T>
class Upsample2x {
 public:
  Upsample2x() = default;
  Upsample2x(ParameterStore<T>& store, Initializer& init, const std::string& name,
             std::size_t in_channels, std::size_t out_channels);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T>* weight = nullptr;
  Param<T>* bias = nullptr;

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> input_;
};

}  // namespace keyrestore
