#pragma once

#include <cstddef>
#include <optional>
#include <utility>

#include "keyrestore/layers.hpp"
#include "keyrestore/tensor.hpp"

namespace keyrestore {

/// Feature map flattened into combined spatio-temporal windows.
///
/// data has shape (num_windows, frames*M*M, c). Window index is
/// b*rows*cols + row*cols + col; inside a window tokens are frame-major,
/// then row-major over the M x M spatial patch:
///   token = f*M*M + r*M + q.
template <typename T>
struct WindowBatch {
  Tensor<T> data;
  std::size_t rows = 0;  // window grid per image
  std::size_t cols = 0;
  std::size_t window = 0;  // M
  std::size_t frames = 0;
  std::size_t batch = 1;

  std::size_t num_windows() const { return data.dim(0); }
  std::size_t tokens() const { return data.dim(1); }
  std::size_t channels() const { return data.dim(2); }
};

template <typename T>
WindowBatch<T> partition_windows(const Tensor<T>& feat, std::size_t window);

/// Inverse of partition_windows; returns (batch, frames, h, w, c).
template <typename T>
Tensor<T> reverse_windows(const WindowBatch<T>& wb, const FeatureDims& dims);

/// Rank-4 convenience for batch-1 maps: returns (frames, h, w, c).
template <typename T>
Tensor<T> reverse_windows(const WindowBatch<T>& wb, std::size_t frames, std::size_t h,
                          std::size_t w, std::size_t c);

/// Rolls both spatial axes so that input (y, x) lands at ((y - s) mod h, (x - s) mod w).
/// Negative s undoes a positive shift. Rank and shape are preserved.
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& feat, std::ptrdiff_t s);

/// Window side actually used at an (h, w) stage: min(M, h, w). Both spatial
/// dims must be divisible by it.
std::size_t effective_window(std::size_t window, std::size_t h, std::size_t w);

/// Shift used by a shifted block: floor(eff/2), or 0 when a single window
/// already covers the whole grid.
std::size_t effective_shift(std::size_t window, std::size_t h, std::size_t w);

/// Additive mask (rows*cols, frames_q*M*M, frames_kv*M*M) for shifted
/// windows: 0 between tokens that came from the same image region before
/// the roll, -100 otherwise. Frames never affect region membership.
template <typename T>
Tensor<T> shifted_window_mask(std::size_t h, std::size_t w, std::size_t window, std::size_t shift,
                              std::size_t frames_q, std::size_t frames_kv);

inline constexpr double kMaskValue = -100.0;

/// Multi-head (cross-)attention applied independently per window.
/// Projections Q/K/V/O are c x c linears with bias; scores are scaled by
/// 1/sqrt(c/heads).
template <typename T>
class WindowAttention {
 public:
  WindowAttention() = default;
  WindowAttention(ParameterStore<T>& store, Initializer& init, const std::string& name,
                  std::size_t channels, std::size_t heads);

  /// q: (nW, Lq, c), kv: (nW, Lk, c); mask (nW_mask, Lq, Lk) is applied to
  /// window i as mask[i % nW_mask].
  Tensor<T> forward(const Tensor<T>& q, const Tensor<T>& kv, const Tensor<T>* mask, Mode mode);

  /// Returns (dq, dkv). For self-attention the caller sums both.
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& dy);

  /// Softmax weights (nW, heads, Lq, Lk) of the last forward pass. Kept in
  /// training mode, or in inference mode when capture is on.
  const Tensor<T>& probabilities() const { return probs_; }
  void set_capture(bool on) { capture_ = on; }

  std::size_t heads() const { return heads_; }
  Linear<T> wq, wk, wv, wo;

 private:
  std::size_t channels_ = 0;
  std::size_t heads_ = 1;
  bool capture_ = false;
  Tensor<T> q_, k_, v_, probs_;
};

/// Free-function form of window attention on window batches.
template <typename T>
WindowBatch<T> window_attention(const WindowBatch<T>& q_windows, const WindowBatch<T>& kv_windows,
                                 WindowAttention<T>& params, const Tensor<T>* mask = nullptr);

struct BlockOptions {
  std::size_t channels = 96;
  std::size_t heads = 3;
  std::size_t window = 4;
  std::size_t mlp_ratio = 4;
  bool shifted = false;
};

/// LN -> (S)W-MSA -> residual -> LN -> MLP -> residual over a
/// (batch, frames, h, w, c) feature map.
template <typename T>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParameterStore<T>& store, Initializer& init, const std::string& name,
               const BlockOptions& opts);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  LayerNorm<T> norm1, norm2;
  WindowAttention<T> attn;
  Mlp<T> mlp;

 private:
  BlockOptions opts_;
  FeatureDims dims_;
  std::size_t eff_ = 0, shift_ = 0;
};

/// LN -> (S)W-MSA -> residual -> LN -> (S)W-MCA against encoder features ->
/// residual -> LN -> MLP -> residual. The encoder stream is rolled by the
/// same shift as the query stream so windows stay spatially aligned.
template <typename T>
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(ParameterStore<T>& store, Initializer& init, const std::string& name,
               const BlockOptions& opts, bool cross_attention);

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& enc, Mode mode);
  /// Returns (dx, denc). denc is empty when cross-attention is disabled.
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& dy);

  bool has_cross_attention() const { return cross_; }
  std::size_t window_used() const { return eff_; }
  std::size_t shift_used() const { return shift_; }

  LayerNorm<T> norm1, norm2, norm3;
  WindowAttention<T> self_attn, cross_attn;
  Mlp<T> mlp;

 private:
  BlockOptions opts_;
  bool cross_ = true;
  FeatureDims dims_, enc_dims_;
  Shape enc_shape_;
  std::size_t eff_ = 0, shift_ = 0;
};

}  // namespace keyrestore
