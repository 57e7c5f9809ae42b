#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "keyrestore/attention.hpp"
#include "keyrestore/layers.hpp"
#include "keyrestore/tensor.hpp"

namespace keyrestore {

/// Architecture hyperparameters. Defaults are the full-scale setting.
struct ModelConfig {
  std::size_t clip_length = 9;  // T, odd, >= 5
  std::size_t height = 256;
  std::size_t width = 256;
  std::size_t window = 4;     // M
  std::size_t channels = 96;  // C
  std::size_t depth = 6;      // N blocks per stage, even
  std::size_t heads = 3;
  std::size_t input_channels = 3;
  std::vector<std::size_t> extractor_widths = {64, 128};
  std::size_t mlp_ratio = 4;
  bool cross_attention_skip = true;
  bool tu_residual_skip = true;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  std::size_t middle_index() const { return (clip_length - 1) / 2; }
  std::size_t missing_frames() const { return clip_length - 3; }
  std::size_t feature_height() const { return height / 4; }
  std::size_t feature_width() const { return width / 4; }
  /// Output-head working width: 64 at C = 96, scaled linearly with C.
  std::size_t head_width() const;

  /// Stable text digest of everything that determines parameter shapes.
  std::string fingerprint() const;
};

/// Frames (T, H, W, 3) in [0, 1] plus their positions in the source video.
struct VideoClip {
  Tensor<float> frames;
  std::vector<std::size_t> frame_indices;

  /// Checks range, frame count and index contiguity.
  void validate(std::size_t clip_length) const;
};

/// 0-based keyframe positions {0, (T-1)/2, T-1}.
std::array<std::size_t, 3> keyframe_indices(std::size_t clip_length);

/// Stacks frames {0, (T-1)/2, T-1} of a (T, H, W, c) or (B, T, H, W, c)
/// clip in chronological order.
template <typename T>
Tensor<T> extract_keyframe_stack(const Tensor<T>& clip);

Tensor<float> extract_keyframe_stack(const VideoClip& clip);

/// Temporal order [k0, q[0, h), k1, q[h, 2h), k2] with h = (T-3)/2.
template <typename T>
Tensor<T> assemble_prototype(const Tensor<T>& keyframes, const Tensor<T>& q0);

/// Adjoint of assemble_prototype: splits d(Q) into (d keyframes, d q0).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_prototype(const Tensor<T>& dq, const Shape& key_shape,
                                                const Shape& q_shape);

/// 3-D transposed convolution mapping 3 keyframe feature frames to T-3
/// frames: temporal kernel T-3, spatial 3x3, stride 1, padding 1 on every
/// axis (the unique temporal padding giving T-3 outputs for every odd T).
/// Weights are kept in gather orientation (kt, ky, kx, c_in, c_out):
///   out[t](y, x) = b + sum_{kt,ky,kx} in[t + 1 - kt](y + ky - 1, x + kx - 1) W[kt, ky, kx]
/// which equals the scatter-form transposed convolution with the spatial
/// kernel flipped.
template <typename T>
class TemporalUpsample {
 public:
  TemporalUpsample() = default;
  TemporalUpsample(ParameterStore<T>& store, Initializer& init, const std::string& name,
                   std::size_t channels, std::size_t clip_length);

  /// A second call site on the same weights with its own activation cache.
  TemporalUpsample share() const;

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T>* weight = nullptr;
  Param<T>* bias = nullptr;

 private:
  std::size_t channels_ = 0, kernel_t_ = 0;
  Tensor<T> input_;
};

template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(ParameterStore<T>& store, Initializer& init, const ModelConfig& cfg);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  std::array<Conv2d<T>, 5> conv_;
  std::array<BatchNorm<T>, 4> bn_;
  std::array<LeakyRelu<T>, 5> act_;
  std::array<MaxPool2<T>, 2> pool_;
};

/// Per-stage encoder outputs: stage features before downsampling (fe) and
/// after (e, with e[3] == fe[3]).
template <typename T>
struct EncoderOutputs {
  std::array<Tensor<T>, 4> fe;
  std::array<Tensor<T>, 4> e;
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterStore<T>& store, Initializer& init, const ModelConfig& cfg);
  EncoderOutputs<T> forward(const Tensor<T>& f, Mode mode);
  /// dfe: gradient arriving at each fe[n] from outside the encoder.
  Tensor<T> backward(std::array<Tensor<T>, 4> dfe);

  std::array<std::vector<EncoderBlock<T>>, 4> stages;
  std::array<Conv2d<T>, 3> down;
};

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  /// skip_tu may be null when the temporal-upsampling skip is disabled.
  Decoder(ParameterStore<T>& store, Initializer& init, const ModelConfig& cfg,
          const TemporalUpsample<T>* skip_tu);

  Tensor<T> forward(const std::array<Tensor<T>, 4>& fe, const Tensor<T>& prototype, Mode mode);
  /// Returns d(prototype); accumulates encoder-feature gradients into dfe.
  Tensor<T> backward(const Tensor<T>& dy, std::array<Tensor<T>, 4>& dfe);

  /// Residual skip features e^r_n for n = 0..2 from the last forward pass.
  const std::array<Tensor<T>, 3>& skip_features() const { return skip_; }

  std::array<std::vector<DecoderBlock<T>>, 4> stages;
  std::array<Upsample2x<T>, 3> up;  // up[n] follows stage n+1

 private:
  ModelConfig cfg_;
  std::array<TemporalUpsample<T>, 3> skip_tu_;
  std::array<Tensor<T>, 3> skip_;
};

template <typename T>
class OutputHead {
 public:
  OutputHead() = default;
  OutputHead(ParameterStore<T>& store, Initializer& init, const ModelConfig& cfg);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  std::array<Conv2d<T>, 4> conv_;
  std::array<LeakyRelu<T>, 3> act_;
  PixelShuffle<T> shuffle_{2};
};

/// The keyframe-conditioned restoration network. Owns its parameters.
/// Inputs are keyframe stacks (3, H, W, 3) or batches (B, 3, H, W, 3);
/// outputs have T frames at the same resolution.
template <typename T>
class Network {
 public:
  Network(const ModelConfig& cfg, std::uint64_t seed);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  Tensor<T> forward(const Tensor<T>& keyframes, Mode mode);
  /// Backpropagates d(output) of the last kTrain forward into parameter grads.
  /// Returns d(keyframes).
  Tensor<T> backward(const Tensor<T>& dy);

  /// Inference-mode forward (running batch-norm statistics).
  Tensor<T> restore(const Tensor<T>& keyframes) { return forward(keyframes, Mode::kInfer); }

  // Stage entry points; each runs one part of the pipeline.
  Tensor<T> extract_features(const Tensor<T>& x, Mode mode) { return extractor_.forward(x, mode); }
  EncoderOutputs<T> encode(const Tensor<T>& f, Mode mode) { return encoder_.forward(f, mode); }
  enum class TuRole { kBottleneck, kSkip };
  Tensor<T> temporal_upsample(const Tensor<T>& e, TuRole which, Mode mode);
  Tensor<T> decode(const EncoderOutputs<T>& enc, const Tensor<T>& prototype, Mode mode) {
    return decoder_.forward(enc.fe, prototype, mode);
  }
  Tensor<T> output_head(const Tensor<T>& d0, Mode mode) { return head_.forward(d0, mode); }

  /// Intermediates of the last forward pass.
  const EncoderOutputs<T>& last_encoder_outputs() const { return enc_; }
  const Tensor<T>& last_prototype() const { return prototype_; }
  const Tensor<T>& last_decoder_output() const { return d0_; }
  const std::array<Tensor<T>, 3>& last_skip_features() const { return decoder_.skip_features(); }

  /// Keep cross-attention weights of each decoder stage's last block in
  /// inference passes.
  void set_capture_attention(bool on);
  /// Cross-attention block whose weights represent decoder stage n (0..3),
  /// or null when cross-attention is disabled.
  const DecoderBlock<T>* attention_block(std::size_t stage) const;

 private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  FeatureExtractor<T> extractor_;
  Encoder<T> encoder_;
  TemporalUpsample<T> bottleneck_tu_;
  std::unique_ptr<TemporalUpsample<T>> skip_tu_;
  Decoder<T> decoder_;
  OutputHead<T> head_;

  EncoderOutputs<T> enc_;
  Tensor<T> prototype_, d0_;
  Shape input_shape_;
};

}  // namespace keyrestore
