#include "keyrestore/model.hpp"

#include <cmath>
#include <sstream>

#include "keyrestore/kernels.hpp"

namespace keyrestore {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (clip_length < 5 || clip_length % 2 == 0) fail("clip length T must be odd and >= 5");
  if (depth < 2 || depth % 2 != 0) fail("depth N must be even and >= 2");
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0)
    fail("frame height and width must be positive multiples of 32");
  if (heads == 0 || channels == 0 || channels % heads != 0)
    fail("channels must be divisible by head count");
  if (window == 0) fail("window size must be positive");
  if (input_channels == 0) fail("input channels must be positive");
  if (extractor_widths.size() != 2 || extractor_widths[0] == 0 || extractor_widths[1] == 0)
    fail("feature extractor needs two positive widths");
  if (mlp_ratio == 0) fail("mlp ratio must be positive");
  for (std::size_t n = 0; n < 4; ++n) {
    const std::size_t h = feature_height() >> n, w = feature_width() >> n;
    const std::size_t eff = std::min({window, h, w});
    if (h % eff || w % eff)
      fail("stage " + std::to_string(n) + " resolution not divisible by window size");
  }
}

std::size_t ModelConfig::head_width() const {
  const double scaled = 64.0 * static_cast<double>(channels) / 96.0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scaled)));
}

std::string ModelConfig::fingerprint() const {
  std::ostringstream os;
  os << "T=" << clip_length << ";H=" << height << ";W=" << width << ";M=" << window
     << ";C=" << channels << ";N=" << depth << ";heads=" << heads << ";in=" << input_channels
     << ";fx=" << extractor_widths.at(0) << "," << extractor_widths.at(1) << ";mlp=" << mlp_ratio
     << ";cac=" << cross_attention_skip << ";tuc=" << tu_residual_skip;
  return os.str();
}

void VideoClip::validate(std::size_t clip_length) const {
  if (frames.rank() != 4 || frames.dim(0) != clip_length)
    throw ShapeError("video clip must hold exactly " + std::to_string(clip_length) + " frames, got " +
                     shape_string(frames.shape()));
  for (float v : frames.values())
    if (!(v >= 0.0f && v <= 1.0f)) throw ShapeError("video clip values must lie in [0, 1]");
  if (frame_indices.size() != clip_length) throw ShapeError("video clip index count mismatch");
  for (std::size_t i = 1; i < frame_indices.size(); ++i)
    if (frame_indices[i] != frame_indices[i - 1] + 1)
      throw ShapeError("video clip frame indices must be contiguous and increasing");
}

std::array<std::size_t, 3> keyframe_indices(std::size_t clip_length) {
  return {0, (clip_length - 1) / 2, clip_length - 1};
}

template <typename T>
Tensor<T> extract_keyframe_stack(const Tensor<T>& clip) {
  const FeatureDims d = FeatureDims::of(clip.shape());
  Shape out_shape = clip.shape();
  out_shape[clip.rank() == 4 ? 0 : 1] = 3;
  Tensor<T> out(out_shape);
  const std::size_t frame = d.pixels() * d.channels;
  const auto keys = keyframe_indices(d.frames);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t k = 0; k < 3; ++k) {
      const T* src = clip.data() + (b * d.frames + keys[k]) * frame;
      std::copy(src, src + frame, out.data() + (b * 3 + k) * frame);
    }
  return out;
}

Tensor<float> extract_keyframe_stack(const VideoClip& clip) {
  return extract_keyframe_stack(clip.frames);
}

template <typename T>
Tensor<T> assemble_prototype(const Tensor<T>& keyframes, const Tensor<T>& q0) {
  const FeatureDims kd = FeatureDims::of(keyframes.shape());
  const FeatureDims qd = FeatureDims::of(q0.shape());
  if (kd.frames != 3 || kd.batch != qd.batch || kd.height != qd.height || kd.width != qd.width ||
      kd.channels != qd.channels || qd.frames % 2 != 0) {
    throw ShapeError("assemble_prototype: incompatible shapes " + shape_string(keyframes.shape()) +
                     " and " + shape_string(q0.shape()));
  }
  const std::size_t t = qd.frames + 3, half = qd.frames / 2;
  const std::size_t frame = kd.pixels() * kd.channels;
  Shape out_shape = keyframes.shape();
  out_shape[keyframes.rank() == 4 ? 0 : 1] = t;
  Tensor<T> out(out_shape);
  for (std::size_t b = 0; b < kd.batch; ++b) {
    auto put = [&](std::size_t slot, const T* src) {
      std::copy(src, src + frame, out.data() + (b * t + slot) * frame);
    };
    const T* k = keyframes.data() + b * 3 * frame;
    const T* q = q0.data() + b * qd.frames * frame;
    put(0, k);
    for (std::size_t i = 0; i < half; ++i) put(1 + i, q + i * frame);
    put(1 + half, k + frame);
    for (std::size_t i = 0; i < half; ++i) put(2 + half + i, q + (half + i) * frame);
    put(t - 1, k + 2 * frame);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_prototype(const Tensor<T>& dq, const Shape& key_shape,
                                                const Shape& q_shape) {
  Tensor<T> dk(key_shape), dqq(q_shape);
  const FeatureDims qd = FeatureDims::of(q_shape);
  const FeatureDims kd = FeatureDims::of(key_shape);
  const std::size_t t = qd.frames + 3, half = qd.frames / 2;
  const std::size_t frame = kd.pixels() * kd.channels;
  for (std::size_t b = 0; b < kd.batch; ++b) {
    auto get = [&](std::size_t slot, T* dst) {
      const T* src = dq.data() + (b * t + slot) * frame;
      std::copy(src, src + frame, dst);
    };
    T* k = dk.data() + b * 3 * frame;
    T* q = dqq.data() + b * qd.frames * frame;
    get(0, k);
    for (std::size_t i = 0; i < half; ++i) get(1 + i, q + i * frame);
    get(1 + half, k + frame);
    for (std::size_t i = 0; i < half; ++i) get(2 + half + i, q + (half + i) * frame);
    get(t - 1, k + 2 * frame);
  }
  return {std::move(dk), std::move(dqq)};
}

// ---------------------------------------------------------------- TemporalUpsample

template <typename T>
TemporalUpsample<T>::TemporalUpsample(ParameterStore<T>& store, Initializer& init,
                                      const std::string& name, std::size_t channels,
                                      std::size_t clip_length)
    : channels_(channels), kernel_t_(clip_length - 3) {
  weight = &store.add(name + ".weight", {kernel_t_, 3, 3, channels, channels});
  bias = &store.add(name + ".bias", {channels});
  // Transposed-convolution fan-in convention: c_out * kt * 3 * 3.
  const double fan_in = static_cast<double>(kernel_t_ * 9 * channels);
  init.uniform(weight->value, 1.0 / std::sqrt(fan_in));
}

template <typename T>
TemporalUpsample<T> TemporalUpsample<T>::share() const {
  TemporalUpsample<T> other;
  other.weight = weight;
  other.bias = bias;
  other.channels_ = channels_;
  other.kernel_t_ = kernel_t_;
  return other;
}

template <typename T>
Tensor<T> TemporalUpsample<T>::forward(const Tensor<T>& x, Mode mode) {
  const FeatureDims d = FeatureDims::of(x.shape());
  if (d.frames != 3) {
    throw ShapeError("temporal upsample expects exactly 3 input frames, got " +
                     std::to_string(d.frames));
  }
  if (d.channels != channels_) throw ShapeError("temporal upsample channel mismatch");
  const std::size_t out_frames = kernel_t_;
  kernels::ConvGeometry g{d.height, d.width, channels_, channels_, 3, 1, 1};
  const std::size_t pixels = d.pixels();
  const std::size_t frame = pixels * channels_;
  const std::size_t wstride = 9 * channels_ * channels_;
  Shape out_shape = x.shape();
  out_shape[x.rank() == 4 ? 0 : 1] = out_frames;
  Tensor<T> y(out_shape);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < out_frames; ++t)
      for (std::size_t p = 0; p < pixels; ++p)
        std::copy(bias->value.data(), bias->value.data() + channels_,
                  y.data() + (b * out_frames + t) * frame + p * channels_);
  std::vector<T> cols(pixels * g.patch());
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t ti = 0; ti < 3; ++ti) {
      kernels::im2col(x.data() + (b * 3 + ti) * frame, g, cols.data());
      for (std::size_t to = 0; to < out_frames; ++to) {
        const std::ptrdiff_t kt = static_cast<std::ptrdiff_t>(to) + 1 - static_cast<std::ptrdiff_t>(ti);
        if (kt < 0 || kt >= static_cast<std::ptrdiff_t>(kernel_t_)) continue;
        kernels::gemm<T>(false, false, pixels, channels_, g.patch(), T{1}, cols.data(), g.patch(),
                         weight->value.data() + static_cast<std::size_t>(kt) * wstride, channels_,
                         T{1}, y.data() + (b * out_frames + to) * frame, channels_);
      }
    }
  if (mode == Mode::kTrain) input_ = x;
  return y;
}

template <typename T>
Tensor<T> TemporalUpsample<T>::backward(const Tensor<T>& dy) {
  const FeatureDims d = FeatureDims::of(input_.shape());
  const std::size_t out_frames = kernel_t_;
  kernels::ConvGeometry g{d.height, d.width, channels_, channels_, 3, 1, 1};
  const std::size_t pixels = d.pixels();
  const std::size_t frame = pixels * channels_;
  const std::size_t wstride = 9 * channels_ * channels_;
  for (std::size_t i = 0; i < dy.size() / channels_; ++i)
    for (std::size_t c = 0; c < channels_; ++c) bias->grad[c] += dy[i * channels_ + c];
  Tensor<T> dx(input_.shape());
  std::vector<T> cols(pixels * g.patch()), dcols(pixels * g.patch());
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t ti = 0; ti < 3; ++ti) {
      kernels::im2col(input_.data() + (b * 3 + ti) * frame, g, cols.data());
      std::fill(dcols.begin(), dcols.end(), T{0});
      for (std::size_t to = 0; to < out_frames; ++to) {
        const std::ptrdiff_t kt = static_cast<std::ptrdiff_t>(to) + 1 - static_cast<std::ptrdiff_t>(ti);
        if (kt < 0 || kt >= static_cast<std::ptrdiff_t>(kernel_t_)) continue;
        const T* g_out = dy.data() + (b * out_frames + to) * frame;
        const T* w = weight->value.data() + static_cast<std::size_t>(kt) * wstride;
        kernels::gemm<T>(true, false, g.patch(), channels_, pixels, T{1}, cols.data(), g.patch(),
                         g_out, channels_, T{1},
                         weight->grad.data() + static_cast<std::size_t>(kt) * wstride, channels_);
        kernels::gemm<T>(false, true, pixels, g.patch(), channels_, T{1}, g_out, channels_, w,
                         channels_, T{1}, dcols.data(), g.patch());
      }
      kernels::col2im(dcols.data(), g, dx.data() + (b * 3 + ti) * frame);
    }
  return dx;
}

// ---------------------------------------------------------------- FeatureExtractor

template <typename T>
FeatureExtractor<T>::FeatureExtractor(ParameterStore<T>& store, Initializer& init,
                                      const ModelConfig& cfg) {
  const std::size_t w0 = cfg.extractor_widths[0], w1 = cfg.extractor_widths[1];
  const std::array<std::size_t, 6> widths{cfg.input_channels, w0, w0, w1, w1, cfg.channels};
  for (std::size_t i = 0; i < 5; ++i) {
    conv_[i] = Conv2d<T>(store, init, "extractor.conv" + std::to_string(i), widths[i],
                         widths[i + 1]);
    if (i < 4) bn_[i] = BatchNorm<T>(store, "extractor.bn" + std::to_string(i), widths[i + 1]);
  }
}

template <typename T>
Tensor<T> FeatureExtractor<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < 5; ++i) {
    h = conv_[i].forward(h, mode);
    if (i < 4) h = bn_[i].forward(h, mode);
    h = act_[i].forward(h, mode);
    if (i == 1 || i == 3) h = pool_[i / 2].forward(h, mode);
  }
  return h;
}

template <typename T>
Tensor<T> FeatureExtractor<T>::backward(const Tensor<T>& dy) {
  Tensor<T> g = dy;
  for (std::size_t k = 5; k-- > 0;) {
    if (k == 1 || k == 3) g = pool_[k / 2].backward(g);
    g = act_[k].backward(g);
    if (k < 4) g = bn_[k].backward(g);
    g = conv_[k].backward(g);
  }
  return g;
}

// ---------------------------------------------------------------- Encoder

namespace {

BlockOptions block_options(const ModelConfig& cfg, std::size_t index) {
  BlockOptions o;
  o.channels = cfg.channels;
  o.heads = cfg.heads;
  o.window = cfg.window;
  o.mlp_ratio = cfg.mlp_ratio;
  o.shifted = index % 2 == 1;
  return o;
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(ParameterStore<T>& store, Initializer& init, const ModelConfig& cfg) {
  for (std::size_t n = 0; n < 4; ++n) {
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      stages[n].emplace_back(store, init,
                             "encoder.stage" + std::to_string(n) + ".block" + std::to_string(i),
                             block_options(cfg, i));
    }
    if (n < 3)
      down[n] = Conv2d<T>(store, init, "encoder.down" + std::to_string(n), cfg.channels,
                          cfg.channels, 3, 2, 1);
  }
}

template <typename T>
EncoderOutputs<T> Encoder<T>::forward(const Tensor<T>& f, Mode mode) {
  EncoderOutputs<T> out;
  Tensor<T> x = f;
  for (std::size_t n = 0; n < 4; ++n) {
    for (auto& blk : stages[n]) x = blk.forward(x, mode);
    out.fe[n] = x;
    if (n < 3) {
      x = down[n].forward(x, mode);
      out.e[n] = x;
    } else {
      out.e[n] = out.fe[n];
    }
  }
  return out;
}

template <typename T>
Tensor<T> Encoder<T>::backward(std::array<Tensor<T>, 4> dfe) {
  Tensor<T> g = std::move(dfe[3]);
  for (std::size_t n = 4; n-- > 0;) {
    for (auto it = stages[n].rbegin(); it != stages[n].rend(); ++it) g = it->backward(g);
    if (n > 0) {
      add_inplace(dfe[n - 1], down[n - 1].backward(g));
      g = std::move(dfe[n - 1]);
    }
  }
  return g;
}

// ---------------------------------------------------------------- Decoder

template <typename T>
Decoder<T>::Decoder(ParameterStore<T>& store, Initializer& init, const ModelConfig& cfg,
                    const TemporalUpsample<T>* skip_tu)
    : cfg_(cfg) {
  for (std::size_t n = 4; n-- > 0;) {
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      stages[n].emplace_back(store, init,
                             "decoder.stage" + std::to_string(n) + ".block" + std::to_string(i),
                             block_options(cfg, i), cfg.cross_attention_skip);
    }
    if (n > 0)
      up[n - 1] = Upsample2x<T>(store, init, "decoder.up" + std::to_string(n), cfg.channels,
                                cfg.channels);
  }
  if (skip_tu)
    for (auto& tu : skip_tu_) tu = skip_tu->share();
}

template <typename T>
Tensor<T> Decoder<T>::forward(const std::array<Tensor<T>, 4>& fe, const Tensor<T>& prototype,
                              Mode mode) {
  Tensor<T> d = prototype;
  for (std::size_t n = 4; n-- > 0;) {
    if (n < 3 && cfg_.tu_residual_skip) {
      skip_[n] = assemble_prototype(fe[n], skip_tu_[n].forward(fe[n], mode));
      add_inplace(d, skip_[n]);
    }
    for (auto& blk : stages[n]) d = blk.forward(d, fe[n], mode);
    if (n > 0) d = up[n - 1].forward(d, mode);
  }
  return d;
}

template <typename T>
Tensor<T> Decoder<T>::backward(const Tensor<T>& dy, std::array<Tensor<T>, 4>& dfe) {
  Tensor<T> g = dy;
  for (std::size_t n = 0; n < 4; ++n) {
    if (n > 0) g = up[n - 1].backward(g);
    for (auto it = stages[n].rbegin(); it != stages[n].rend(); ++it) {
      auto [dx, denc] = it->backward(g);
      g = std::move(dx);
      if (!denc.empty()) add_inplace(dfe[n], denc);
    }
    if (n < 3 && cfg_.tu_residual_skip) {
      Shape q_shape = dfe[n].shape();
      q_shape[1] = cfg_.missing_frames();
      auto [dk, dq] = split_prototype(g, dfe[n].shape(), q_shape);
      add_inplace(dfe[n], dk);
      add_inplace(dfe[n], skip_tu_[n].backward(dq));
    }
  }
  return g;
}

// ---------------------------------------------------------------- OutputHead

template <typename T>
OutputHead<T>::OutputHead(ParameterStore<T>& store, Initializer& init, const ModelConfig& cfg) {
  const std::size_t c = cfg.channels, hw = cfg.head_width();
  conv_[0] = Conv2d<T>(store, init, "head.conv0", c, 4 * c);
  conv_[1] = Conv2d<T>(store, init, "head.conv1", c, 4 * hw);
  conv_[2] = Conv2d<T>(store, init, "head.conv2", hw, hw);
  conv_[3] = Conv2d<T>(store, init, "head.conv3", hw, 3);
}

template <typename T>
Tensor<T> OutputHead<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = act_[0].forward(shuffle_.forward(conv_[0].forward(x, mode), mode), mode);
  h = act_[1].forward(shuffle_.forward(conv_[1].forward(h, mode), mode), mode);
  h = act_[2].forward(conv_[2].forward(h, mode), mode);
  return conv_[3].forward(h, mode);
}

template <typename T>
Tensor<T> OutputHead<T>::backward(const Tensor<T>& dy) {
  Tensor<T> g = conv_[3].backward(dy);
  g = conv_[2].backward(act_[2].backward(g));
  g = conv_[1].backward(shuffle_.backward(act_[1].backward(g)));
  return conv_[0].backward(shuffle_.backward(act_[0].backward(g)));
}

// ---------------------------------------------------------------- Network

template <typename T>
Network<T>::Network(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Initializer init(seed);
  extractor_ = FeatureExtractor<T>(store_, init, cfg_);
  encoder_ = Encoder<T>(store_, init, cfg_);
  bottleneck_tu_ = TemporalUpsample<T>(store_, init, "tu.bottleneck", cfg_.channels,
                                       cfg_.clip_length);
  if (cfg_.tu_residual_skip)
    skip_tu_ = std::make_unique<TemporalUpsample<T>>(store_, init, "tu.skip", cfg_.channels,
                                                     cfg_.clip_length);
  decoder_ = Decoder<T>(store_, init, cfg_, skip_tu_.get());
  head_ = OutputHead<T>(store_, init, cfg_);
}

template <typename T>
Tensor<T> Network<T>::temporal_upsample(const Tensor<T>& e, TuRole which, Mode mode) {
  if (which == TuRole::kBottleneck) return bottleneck_tu_.forward(e, mode);
  if (!skip_tu_) throw ConfigError("temporal-upsampling skip is disabled in this configuration");
  return skip_tu_->forward(e, mode);
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& keyframes, Mode mode) {
  const bool single = keyframes.rank() == 4;
  const FeatureDims d = FeatureDims::of(keyframes.shape());
  if (d.frames != 3 || d.height != cfg_.height || d.width != cfg_.width ||
      d.channels != cfg_.input_channels) {
    throw ShapeError("network input must be (B, 3, " + std::to_string(cfg_.height) + ", " +
                     std::to_string(cfg_.width) + ", " + std::to_string(cfg_.input_channels) +
                     "), got " + shape_string(keyframes.shape()));
  }
  Tensor<T> x = keyframes.reshaped(d.shape5());
  Tensor<T> f = extractor_.forward(x, mode);
  enc_ = encoder_.forward(f, mode);
  Tensor<T> q0 = bottleneck_tu_.forward(enc_.e[3], mode);
  prototype_ = assemble_prototype(enc_.e[3], q0);
  d0_ = decoder_.forward(enc_.fe, prototype_, mode);
  Tensor<T> out = head_.forward(d0_, mode);
  input_shape_ = keyframes.shape();
  if (single) out.reshape({cfg_.clip_length, cfg_.height, cfg_.width, 3});
  return out;
}

template <typename T>
Tensor<T> Network<T>::backward(const Tensor<T>& dy) {
  const FeatureDims in = FeatureDims::of(input_shape_);
  Tensor<T> g = head_.backward(dy.reshaped(d0_.shape().size() == 5
                                               ? Shape{in.batch, cfg_.clip_length, cfg_.height,
                                                       cfg_.width, 3}
                                               : dy.shape()));
  std::array<Tensor<T>, 4> dfe;
  for (std::size_t n = 0; n < 4; ++n) dfe[n] = Tensor<T>(enc_.fe[n].shape());
  Tensor<T> dproto = decoder_.backward(g, dfe);
  Shape q_shape = enc_.e[3].shape();
  q_shape[1] = cfg_.missing_frames();
  auto [dk, dq0] = split_prototype(dproto, enc_.e[3].shape(), q_shape);
  add_inplace(dfe[3], dk);
  add_inplace(dfe[3], bottleneck_tu_.backward(dq0));
  Tensor<T> df = encoder_.backward(std::move(dfe));
  return extractor_.backward(df).reshaped(input_shape_);
}

template <typename T>
void Network<T>::set_capture_attention(bool on) {
  if (!cfg_.cross_attention_skip) return;
  for (auto& stage : decoder_.stages) stage.back().cross_attn.set_capture(on);
}

template <typename T>
const DecoderBlock<T>* Network<T>::attention_block(std::size_t stage) const {
  if (!cfg_.cross_attention_skip || stage > 3) return nullptr;
  return &decoder_.stages[stage].back();
}

#define KEYRESTORE_INSTANTIATE(T)                                                              \
  template Tensor<T> extract_keyframe_stack<T>(const Tensor<T>&);                             \
  template Tensor<T> assemble_prototype<T>(const Tensor<T>&, const Tensor<T>&);               \
  template std::pair<Tensor<T>, Tensor<T>> split_prototype<T>(const Tensor<T>&, const Shape&, \
                                                              const Shape&);                  \
  template class TemporalUpsample<T>;                                                         \
  template class FeatureExtractor<T>;                                                         \
  template class Encoder<T>;                                                                  \
  template class Decoder<T>;                                                                  \
  template class OutputHead<T>;                                                               \
  template class Network<T>;

KEYRESTORE_INSTANTIATE(float)
KEYRESTORE_INSTANTIATE(double)
#undef KEYRESTORE_INSTANTIATE

}  // namespace keyrestore
