#include "keyrestore/attention.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "keyrestore/kernels.hpp"

namespace keyrestore {

std::size_t effective_window(std::size_t window, std::size_t h, std::size_t w) {
  if (window == 0) throw ShapeError("window size must be positive");
  const std::size_t eff = std::min({window, h, w});
  if (h % eff != 0) {
    throw ShapeError("height " + std::to_string(h) + " not divisible by window " +
                     std::to_string(eff));
  }
  if (w % eff != 0) {
    throw ShapeError("width " + std::to_string(w) + " not divisible by window " +
                     std::to_string(eff));
  }
  return eff;
}

std::size_t effective_shift(std::size_t window, std::size_t h, std::size_t w) {
  const std::size_t eff = effective_window(window, h, w);
  return eff < std::min(h, w) ? eff / 2 : 0;
}

template <typename T>
WindowBatch<T> partition_windows(const Tensor<T>& feat, std::size_t window) {
  const FeatureDims d = FeatureDims::of(feat.shape());
  if (window == 0) throw ShapeError("window size must be positive");
  if (d.height % window != 0) {
    throw ShapeError("partition_windows: height " + std::to_string(d.height) +
                     " not divisible by window " + std::to_string(window));
  }
  if (d.width % window != 0) {
    throw ShapeError("partition_windows: width " + std::to_string(d.width) +
                     " not divisible by window " + std::to_string(window));
  }
  WindowBatch<T> wb;
  wb.rows = d.height / window;
  wb.cols = d.width / window;
  wb.window = window;
  wb.frames = d.frames;
  wb.batch = d.batch;
  const std::size_t nw = d.batch * wb.rows * wb.cols;
  const std::size_t tokens = d.frames * window * window;
  const std::size_t c = d.channels;
  wb.data = Tensor<T>({nw, tokens, c});
  const T* src = feat.data();
  T* dst = wb.data.data();
#pragma omp parallel for schedule(static)
  for (std::size_t win = 0; win < nw; ++win) {
    const std::size_t b = win / (wb.rows * wb.cols);
    const std::size_t wr = (win / wb.cols) % wb.rows;
    const std::size_t wc = win % wb.cols;
    for (std::size_t f = 0; f < d.frames; ++f)
      for (std::size_t r = 0; r < window; ++r) {
        const std::size_t y = wr * window + r;
        const std::size_t x0 = wc * window;
        const T* row = src + (((b * d.frames + f) * d.height + y) * d.width + x0) * c;
        T* out = dst + (win * tokens + (f * window + r) * window) * c;
        std::copy(row, row + window * c, out);
      }
  }
  return wb;
}

template <typename T>
Tensor<T> reverse_windows(const WindowBatch<T>& wb, const FeatureDims& d) {
  const std::size_t m = wb.window;
  if (m == 0 || d.height != wb.rows * m || d.width != wb.cols * m || d.frames != wb.frames ||
      d.batch != wb.batch || wb.data.rank() != 3 || wb.num_windows() != d.batch * wb.rows * wb.cols ||
      wb.tokens() != d.frames * m * m || wb.channels() != d.channels) {
    throw ShapeError("reverse_windows: window batch " + shape_string(wb.data.shape()) +
                     " inconsistent with feature dims " + shape_string(d.shape5()) +
                     " and window " + std::to_string(m));
  }
  Tensor<T> out(d.shape5());
  const std::size_t nw = wb.num_windows();
  const std::size_t tokens = wb.tokens();
  const std::size_t c = d.channels;
  const T* src = wb.data.data();
  T* dst = out.data();
#pragma omp parallel for schedule(static)
  for (std::size_t win = 0; win < nw; ++win) {
    const std::size_t b = win / (wb.rows * wb.cols);
    const std::size_t wr = (win / wb.cols) % wb.rows;
    const std::size_t wc = win % wb.cols;
    for (std::size_t f = 0; f < d.frames; ++f)
      for (std::size_t r = 0; r < m; ++r) {
        const std::size_t y = wr * m + r;
        const T* in = src + (win * tokens + (f * m + r) * m) * c;
        T* row = dst + (((b * d.frames + f) * d.height + y) * d.width + wc * m) * c;
        std::copy(in, in + m * c, row);
      }
  }
  return out;
}

template <typename T>
Tensor<T> reverse_windows(const WindowBatch<T>& wb, std::size_t frames, std::size_t h,
                          std::size_t w, std::size_t c) {
  if (wb.batch != 1) throw ShapeError("rank-4 reverse_windows needs batch 1");
  return reverse_windows(wb, FeatureDims{1, frames, h, w, c}).reshaped({frames, h, w, c});
}

template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& feat, std::ptrdiff_t s) {
  const FeatureDims d = FeatureDims::of(feat.shape());
  const auto h = static_cast<std::ptrdiff_t>(d.height);
  const auto w = static_cast<std::ptrdiff_t>(d.width);
  if (s == 0) return feat;
  if (std::abs(s) >= std::min(h, w)) {
    throw ShapeError("cyclic_shift: |shift| " + std::to_string(s) + " must be below min(h, w)");
  }
  Tensor<T> out(feat.shape());
  const std::size_t c = d.channels;
  const std::size_t images = d.images();
#pragma omp parallel for schedule(static)
  for (std::size_t img = 0; img < images; ++img)
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      const std::ptrdiff_t sy = ((y + s) % h + h) % h;
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        const std::ptrdiff_t sx = ((x + s) % w + w) % w;
        const T* src = feat.data() + ((img * d.height + sy) * d.width + sx) * c;
        T* dst = out.data() + ((img * d.height + y) * d.width + x) * c;
        std::copy(src, src + c, dst);
      }
    }
  return out;
}

template <typename T>
Tensor<T> shifted_window_mask(std::size_t h, std::size_t w, std::size_t window, std::size_t shift,
                              std::size_t frames_q, std::size_t frames_kv) {
  const std::size_t rows = h / window, cols = w / window;
  auto region = [&](std::size_t pos, std::size_t extent) -> int {
    if (pos < extent - window) return 0;
    if (pos < extent - shift) return 1;
    return 2;
  };
  const std::size_t m2 = window * window;
  const std::size_t lq = frames_q * m2, lk = frames_kv * m2;
  Tensor<T> mask({rows * cols, lq, lk});
  std::vector<int> label(m2);
  for (std::size_t wr = 0; wr < rows; ++wr)
    for (std::size_t wc = 0; wc < cols; ++wc) {
      for (std::size_t r = 0; r < window; ++r)
        for (std::size_t q = 0; q < window; ++q)
          label[r * window + q] = 3 * region(wr * window + r, h) + region(wc * window + q, w);
      T* m = mask.data() + (wr * cols + wc) * lq * lk;
      for (std::size_t i = 0; i < lq; ++i)
        for (std::size_t j = 0; j < lk; ++j)
          m[i * lk + j] = label[i % m2] == label[j % m2] ? T{0} : static_cast<T>(kMaskValue);
    }
  return mask;
}

// ---------------------------------------------------------------- WindowAttention

template <typename T>
WindowAttention<T>::WindowAttention(ParameterStore<T>& store, Initializer& init,
                                    const std::string& name, std::size_t channels,
                                    std::size_t heads)
    : wq(store, init, name + ".q", channels, channels),
      wk(store, init, name + ".k", channels, channels),
      wv(store, init, name + ".v", channels, channels),
      wo(store, init, name + ".proj", channels, channels),
      channels_(channels),
      heads_(heads) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("channels " + std::to_string(channels) + " not divisible by head count " +
                      std::to_string(heads));
  }
}

template <typename T>
Tensor<T> WindowAttention<T>::forward(const Tensor<T>& xq, const Tensor<T>& xkv,
                                      const Tensor<T>* mask, Mode mode) {
  if (xq.rank() != 3 || xkv.rank() != 3) throw ShapeError("window attention expects rank-3 inputs");
  if (xq.dim(2) != channels_ || xkv.dim(2) != channels_) {
    throw ShapeError("window attention channel mismatch: q " + shape_string(xq.shape()) + ", kv " +
                     shape_string(xkv.shape()) + ", expected c=" + std::to_string(channels_));
  }
  if (xq.dim(0) != xkv.dim(0)) throw ShapeError("window attention: window count mismatch");
  const std::size_t nw = xq.dim(0), lq = xq.dim(1), lk = xkv.dim(1), c = channels_;
  if (mask && (mask->rank() != 3 || mask->dim(1) != lq || mask->dim(2) != lk ||
               mask->dim(0) == 0 || nw % mask->dim(0) != 0)) {
    throw ShapeError("window attention: mask shape " + shape_string(mask->shape()) +
                     " incompatible with " + std::to_string(nw) + " windows of " +
                     std::to_string(lq) + "x" + std::to_string(lk));
  }
  const std::size_t d = c / heads_;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  Tensor<T> q = wq.forward(xq, mode);
  Tensor<T> k = wk.forward(xkv, mode);
  Tensor<T> v = wv.forward(xkv, mode);
  Tensor<T> probs({nw, heads_, lq, lk});
  Tensor<T> out({nw, lq, c});
  const std::size_t nmask = mask ? mask->dim(0) : 1;
#pragma omp parallel for schedule(static)
  for (std::size_t win = 0; win < nw; ++win) {
    for (std::size_t h = 0; h < heads_; ++h) {
      T* p = probs.data() + (win * heads_ + h) * lq * lk;
      const T* qh = q.data() + win * lq * c + h * d;
      const T* kh = k.data() + win * lk * c + h * d;
      const T* vh = v.data() + win * lk * c + h * d;
      kernels::gemm<T>(false, true, lq, lk, d, scale, qh, c, kh, c, T{0}, p, lk);
      if (mask) {
        const T* m = mask->data() + (win % nmask) * lq * lk;
        for (std::size_t i = 0; i < lq * lk; ++i) p[i] += m[i];
      }
      kernels::softmax_rows(p, lq, lk);
      kernels::gemm<T>(false, false, lq, d, lk, T{1}, p, lk, vh, c, T{0},
                       out.data() + win * lq * c + h * d, c);
    }
  }
  Tensor<T> y = wo.forward(out, mode);
  if (mode == Mode::kTrain) {
    q_ = std::move(q);
    k_ = std::move(k);
    v_ = std::move(v);
  }
  if (mode == Mode::kTrain || capture_) probs_ = std::move(probs);
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> WindowAttention<T>::backward(const Tensor<T>& dy) {
  const std::size_t nw = q_.dim(0), lq = q_.dim(1), lk = k_.dim(1), c = channels_;
  const std::size_t d = c / heads_;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  Tensor<T> dout = wo.backward(dy);
  Tensor<T> dq(q_.shape()), dk(k_.shape()), dv(v_.shape());
#pragma omp parallel
  {
    std::vector<T> dp(lq * lk);
#pragma omp for schedule(static)
    for (std::size_t win = 0; win < nw; ++win) {
      for (std::size_t h = 0; h < heads_; ++h) {
        const T* p = probs_.data() + (win * heads_ + h) * lq * lk;
        const T* qh = q_.data() + win * lq * c + h * d;
        const T* kh = k_.data() + win * lk * c + h * d;
        const T* vh = v_.data() + win * lk * c + h * d;
        const T* doh = dout.data() + win * lq * c + h * d;
        // dP = dO V^T, dV = P^T dO
        kernels::gemm<T>(false, true, lq, lk, d, T{1}, doh, c, vh, c, T{0}, dp.data(), lk);
        kernels::gemm<T>(true, false, lk, d, lq, T{1}, p, lk, doh, c, T{0},
                         dv.data() + win * lk * c + h * d, c);
        // softmax adjoint, row by row
        for (std::size_t i = 0; i < lq; ++i) {
          T dot{0};
          for (std::size_t j = 0; j < lk; ++j) dot += dp[i * lk + j] * p[i * lk + j];
          for (std::size_t j = 0; j < lk; ++j) dp[i * lk + j] = p[i * lk + j] * (dp[i * lk + j] - dot);
        }
        kernels::gemm<T>(false, false, lq, d, lk, scale, dp.data(), lk, kh, c, T{0},
                         dq.data() + win * lq * c + h * d, c);
        kernels::gemm<T>(true, false, lk, d, lq, scale, dp.data(), lk, qh, c, T{0},
                         dk.data() + win * lk * c + h * d, c);
      }
    }
  }
  Tensor<T> dxq = wq.backward(dq);
  Tensor<T> dxkv = wk.backward(dk);
  add_inplace(dxkv, wv.backward(dv));
  return {std::move(dxq), std::move(dxkv)};
}

template <typename T>
WindowBatch<T> window_attention(const WindowBatch<T>& q_windows, const WindowBatch<T>& kv_windows,
                                WindowAttention<T>& params, const Tensor<T>* mask) {
  if (q_windows.num_windows() != kv_windows.num_windows()) {
    throw ShapeError("window_attention: query and key/value window counts differ");
  }
  WindowBatch<T> out = q_windows;
  out.data = params.forward(q_windows.data, kv_windows.data, mask, Mode::kInfer);
  return out;
}

// ---------------------------------------------------------------- EncoderBlock

template <typename T>
EncoderBlock<T>::EncoderBlock(ParameterStore<T>& store, Initializer& init, const std::string& name,
                              const BlockOptions& opts)
    : norm1(store, name + ".norm1", opts.channels),
      norm2(store, name + ".norm2", opts.channels),
      attn(store, init, name + ".attn", opts.channels, opts.heads),
      mlp(store, init, name + ".mlp", opts.channels, opts.channels * opts.mlp_ratio),
      opts_(opts) {}

template <typename T>
Tensor<T> EncoderBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  const FeatureDims d = FeatureDims::of(x.shape());
  if (d.channels != opts_.channels) throw ShapeError("encoder block channel mismatch");
  const std::size_t eff = effective_window(opts_.window, d.height, d.width);
  const std::size_t shift = opts_.shifted ? effective_shift(opts_.window, d.height, d.width) : 0;
  const auto s = static_cast<std::ptrdiff_t>(shift);

  Tensor<T> t = cyclic_shift(norm1.forward(x, mode), s);
  WindowBatch<T> wb = partition_windows(t, eff);
  std::optional<Tensor<T>> mask;
  if (shift) mask = shifted_window_mask<T>(d.height, d.width, eff, shift, d.frames, d.frames);
  wb.data = attn.forward(wb.data, wb.data, mask ? &*mask : nullptr, mode);
  Tensor<T> x1 = cyclic_shift(reverse_windows(wb, d), -s).reshaped(x.shape());
  add_inplace(x1, x);
  Tensor<T> out = mlp.forward(norm2.forward(x1, mode), mode);
  add_inplace(out, x1);
  if (mode == Mode::kTrain) {
    dims_ = d;
    eff_ = eff;
    shift_ = shift;
  }
  return out;
}

template <typename T>
Tensor<T> EncoderBlock<T>::backward(const Tensor<T>& dy) {
  const auto s = static_cast<std::ptrdiff_t>(shift_);
  Tensor<T> dx1 = norm2.backward(mlp.backward(dy));
  add_inplace(dx1, dy);
  WindowBatch<T> wb = partition_windows(cyclic_shift(dx1, s), eff_);
  auto [dq, dkv] = attn.backward(wb.data);
  add_inplace(dq, dkv);
  wb.data = std::move(dq);
  Tensor<T> dx = norm1.backward(cyclic_shift(reverse_windows(wb, dims_), -s).reshaped(dy.shape()));
  add_inplace(dx, dx1);
  return dx;
}

// ---------------------------------------------------------------- DecoderBlock

template <typename T>
DecoderBlock<T>::DecoderBlock(ParameterStore<T>& store, Initializer& init, const std::string& name,
                              const BlockOptions& opts, bool cross_attention)
    : norm1(store, name + ".norm1", opts.channels),
      self_attn(store, init, name + ".self_attn", opts.channels, opts.heads),
      opts_(opts),
      cross_(cross_attention) {
  if (cross_) {
    norm2 = LayerNorm<T>(store, name + ".norm2", opts.channels);
    cross_attn = WindowAttention<T>(store, init, name + ".cross_attn", opts.channels, opts.heads);
  }
  norm3 = LayerNorm<T>(store, name + ".norm3", opts.channels);
  mlp = Mlp<T>(store, init, name + ".mlp", opts.channels, opts.channels * opts.mlp_ratio);
}

template <typename T>
Tensor<T> DecoderBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& enc, Mode mode) {
  const FeatureDims d = FeatureDims::of(x.shape());
  if (d.channels != opts_.channels) throw ShapeError("decoder block channel mismatch");
  const std::size_t eff = effective_window(opts_.window, d.height, d.width);
  const std::size_t shift = opts_.shifted ? effective_shift(opts_.window, d.height, d.width) : 0;
  const auto s = static_cast<std::ptrdiff_t>(shift);

  Tensor<T> t = cyclic_shift(norm1.forward(x, mode), s);
  WindowBatch<T> wb = partition_windows(t, eff);
  std::optional<Tensor<T>> mask;
  if (shift) mask = shifted_window_mask<T>(d.height, d.width, eff, shift, d.frames, d.frames);
  wb.data = self_attn.forward(wb.data, wb.data, mask ? &*mask : nullptr, mode);
  Tensor<T> x1 = cyclic_shift(reverse_windows(wb, d), -s).reshaped(x.shape());
  add_inplace(x1, x);

  Tensor<T> x2 = x1;
  FeatureDims ed;
  if (cross_) {
    ed = FeatureDims::of(enc.shape());
    if (ed.batch != d.batch || ed.height != d.height || ed.width != d.width ||
        ed.channels != d.channels) {
      throw ShapeError("decoder block: encoder features " + shape_string(enc.shape()) +
                       " do not align with decoder features " + shape_string(x.shape()));
    }
    WindowBatch<T> qw = partition_windows(cyclic_shift(norm2.forward(x1, mode), s), eff);
    WindowBatch<T> kvw = partition_windows(cyclic_shift(enc, s), eff);
    std::optional<Tensor<T>> cmask;
    if (shift) cmask = shifted_window_mask<T>(d.height, d.width, eff, shift, d.frames, ed.frames);
    qw.data = cross_attn.forward(qw.data, kvw.data, cmask ? &*cmask : nullptr, mode);
    Tensor<T> c = cyclic_shift(reverse_windows(qw, d), -s).reshaped(x.shape());
    add_inplace(x2, c);
  }
  Tensor<T> out = mlp.forward(norm3.forward(x2, mode), mode);
  add_inplace(out, x2);
  if (mode == Mode::kTrain) {
    dims_ = d;
    enc_dims_ = ed;
    enc_shape_ = enc.shape();
  }
  eff_ = eff;
  shift_ = shift;
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> DecoderBlock<T>::backward(const Tensor<T>& dy) {
  const auto s = static_cast<std::ptrdiff_t>(shift_);
  Tensor<T> dx2 = norm3.backward(mlp.backward(dy));
  add_inplace(dx2, dy);

  Tensor<T> dx1 = dx2;
  Tensor<T> denc;
  if (cross_) {
    WindowBatch<T> wb = partition_windows(cyclic_shift(dx2, s), eff_);
    auto [dq, dkv] = cross_attn.backward(wb.data);
    wb.data = std::move(dq);
    add_inplace(dx1, norm2.backward(cyclic_shift(reverse_windows(wb, dims_), -s).reshaped(dy.shape())));
    WindowBatch<T> kvw = wb;
    kvw.frames = enc_dims_.frames;
    kvw.data = std::move(dkv);
    denc = cyclic_shift(reverse_windows(kvw, enc_dims_), -s).reshaped(enc_shape_);
  }

  WindowBatch<T> wb = partition_windows(cyclic_shift(dx1, s), eff_);
  auto [dq, dkv] = self_attn.backward(wb.data);
  add_inplace(dq, dkv);
  wb.data = std::move(dq);
  Tensor<T> dx = norm1.backward(cyclic_shift(reverse_windows(wb, dims_), -s).reshaped(dy.shape()));
  add_inplace(dx, dx1);
  return {std::move(dx), std::move(denc)};
}

#define KEYRESTORE_INSTANTIATE(T)                                                              \
  template WindowBatch<T> partition_windows<T>(const Tensor<T>&, std::size_t);                \
  template Tensor<T> reverse_windows<T>(const WindowBatch<T>&, const FeatureDims&);           \
  template Tensor<T> reverse_windows<T>(const WindowBatch<T>&, std::size_t, std::size_t,      \
                                        std::size_t, std::size_t);                            \
  template Tensor<T> cyclic_shift<T>(const Tensor<T>&, std::ptrdiff_t);                       \
  template Tensor<T> shifted_window_mask<T>(std::size_t, std::size_t, std::size_t,            \
                                            std::size_t, std::size_t, std::size_t);           \
  template WindowBatch<T> window_attention<T>(const WindowBatch<T>&, const WindowBatch<T>&,   \
                                              WindowAttention<T>&, const Tensor<T>*);         \
  template class WindowAttention<T>;                                                          \
  template class EncoderBlock<T>;                                                             \
  template class DecoderBlock<T>;

KEYRESTORE_INSTANTIATE(float)
KEYRESTORE_INSTANTIATE(double)
#undef KEYRESTORE_INSTANTIATE

}  // namespace keyrestore
