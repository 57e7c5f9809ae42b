#include "keyrestore/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace keyrestore {

std::vector<AnomalyScoreSeries> score_split(Network<float>& net, const DatasetManifest& manifest,
                                            bool verbose) {
  const ModelConfig& cfg = net.config();
  const std::size_t T = cfg.clip_length;
  std::vector<AnomalyScoreSeries> out;
  for (const auto& entry : manifest.videos) {
    const Tensor<float> video = load_video(entry, cfg.height, cfg.width);
    const std::size_t L = video.dim(0), frame = video.size() / L;
    std::optional<std::vector<int>> labels;
    if (entry.label_file) labels = read_labels(*entry.label_file);
    std::vector<ScoredUnit> units;
    for (const UnitSpan& span : unit_spans(L, T)) {
      Tensor<float> clip({T, cfg.height, cfg.width, 3},
                         std::vector<float>(video.data() + span.start * frame,
                                            video.data() + (span.start + T) * frame));
      const Tensor<float> restored = net.restore(extract_keyframe_stack(clip));
      units.push_back(score_unit(restored, clip, span));
    }
    out.push_back(score_video(entry.video_id, L, units, std::move(labels)));
    if (verbose) std::cerr << "scored " << entry.video_id << " (" << units.size() << " units)\n";
  }
  return out;
}

namespace {

struct Canvas {
  std::size_t w, h;
  std::vector<std::uint8_t> px;
  void set(std::ptrdiff_t x, std::ptrdiff_t y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(w) || y >= static_cast<std::ptrdiff_t>(h)) return;
    std::copy(c.begin(), c.end(), px.begin() + (static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3);
  }
  void line(std::ptrdiff_t x0, std::ptrdiff_t y0, std::ptrdiff_t x1, std::ptrdiff_t y1, std::array<std::uint8_t, 3> c) {
    const std::ptrdiff_t dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const std::ptrdiff_t sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    std::ptrdiff_t err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      set(x0, y0 + 1, c);  // 2 px stroke
      if (x0 == x1 && y0 == y1) break;
      const std::ptrdiff_t e2 = 2 * err;
      if (e2 >= dy) err += dy, x0 += sx;
      if (e2 <= dx) err += dx, y0 += sy;
    }
  }
};

}  // namespace

PlotImage render_score_plot(const AnomalyScoreSeries& series, std::size_t width, std::size_t height) {
  constexpr std::ptrdiff_t left = 36, right = 12, top = 12, bottom = 24;
  if (width < 100 || height < 80) throw ConfigError("plot must be at least 100x80 pixels");
  Canvas c{width, height, std::vector<std::uint8_t>(width * height * 3, 255)};
  const std::ptrdiff_t x0 = left, x1 = static_cast<std::ptrdiff_t>(width) - right;
  const std::ptrdiff_t y0 = top, y1 = static_cast<std::ptrdiff_t>(height) - bottom;
  const std::size_t n = series.scores.size();
  auto px = [&](double t) {
    const double span = n > 1 ? static_cast<double>(n - 1) : 1.0;
    return x0 + static_cast<std::ptrdiff_t>(std::lround(t / span * static_cast<double>(x1 - x0)));
  };
  auto py = [&](double s) {
    return y1 - static_cast<std::ptrdiff_t>(std::lround(std::clamp(s, 0.0, 1.0) * static_cast<double>(y1 - y0)));
  };
  if (series.labels && n) {
    const double half = n > 1 ? 0.5 : 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      if (!(*series.labels)[t]) continue;
      const std::ptrdiff_t a = std::max(x0, px(static_cast<double>(t) - half));
      const std::ptrdiff_t b = std::min(x1, px(static_cast<double>(t) + half));
      for (std::ptrdiff_t x = a; x <= b; ++x)
        for (std::ptrdiff_t y = y0; y <= y1; ++y) c.set(x, y, {255, 205, 205});
    }
  }
  for (double g : {0.25, 0.5, 0.75}) c.line(x0, py(g), x1, py(g), {225, 225, 225});
  c.line(x0, y0, x0, y1, {0, 0, 0});
  c.line(x0, y1, x1, y1, {0, 0, 0});
  for (double g : {0.0, 0.5, 1.0}) c.line(x0 - 6, py(g), x0, py(g), {0, 0, 0});
  for (std::size_t t = 1; t < n; ++t)
    c.line(px(static_cast<double>(t - 1)), py(series.scores[t - 1]), px(static_cast<double>(t)),
           py(series.scores[t]), {20, 60, 200});
  return {width, height, std::move(c.px)};
}

AttentionDump dump_attention(Network<float>& net, const Tensor<float>& keyframes) {
  const ModelConfig& cfg = net.config();
  net.set_capture_attention(true);
  (void)net.restore(keyframes);
  net.set_capture_attention(false);
  AttentionDump dump;
  for (std::size_t n = 0; n < 4; ++n) {
    const DecoderBlock<float>* blk = net.attention_block(n);
    if (!blk) break;
    const std::size_t h = cfg.feature_height() >> n, w = cfg.feature_width() >> n;
    const std::size_t eff = blk->window_used(), shift = blk->shift_used();
    const Tensor<float>& p = blk->cross_attn.probabilities();  // (nW, heads, Lq, Lk)
    const std::size_t nw = p.dim(0), heads = p.dim(1), lq = p.dim(2), lk = p.dim(3);
    const std::size_t cols = w / eff;
    Tensor<float> map({h, w});
    for (std::size_t win = 0; win < nw; ++win)
      for (std::size_t k = 0; k < lk; ++k) {
        double s = 0.0;
        for (std::size_t hd = 0; hd < heads; ++hd)
          for (std::size_t q = 0; q < lq; ++q) s += p[((win * heads + hd) * lq + q) * lk + k];
        const std::size_t within = k % (eff * eff);
        const std::size_t yr = (win / cols) * eff + within / eff, xr = (win % cols) * eff + within % eff;
        const std::size_t y = (yr + shift) % h, x = (xr + shift) % w;
        map[y * w + x] += static_cast<float>(s / static_cast<double>(heads * lq));
      }
    dump.attention[n] = std::move(map);
  }
  if (cfg.tu_residual_skip) {
    const auto& skips = net.last_skip_features();
    for (std::size_t n = 0; n < 3; ++n) {
      const Tensor<float>& e = skips[n];
      const FeatureDims d = FeatureDims::of(e.shape());
      Tensor<float> map({d.height, d.width});
      const double norm = 1.0 / static_cast<double>(d.frames * d.channels);
      for (std::size_t f = 0; f < d.frames; ++f)
        for (std::size_t i = 0; i < d.pixels(); ++i) {
          double s = 0.0;
          const float* v = e.data() + (f * d.pixels() + i) * d.channels;
          for (std::size_t ch = 0; ch < d.channels; ++ch) s += v[ch];
          map[i] += static_cast<float>(s * norm);
        }
      dump.skip_features[n] = std::move(map);
    }
  }
  return dump;
}

Tensor<float> to_display(const Tensor<float>& map) {
  if (map.rank() != 2) throw ShapeError("to_display expects an (h, w) map");
  Tensor<float> out({map.dim(0), map.dim(1), 1});
  const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
  const float range = *hi - *lo;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = range > 0 ? (map[i] - *lo) / range : 0.0f;
  return out;
}

}  // namespace keyrestore
