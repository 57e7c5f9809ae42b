#include "keyrestore/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace keyrestore {

std::vector<double> frame_mse(const Tensor<float>& restored, const Tensor<float>& real) {
  require_same_shape(restored, real, "frame_mse");
  if (restored.rank() != 4) throw ShapeError("frame_mse expects (T, H, W, c) clips");
  const std::size_t frames = restored.dim(0);
  const std::size_t k = restored.size() / frames;
  std::vector<double> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const float* a = restored.data() + t * k;
    const float* b = real.data() + t * k;
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      s += d * d;
    }
    out[t] = s / static_cast<double>(k);
  }
  return out;
}

WorstFrame select_worst_frame(const Tensor<float>& restored, const Tensor<float>& real) {
  const auto mse = frame_mse(restored, real);
  WorstFrame w;
  w.mse = mse.empty() ? 0.0 : mse[0];
  for (std::size_t t = 1; t < mse.size(); ++t)
    if (mse[t] > w.mse) w = {t, mse[t]};
  return w;
}

double psnr_from(double peak, double mse) {
  return 10.0 * std::log10(peak * peak / std::max(mse, kMseFloor));
}

double psnr(const Tensor<float>& restored_frame, const Tensor<float>& real_frame) {
  require_same_shape(restored_frame, real_frame, "psnr");
  double s = 0.0, peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < restored_frame.size(); ++i) {
    const double a = restored_frame[i], d = a - static_cast<double>(real_frame[i]);
    s += d * d;
    peak = std::max(peak, a);
  }
  return psnr_from(peak, s / static_cast<double>(restored_frame.size()));
}

std::vector<UnitSpan> unit_spans(std::size_t frame_count, std::size_t clip_length) {
  if (clip_length == 0) throw ConfigError("unit length must be positive");
  if (frame_count < clip_length)
    throw ShapeError("video has " + std::to_string(frame_count) + " frames, fewer than one " +
                     std::to_string(clip_length) + "-frame unit");
  std::vector<UnitSpan> spans;
  std::size_t start = 0;
  for (; start + clip_length <= frame_count; start += clip_length)
    spans.push_back({start, clip_length});
  if (start < frame_count) spans.push_back({frame_count - clip_length, clip_length});
  return spans;
}

ScoredUnit score_unit(const Tensor<float>& restored, const Tensor<float>& real, UnitSpan span) {
  if (restored.rank() != 4 || restored.dim(0) != span.length)
    throw ShapeError("restored unit does not match its span length");
  const WorstFrame w = select_worst_frame(restored, real);
  const std::size_t k = restored.size() / restored.dim(0);
  const float* frame = restored.data() + w.index * k;
  const double peak = *std::max_element(frame, frame + k);
  return {span, psnr_from(peak, w.mse)};
}

namespace {

void normalize(std::vector<double>& scores, const std::vector<double>& psnr, double lo, double hi) {
  scores.assign(psnr.size(), 0.0);
  if (!(hi > lo)) return;
  for (std::size_t t = 0; t < psnr.size(); ++t) scores[t] = 1.0 - (psnr[t] - lo) / (hi - lo);
}

}  // namespace

AnomalyScoreSeries score_video(const std::string& video_id, std::size_t frame_count,
                               const std::vector<ScoredUnit>& units,
                               std::optional<std::vector<int>> labels) {
  AnomalyScoreSeries s;
  s.video_id = video_id;
  s.psnr.assign(frame_count, std::numeric_limits<double>::quiet_NaN());
  for (const auto& u : units) {
    if (u.span.start + u.span.length > frame_count)
      throw ShapeError("unit span exceeds video " + video_id);
    for (std::size_t t = u.span.start; t < u.span.start + u.span.length; ++t)
      s.psnr[t] = std::isnan(s.psnr[t]) ? u.psnr : std::min(s.psnr[t], u.psnr);
  }
  for (std::size_t t = 0; t < frame_count; ++t)
    if (std::isnan(s.psnr[t]))
      throw ShapeError("frame " + std::to_string(t) + " of video " + video_id +
                       " is not covered by any unit");
  if (labels && labels->size() != frame_count)
    throw ShapeError("video " + video_id + " has " + std::to_string(labels->size()) +
                     " labels for " + std::to_string(frame_count) + " frames");
  const auto [lo, hi] = std::minmax_element(s.psnr.begin(), s.psnr.end());
  if (frame_count) normalize(s.scores, s.psnr, *lo, *hi);
  s.labels = std::move(labels);
  return s;
}

void normalize_globally(std::vector<AnomalyScoreSeries>& series) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : series)
    for (double p : s.psnr) lo = std::min(lo, p), hi = std::max(hi, p);
  for (auto& s : series) normalize(s.scores, s.psnr, lo, hi);
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: score/label count mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of average ranks of the positives.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum += avg_rank, ++pos;
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0) throw ShapeError("AUC undefined: no positive (anomalous) frames");
  if (neg == 0) throw ShapeError("AUC undefined: no negative (normal) frames");
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

double frame_auc(const std::vector<AnomalyScoreSeries>& series) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : series) {
    if (!s.labels) throw ShapeError("video " + s.video_id + " has no labels");
    if (s.labels->size() != s.scores.size())
      throw ShapeError("video " + s.video_id + " label count does not match score count");
    scores.insert(scores.end(), s.scores.begin(), s.scores.end());
    labels.insert(labels.end(), s.labels->begin(), s.labels->end());
  }
  return roc_auc(scores, labels);
}

void write_score_csv(const std::filesystem::path& path, const AnomalyScoreSeries& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (series.labels ? "frame_index,psnr,score,label\n" : "frame_index,psnr,score\n");
  char buf[96];
  for (std::size_t t = 0; t < series.scores.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g", t, series.psnr[t], series.scores[t]);
    out << buf;
    if (series.labels) out << ',' << (*series.labels)[t];
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

AnomalyScoreSeries read_score_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  bool labelled;
  if (line == "frame_index,psnr,score,label") labelled = true;
  else if (line == "frame_index,psnr,score") labelled = false;
  else throw IoError(path.string() + ": unexpected header '" + line + "'");
  AnomalyScoreSeries s;
  s.video_id = path.stem().string();
  std::vector<int> labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    std::stringstream ss(line);
    std::string f[4];
    std::size_t n = 0;
    while (n < 4 && std::getline(ss, f[n], ',')) ++n;
    if (n != (labelled ? 4u : 3u))
      throw IoError(path.string() + ": malformed row " + std::to_string(row));
    try {
      if (std::stoul(f[0]) != s.scores.size())
        throw IoError(path.string() + ": frame_index out of order at row " + std::to_string(row));
      s.psnr.push_back(std::stod(f[1]));
      s.scores.push_back(std::stod(f[2]));
      if (labelled) labels.push_back(std::stoi(f[3]));
    } catch (const std::logic_error&) {
      throw IoError(path.string() + ": unparsable value at row " + std::to_string(row));
    }
  }
  if (labelled) s.labels = std::move(labels);
  return s;
}

}  // namespace keyrestore
