#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "keyrestore/tensor.hpp"

namespace keyrestore {

inline constexpr double kMseFloor = 1e-10;

struct WorstFrame {
  std::size_t index = 0;
  double mse = 0.0;
};

/// Mean squared error of every frame of a (T, H, W, c) pair.
std::vector<double> frame_mse(const Tensor<float>& restored, const Tensor<float>& real);

/// Frame with the largest MSE; ties go to the smallest index.
WorstFrame select_worst_frame(const Tensor<float>& restored, const Tensor<float>& real);

/// 10 log10(max^2 / max(mse, floor)), where max is the restored frame's own
/// peak pixel value.
double psnr(const Tensor<float>& restored_frame, const Tensor<float>& real_frame);
double psnr_from(double peak, double mse);

/// A processing unit: frames [start, start + length) of a video.
struct UnitSpan {
  std::size_t start = 0;
  std::size_t length = 0;
  bool operator==(const UnitSpan&) const = default;
};

/// Consecutive non-overlapping units of clip_length frames. When the video
/// length is not a multiple, one more unit is aligned to the last frame.
std::vector<UnitSpan> unit_spans(std::size_t frame_count, std::size_t clip_length);

struct ScoredUnit {
  UnitSpan span;
  double psnr = 0.0;
};

/// PSNR of a restored unit at its worst frame.
ScoredUnit score_unit(const Tensor<float>& restored, const Tensor<float>& real, UnitSpan span);

struct AnomalyScoreSeries {
  std::string video_id;
  std::vector<double> psnr;    // per frame, after overlap resolution
  std::vector<double> scores;  // per frame in [0, 1]; higher = more anomalous
  std::optional<std::vector<int>> labels;
};

/// Spreads unit PSNRs over their frames (overlaps keep the minimum) and
/// min-max normalises within the video: S = 1 - (p - min) / (max - min).
/// A video whose PSNRs are all equal scores 0 everywhere.
AnomalyScoreSeries score_video(const std::string& video_id, std::size_t frame_count,
                               const std::vector<ScoredUnit>& units,
                               std::optional<std::vector<int>> labels = std::nullopt);

/// Alternative normalisation using the min/max over every frame of every
/// series instead of per video. Rewrites scores in place.
void normalize_globally(std::vector<AnomalyScoreSeries>& series);

/// Frame-level ROC AUC over the concatenation of all series
/// (Mann-Whitney; ties count 1/2).
double frame_auc(const std::vector<AnomalyScoreSeries>& series);
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// CSV with header frame_index,psnr,score[,label].
void write_score_csv(const std::filesystem::path& path, const AnomalyScoreSeries& series);
AnomalyScoreSeries read_score_csv(const std::filesystem::path& path);

}  // namespace keyrestore
