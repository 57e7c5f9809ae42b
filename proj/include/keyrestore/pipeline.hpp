#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "keyrestore/data.hpp"
#include "keyrestore/model.hpp"
#include "keyrestore/scoring.hpp"

namespace keyrestore {

/// Restores every processing unit of every video in the manifest and scores
/// the videos. Labels are attached when the manifest has label files.
std::vector<AnomalyScoreSeries> score_split(Network<float>& net, const DatasetManifest& manifest,
                                            bool verbose = false);

struct PlotImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};

/// Score curve over frame index on a fixed [0, 1] vertical range, with
/// labelled anomalous frames shaded.
PlotImage render_score_plot(const AnomalyScoreSeries& series, std::size_t width = 640,
                            std::size_t height = 240);

struct AttentionDump {
  /// Mean cross-attention weight received by each encoder position of
  /// decoder stages 0..3, shape (h_n, w_n). Empty when cross-attention is off.
  std::array<Tensor<float>, 4> attention;
  /// Channel- and frame-averaged TU residual features e^r_n for n = 0..2,
  /// shape (h_n, w_n). Empty when the TU skip is off.
  std::array<Tensor<float>, 3> skip_features;
};

/// Runs one inference pass on a (3, H, W, 3) keyframe stack and collects the
/// diagnostic maps.
AttentionDump dump_attention(Network<float>& net, const Tensor<float>& keyframes);

/// Min-max stretches an (h, w) map to [0, 1] as (h, w, 1) for writing.
Tensor<float> to_display(const Tensor<float>& map);

}  // namespace keyrestore
