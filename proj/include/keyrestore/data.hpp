#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "keyrestore/model.hpp"
#include "keyrestore/tensor.hpp"

namespace keyrestore {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- images

/// Decodes a PNG (any bit depth / colour type) to (H, W, 3) in [0, 1].
Tensor<float> read_png(const fs::path& path);

/// Encodes (H, W, 1) or (H, W, 3) values in [0, 1] as an 8-bit PNG.
/// Values are clamped and rounded.
void write_png(const fs::path& path, const Tensor<float>& image);

/// Raw 8-bit interleaved pixels, channels 1 or 3.
void write_png(const fs::path& path, const std::vector<std::uint8_t>& pixels, std::size_t height,
               std::size_t width, std::size_t channels);

/// Bilinear resize of an (H, W, c) image with half-pixel centres.
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width);

// ---------------------------------------------------------------- datasets

struct VideoEntry {
  std::string video_id;
  fs::path frame_directory;
  std::optional<fs::path> label_file;
  std::size_t frame_count = 0;  // 0 when unknown
};

struct DatasetManifest {
  std::string split;
  std::vector<VideoEntry> videos;
  std::size_t height = 0;  // target frame size
  std::size_t width = 0;

  /// Unique ids; for the test split, label files present when require_labels.
  void validate(bool require_labels = false) const;
};

/// Reads <root>/manifest.json when present, otherwise scans <root>/<split>/
/// for frame directories (labels picked up from <id>.labels files).
DatasetManifest load_manifest(const fs::path& root, const std::string& split, std::size_t height,
                              std::size_t width);

/// Frames of a video directory in filename order as (L, H, W, 3).
Tensor<float> load_video(const VideoEntry& entry, std::size_t height, std::size_t width);

/// One 0/1 per line.
std::vector<int> read_labels(const fs::path& path);
void write_labels(const fs::path& path, const std::vector<int>& labels);

/// Start frames 0, stride, 2*stride, ... with start + T <= L.
std::vector<std::size_t> clip_starts(std::size_t length, std::size_t clip_length,
                                     std::size_t stride);

/// Clips copied out of a (L, H, W, 3) video. Empty (with a warning on
/// stderr) when L < T.
std::vector<VideoClip> sample_training_clips(const Tensor<float>& video, std::size_t clip_length,
                                             std::size_t stride);

// ---------------------------------------------------------------- batches

struct Batch {
  Tensor<float> keyframes;  // (B, 3, H, W, 3)
  Tensor<float> targets;    // (B, T, H, W, 3)
};

/// Seeded, reshuffled-per-epoch stream over every (video, start) clip of a
/// set of loaded videos. Clips are materialised per batch.
class BatchIterator {
 public:
  BatchIterator(std::vector<Tensor<float>> videos, std::size_t clip_length, std::size_t batch_size,
                std::uint64_t seed, std::size_t stride = 1);

  std::size_t clip_count() const { return clips_.size(); }
  std::size_t batches_per_epoch() const;

  /// Shuffled clip order for an epoch; depends only on (seed, epoch).
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;

  /// Batch `index` of `epoch`; the last batch may be partial.
  Batch batch(std::size_t epoch, std::size_t index) const;

 private:
  std::vector<Tensor<float>> videos_;
  std::vector<std::pair<std::size_t, std::size_t>> clips_;  // (video, start)
  std::size_t clip_length_, batch_size_;
  std::uint64_t seed_;
};

/// Every batch of one epoch of a manifest's videos, in seeded order.
std::vector<Batch> iterate_batches(const DatasetManifest& manifest, std::size_t clip_length,
                                   std::size_t batch_size, std::uint64_t seed);

// ---------------------------------------------------------------- synthetic data

enum class AnomalyType { kSpeedJump, kTeleport, kShapeSwap };

std::string to_string(AnomalyType t);
AnomalyType parse_anomaly_type(const std::string& s);

struct AnomalySpan {
  std::size_t start = 0;
  std::size_t length = 0;
};

struct SyntheticSpec {
  std::uint64_t seed = 42;
  std::size_t num_train_videos = 8;
  std::size_t num_test_videos = 4;
  std::size_t frames_per_video = 90;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_shapes = 2, max_shapes = 3;
  double min_size = 5.0, max_size = 9.0;          // half-extent in pixels
  double min_speed = 1.0, max_speed = 2.5;        // pixels per frame
  std::vector<AnomalyType> anomaly_types = {AnomalyType::kSpeedJump, AnomalyType::kTeleport,
                                            AnomalyType::kShapeSwap};
  std::size_t min_anomaly_length = 18, max_anomaly_length = 27;
  /// Explicit span per test video; drawn from the seed when empty.
  std::vector<AnomalySpan> anomaly_spans;

  void validate() const;
};

/// Flat key=value file (same syntax as run configs); unknown keys are errors.
SyntheticSpec load_synthetic_spec(const fs::path& path);
void apply_synthetic_option(SyntheticSpec& spec, const std::string& key, const std::string& value);

struct GeneratedVideo {
  std::string split;
  std::string video_id;
  std::size_t frames = 0;
  std::optional<AnomalyType> anomaly;
  AnomalySpan span;
};

/// Renders one video as 8-bit RGB frames (L, H, W, 3) plus labels.
struct SyntheticVideo {
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
};
SyntheticVideo render_synthetic_video(const SyntheticSpec& spec, bool test, std::size_t index,
                                      std::optional<AnomalyType> anomaly, AnomalySpan span);

/// Writes <root>/<split>/<id>/frame_%06d.png, <root>/test/<id>.labels and
/// <root>/manifest.json. Identical specs give byte-identical trees.
std::vector<GeneratedVideo> generate_synthetic(const SyntheticSpec& spec, const fs::path& root);

}  // namespace keyrestore
