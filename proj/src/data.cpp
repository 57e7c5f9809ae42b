#include "keyrestore/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "keyrestore/keyvalue.hpp"

namespace keyrestore {

using nlohmann::json;

// ---------------------------------------------------------------- images

Tensor<float> read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("cannot decode image " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode image " + path.string() + ": " + image.message);
  }
  Tensor<float> out({image.height, image.width, 3});
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = static_cast<float>(buf[i]) / 255.0f;
  return out;
}

void write_png(const fs::path& path, const std::vector<std::uint8_t>& pixels, std::size_t height,
               std::size_t width, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ShapeError("write_png supports 1 or 3 channels");
  if (pixels.size() != height * width * channels) throw ShapeError("write_png: pixel count mismatch");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr))
    throw IoError("cannot write image " + path.string() + ": " + image.message);
}

void write_png(const fs::path& path, const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("write_png expects (H, W, c), got " + shape_string(image.shape()));
  std::vector<std::uint8_t> px(image.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
  write_png(path, px, image.dim(0), image.dim(1), image.dim(2));
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width) {
  if (image.rank() != 3) throw ShapeError("resize_bilinear expects (H, W, c)");
  const std::size_t ih = image.dim(0), iw = image.dim(1), c = image.dim(2);
  if (ih == height && iw == width) return image;
  Tensor<float> out({height, width, c});
  const double sy = static_cast<double>(ih) / height, sx = static_cast<double>(iw) / width;
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, ih - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, iw - 1);
      const double wx = fx - x0;
      for (std::size_t k = 0; k < c; ++k) {
        auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(image[(yy * iw + xx) * c + k]); };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                         wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out[(y * width + x) * c + k] = static_cast<float>(v);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- datasets

void DatasetManifest::validate(bool require_labels) const {
  std::set<std::string> ids;
  for (const auto& v : videos) {
    if (!ids.insert(v.video_id).second) throw ConfigError("duplicate video id " + v.video_id);
    if (require_labels && !v.label_file)
      throw ConfigError("video " + v.video_id + " in split " + split + " has no label file");
  }
  if (height == 0 || width == 0) throw ConfigError("manifest frame size must be positive");
}

DatasetManifest load_manifest(const fs::path& root, const std::string& split, std::size_t height,
                              std::size_t width) {
  DatasetManifest m;
  m.split = split;
  m.height = height;
  m.width = width;
  const fs::path meta = root / "manifest.json";
  if (fs::exists(meta)) {
    std::ifstream in(meta);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw IoError("malformed manifest " + meta.string() + ": " + e.what());
    }
    if (!doc.contains("splits") || !doc["splits"].contains(split))
      throw IoError("manifest " + meta.string() + " has no split '" + split + "'");
    for (const auto& v : doc["splits"][split]) {
      VideoEntry e;
      e.video_id = v.at("id").get<std::string>();
      e.frame_directory = root / split / e.video_id;
      e.frame_count = v.value("frames", std::size_t{0});
      if (v.contains("labels")) e.label_file = root / split / v["labels"].get<std::string>();
      m.videos.push_back(std::move(e));
    }
  } else {
    const fs::path dir = root / split;
    if (!fs::is_directory(dir)) throw IoError("dataset split directory not found: " + dir.string());
    std::vector<fs::path> subdirs;
    for (const auto& d : fs::directory_iterator(dir))
      if (d.is_directory()) subdirs.push_back(d.path());
    std::sort(subdirs.begin(), subdirs.end());
    for (const auto& d : subdirs) {
      VideoEntry e;
      e.video_id = d.filename().string();
      e.frame_directory = d;
      const fs::path labels = dir / (e.video_id + ".labels");
      if (fs::exists(labels)) e.label_file = labels;
      m.videos.push_back(std::move(e));
    }
  }
  m.validate();
  return m;
}

Tensor<float> load_video(const VideoEntry& entry, std::size_t height, std::size_t width) {
  if (!fs::is_directory(entry.frame_directory))
    throw IoError("frame directory not found: " + entry.frame_directory.string());
  std::vector<fs::path> files;
  for (const auto& f : fs::directory_iterator(entry.frame_directory)) {
    std::string ext = f.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (f.is_regular_file() && ext == ".png") files.push_back(f.path());
  }
  if (files.empty()) throw IoError("no PNG frames in " + entry.frame_directory.string());
  std::sort(files.begin(), files.end());
  const std::size_t frame = height * width * 3;
  Tensor<float> video({files.size(), height, width, 3});
  for (std::size_t i = 0; i < files.size(); ++i) {
    Tensor<float> img = resize_bilinear(read_png(files[i]), height, width);
    std::copy(img.data(), img.data() + frame, video.data() + i * frame);
  }
  return video;
}

std::vector<int> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read label file " + path.string());
  std::vector<int> labels;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line != "0" && line != "1")
      throw IoError(path.string() + ":" + std::to_string(n) + ": label must be 0 or 1");
    labels.push_back(line == "1");
  }
  return labels;
}

void write_labels(const fs::path& path, const std::vector<int>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write label file " + path.string());
  for (int l : labels) out << (l ? "1\n" : "0\n");
}

std::vector<std::size_t> clip_starts(std::size_t length, std::size_t clip_length,
                                     std::size_t stride) {
  if (stride == 0) throw ConfigError("clip stride must be positive");
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + clip_length <= length; s += stride) starts.push_back(s);
  return starts;
}

std::vector<VideoClip> sample_training_clips(const Tensor<float>& video, std::size_t clip_length,
                                             std::size_t stride) {
  if (video.rank() != 4) throw ShapeError("video must be (L, H, W, c)");
  const std::size_t length = video.dim(0);
  if (length < clip_length) {
    std::cerr << "warning: video with " << length << " frames is shorter than a " << clip_length
              << "-frame clip; skipped\n";
    return {};
  }
  const std::size_t frame = video.size() / length;
  std::vector<VideoClip> clips;
  for (std::size_t s : clip_starts(length, clip_length, stride)) {
    VideoClip c;
    Shape shape = video.shape();
    shape[0] = clip_length;
    c.frames = Tensor<float>(shape, std::vector<float>(video.data() + s * frame,
                                                       video.data() + (s + clip_length) * frame));
    c.frame_indices.resize(clip_length);
    std::iota(c.frame_indices.begin(), c.frame_indices.end(), s);
    clips.push_back(std::move(c));
  }
  return clips;
}

// ---------------------------------------------------------------- batches

BatchIterator::BatchIterator(std::vector<Tensor<float>> videos, std::size_t clip_length,
                             std::size_t batch_size, std::uint64_t seed, std::size_t stride)
    : videos_(std::move(videos)), clip_length_(clip_length), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  for (std::size_t v = 0; v < videos_.size(); ++v) {
    if (videos_[v].rank() != 4) throw ShapeError("video must be (L, H, W, c)");
    if (videos_[v].dim(0) < clip_length) {
      std::cerr << "warning: video " << v << " is shorter than one clip; skipped\n";
      continue;
    }
    for (std::size_t s : clip_starts(videos_[v].dim(0), clip_length, stride)) clips_.emplace_back(v, s);
  }
}

std::size_t BatchIterator::batches_per_epoch() const {
  return (clips_.size() + batch_size_ - 1) / batch_size_;
}

std::vector<std::size_t> BatchIterator::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(clips_.size());
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

Batch BatchIterator::batch(std::size_t epoch, std::size_t index) const {
  if (index >= batches_per_epoch()) throw std::out_of_range("batch index past end of epoch");
  const auto order = epoch_order(epoch);
  const std::size_t begin = index * batch_size_;
  const std::size_t count = std::min(batch_size_, clips_.size() - begin);
  const Tensor<float>& first = videos_[clips_[order[begin]].first];
  const std::size_t h = first.dim(1), w = first.dim(2), c = first.dim(3), frame = h * w * c;
  Batch b;
  b.keyframes = Tensor<float>({count, 3, h, w, c});
  b.targets = Tensor<float>({count, clip_length_, h, w, c});
  const auto keys = keyframe_indices(clip_length_);
  for (std::size_t i = 0; i < count; ++i) {
    const auto [v, s] = clips_[order[begin + i]];
    const float* src = videos_[v].data() + s * frame;
    std::copy(src, src + clip_length_ * frame, b.targets.data() + i * clip_length_ * frame);
    for (std::size_t k = 0; k < 3; ++k)
      std::copy(src + keys[k] * frame, src + (keys[k] + 1) * frame,
                b.keyframes.data() + (i * 3 + k) * frame);
  }
  return b;
}

std::vector<Batch> iterate_batches(const DatasetManifest& manifest, std::size_t clip_length,
                                   std::size_t batch_size, std::uint64_t seed) {
  std::vector<Tensor<float>> videos;
  for (const auto& v : manifest.videos) videos.push_back(load_video(v, manifest.height, manifest.width));
  BatchIterator it(std::move(videos), clip_length, batch_size, seed);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < it.batches_per_epoch(); ++i) out.push_back(it.batch(0, i));
  return out;
}

// ---------------------------------------------------------------- synthetic data

std::string to_string(AnomalyType t) {
  switch (t) {
    case AnomalyType::kSpeedJump: return "speed_jump";
    case AnomalyType::kTeleport: return "teleport";
    case AnomalyType::kShapeSwap: return "shape_swap";
  }
  return "unknown";
}

AnomalyType parse_anomaly_type(const std::string& s) {
  if (s == "speed_jump") return AnomalyType::kSpeedJump;
  if (s == "teleport") return AnomalyType::kTeleport;
  if (s == "shape_swap") return AnomalyType::kShapeSwap;
  throw ConfigError("unknown anomaly type '" + s + "' (speed_jump, teleport, shape_swap)");
}

void SyntheticSpec::validate() const {
  if (height < 8 || width < 8) throw ConfigError("synthetic canvas must be at least 8x8");
  if (frames_per_video == 0) throw ConfigError("frames_per_video must be positive");
  if (min_shapes == 0 || max_shapes < min_shapes) throw ConfigError("invalid shape count range");
  if (!(min_size > 0) || max_size < min_size) throw ConfigError("invalid shape size range");
  if (2.0 * max_size + 2.0 >= static_cast<double>(std::min(height, width)))
    throw ConfigError("shapes do not fit on the canvas");
  if (min_speed < 0 || max_speed < min_speed) throw ConfigError("invalid velocity range");
  if (num_test_videos > 0) {
    if (anomaly_types.empty())
      throw ConfigError("the test split needs at least one anomaly type");
    if (anomaly_spans.empty()) {
      if (min_anomaly_length == 0 || max_anomaly_length < min_anomaly_length ||
          max_anomaly_length > frames_per_video)
        throw ConfigError("invalid anomaly length range");
    } else {
      if (anomaly_spans.size() != num_test_videos)
        throw ConfigError("need one anomaly span per test video");
      for (const auto& s : anomaly_spans)
        if (s.length == 0 || s.start + s.length > frames_per_video)
          throw ConfigError("anomaly span lies outside the video");
    }
  }
}

void apply_synthetic_option(SyntheticSpec& spec, const std::string& key, const std::string& value) {
  if (key == "seed") spec.seed = parse_size(key, value);
  else if (key == "num_train_videos") spec.num_train_videos = parse_size(key, value);
  else if (key == "num_test_videos") spec.num_test_videos = parse_size(key, value);
  else if (key == "frames_per_video") spec.frames_per_video = parse_size(key, value);
  else if (key == "height") spec.height = parse_size(key, value);
  else if (key == "width") spec.width = parse_size(key, value);
  else if (key == "min_shapes") spec.min_shapes = parse_size(key, value);
  else if (key == "max_shapes") spec.max_shapes = parse_size(key, value);
  else if (key == "min_size") spec.min_size = parse_double(key, value);
  else if (key == "max_size") spec.max_size = parse_double(key, value);
  else if (key == "min_speed") spec.min_speed = parse_double(key, value);
  else if (key == "max_speed") spec.max_speed = parse_double(key, value);
  else if (key == "min_anomaly_length") spec.min_anomaly_length = parse_size(key, value);
  else if (key == "max_anomaly_length") spec.max_anomaly_length = parse_size(key, value);
  else if (key == "anomaly_types") {
    spec.anomaly_types.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) spec.anomaly_types.push_back(parse_anomaly_type(item));
  } else if (key == "anomaly_spans") {  // start:length,start:length,...
    spec.anomaly_spans.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError(key + ": expected start:length pairs");
      spec.anomaly_spans.push_back({parse_size(key, item.substr(0, colon)),
                                    parse_size(key, item.substr(colon + 1))});
    }
  } else {
    throw ConfigError("unknown synthetic dataset option '" + key + "'");
  }
}

SyntheticSpec load_synthetic_spec(const fs::path& path) {
  SyntheticSpec spec;
  for (const auto& [k, v] : read_key_values(path)) apply_synthetic_option(spec, k, v);
  spec.validate();
  return spec;
}

namespace {

struct Sprite {
  int type = 0;  // 0 circle, 1 square, 2 triangle
  double x = 0, y = 0, vx = 0, vy = 0, size = 0;
  double color[3] = {0, 0, 0};
};

bool covers(int type, double dx, double dy, double s) {
  switch (type) {
    case 0: return dx * dx + dy * dy <= s * s;
    case 1: return std::abs(dx) <= 0.8 * s && std::abs(dy) <= 0.8 * s;
    default: return dy >= -s && dy <= s && std::abs(dx) <= 0.5 * (dy + s);
  }
}

std::string video_name(const char* split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03zu", split, i);
  return buf;
}

void bounce(double& p, double& v, double lo, double hi) {
  for (int i = 0; i < 8 && (p < lo || p > hi); ++i) {
    if (p < lo) p = 2 * lo - p, v = -v;
    if (p > hi) p = 2 * hi - p, v = -v;
  }
  p = std::clamp(p, lo, hi);
}

}  // namespace

SyntheticVideo render_synthetic_video(const SyntheticSpec& spec, bool test, std::size_t index,
                                      std::optional<AnomalyType> anomaly, AnomalySpan span) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(test), static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  auto uni = [&](double a, double b) { return a + (b - a) * (static_cast<double>(rng() >> 11) * 0x1.0p-53); };
  const std::size_t H = spec.height, W = spec.width, L = spec.frames_per_video;

  // Static background: a two-colour horizontal gradient plus two muted blocks.
  std::vector<double> bg(H * W * 3);
  double c0[3], c1[3];
  for (int k = 0; k < 3; ++k) c0[k] = uni(0.05, 0.35), c1[k] = uni(0.05, 0.35);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double a = static_cast<double>(x) / (W - 1);
      for (int k = 0; k < 3; ++k) bg[(y * W + x) * 3 + k] = (1 - a) * c0[k] + a * c1[k];
    }
  for (int r = 0; r < 2; ++r) {
    const std::size_t x0 = static_cast<std::size_t>(uni(0, W * 0.7)), y0 = static_cast<std::size_t>(uni(0, H * 0.7));
    const std::size_t bw = static_cast<std::size_t>(uni(W * 0.1, W * 0.3)), bh = static_cast<std::size_t>(uni(H * 0.1, H * 0.3));
    double col[3];
    for (double& c : col) c = uni(0.2, 0.45);
    for (std::size_t y = y0; y < std::min(H, y0 + bh); ++y)
      for (std::size_t x = x0; x < std::min(W, x0 + bw); ++x)
        for (int k = 0; k < 3; ++k) bg[(y * W + x) * 3 + k] = col[k];
  }

  const std::size_t count =
      spec.min_shapes + static_cast<std::size_t>(rng() % (spec.max_shapes - spec.min_shapes + 1));
  std::vector<Sprite> sprites(count);
  for (auto& s : sprites) {
    s.type = static_cast<int>(rng() % 3);
    s.size = uni(spec.min_size, spec.max_size);
    s.x = uni(s.size, W - 1 - s.size);
    s.y = uni(s.size, H - 1 - s.size);
    const double speed = uni(spec.min_speed, spec.max_speed), angle = uni(0, 2 * M_PI);
    s.vx = speed * std::cos(angle);
    s.vy = speed * std::sin(angle);
    const int bright = static_cast<int>(rng() % 3);
    for (int k = 0; k < 3; ++k) s.color[k] = k == bright ? uni(0.85, 1.0) : uni(0.4, 0.9);
  }

  SyntheticVideo out;
  out.pixels.resize(L * H * W * 3);
  out.labels.assign(L, 0);
  for (std::size_t t = 0; t < L; ++t) {
    const bool in_span = anomaly && t >= span.start && t < span.start + span.length;
    if (in_span) out.labels[t] = 1;
    Sprite& target = sprites[0];
    if (in_span && *anomaly == AnomalyType::kTeleport) {
      target.x = uni(target.size, W - 1 - target.size);
      target.y = uni(target.size, H - 1 - target.size);
    }
    std::vector<double> frame = bg;
    for (std::size_t i = 0; i < sprites.size(); ++i) {
      const Sprite& s = sprites[i];
      int type = s.type;
      // Shape swap flickers between the other two types every frame.
      if (i == 0 && in_span && *anomaly == AnomalyType::kShapeSwap)
        type = (s.type + 1 + static_cast<int>((t - span.start) % 2)) % 3;
      const auto y_lo = static_cast<std::ptrdiff_t>(std::floor(s.y - s.size));
      const auto y_hi = static_cast<std::ptrdiff_t>(std::ceil(s.y + s.size));
      const auto x_lo = static_cast<std::ptrdiff_t>(std::floor(s.x - s.size));
      const auto x_hi = static_cast<std::ptrdiff_t>(std::ceil(s.x + s.size));
      for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y_lo); y <= std::min<std::ptrdiff_t>(H - 1, y_hi); ++y)
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x_lo); x <= std::min<std::ptrdiff_t>(W - 1, x_hi); ++x)
          if (covers(type, x - s.x, y - s.y, s.size))
            for (int k = 0; k < 3; ++k) frame[(y * W + x) * 3 + k] = s.color[k];
    }
    std::uint8_t* px = out.pixels.data() + t * H * W * 3;
    for (std::size_t i = 0; i < frame.size(); ++i)
      px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(frame[i], 0.0, 1.0) * 255.0));
    for (std::size_t i = 0; i < sprites.size(); ++i) {
      Sprite& s = sprites[i];
      const double mult = (i == 0 && in_span && *anomaly == AnomalyType::kSpeedJump) ? 4.0 : 1.0;
      s.x += s.vx * mult;
      s.y += s.vy * mult;
      bounce(s.x, s.vx, s.size, W - 1 - s.size);
      bounce(s.y, s.vy, s.size, H - 1 - s.size);
    }
  }
  return out;
}

std::vector<GeneratedVideo> generate_synthetic(const SyntheticSpec& spec, const fs::path& root) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  const fs::path meta = root / "manifest.json";
  if (fs::exists(meta)) {
    // Regenerating over an earlier dataset replaces it wholesale.
    fs::remove_all(root / "train");
    fs::remove_all(root / "test");
    fs::remove(meta);
  } else if (!fs::is_empty(root)) {
    throw IoError("refusing to generate into non-empty directory without a manifest: " + root.string());
  }

  // Test-split spans are drawn from their own stream so they do not depend
  // on rendering.
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0xa40u};
  std::mt19937_64 span_rng(seq);
  std::vector<GeneratedVideo> videos;
  const std::size_t L = spec.frames_per_video;
  for (std::size_t i = 0; i < spec.num_train_videos; ++i)
    videos.push_back({"train", video_name("train", i), L, std::nullopt, {}});
  for (std::size_t i = 0; i < spec.num_test_videos; ++i) {
    GeneratedVideo v{"test", video_name("test", i), L, spec.anomaly_types[i % spec.anomaly_types.size()], {}};
    if (!spec.anomaly_spans.empty()) {
      v.span = spec.anomaly_spans[i];
    } else {
      const std::size_t len = spec.min_anomaly_length +
                              span_rng() % (spec.max_anomaly_length - spec.min_anomaly_length + 1);
      const std::size_t margin = L >= len + 20 ? 10 : 0;
      v.span = {margin + span_rng() % (L - len - 2 * margin + 1), len};
    }
    videos.push_back(v);
  }

  json doc;
  doc["frame_size"] = {spec.height, spec.width};
  doc["seed"] = spec.seed;
  doc["splits"] = {{"train", json::array()}, {"test", json::array()}};
  std::size_t test_index = 0, train_index = 0;
  for (const auto& v : videos) {
    const bool test = v.split == "test";
    const SyntheticVideo r = render_synthetic_video(spec, test, test ? test_index++ : train_index++,
                                                    v.anomaly, v.span);
    const fs::path dir = root / v.split / v.video_id;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const std::size_t frame = spec.height * spec.width * 3;
    for (std::size_t t = 0; t < L; ++t) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%06zu.png", t);
      write_png(dir / name, std::vector<std::uint8_t>(r.pixels.begin() + t * frame, r.pixels.begin() + (t + 1) * frame),
                spec.height, spec.width, 3);
    }
    json entry = {{"id", v.video_id}, {"frames", L}};
    if (test) {
      write_labels(root / "test" / (v.video_id + ".labels"), r.labels);
      entry["labels"] = v.video_id + ".labels";
      entry["anomaly"] = to_string(*v.anomaly);
      entry["span"] = {v.span.start, v.span.length};
    }
    doc["splits"][v.split].push_back(entry);
  }
  std::ofstream out(meta, std::ios::binary);
  if (!out) throw IoError("cannot write " + meta.string());
  out << doc.dump(2) << '\n';
  return videos;
}

}  // namespace keyrestore
