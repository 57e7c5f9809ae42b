#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "doctest.h"
#include "keyrestore/data.hpp"
#include "oracles.hpp"

using namespace keyrestore;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("keyrestore_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.num_train_videos = 2;
  s.num_test_videos = 3;
  s.frames_per_video = 50;
  return s;
}

// First frame at which two renderings of the same video differ.
std::size_t first_differing_frame(const SyntheticVideo& a, const SyntheticVideo& b, std::size_t frame_bytes) {
  for (std::size_t t = 0; t * frame_bytes < a.pixels.size(); ++t)
    if (!std::equal(a.pixels.begin() + t * frame_bytes, a.pixels.begin() + (t + 1) * frame_bytes,
                    b.pixels.begin() + t * frame_bytes))
      return t;
  return a.pixels.size() / frame_bytes;
}

}  // namespace

TEST_CASE("png round-trips 8-bit pixels") {
  const fs::path dir = scratch("png");
  fs::create_directories(dir);
  std::vector<std::uint8_t> px(5 * 7 * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 37 % 256);
  write_png(dir / "a.png", px, 5, 7, 3);
  const Tensor<float> img = read_png(dir / "a.png");
  REQUIRE(img.shape() == Shape{5, 7, 3});
  for (std::size_t i = 0; i < px.size(); ++i) CHECK(img[i] == float(px[i]) / 255.0f);
  write_png(dir / "b.png", img);
  CHECK(read_png(dir / "b.png") == img);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("bilinear resize keeps constants and identity sizes") {
  std::mt19937_64 rng(1);
  Tensor<float> img({6, 8, 3});
  oracle::fill_uniform(img, rng, 0.0, 1.0);
  CHECK(resize_bilinear(img, 6, 8) == img);
  Tensor<float> flat({5, 5, 3}, 0.4f);
  const Tensor<float> big = resize_bilinear(flat, 9, 3);
  CHECK(big.shape() == Shape{9, 3, 3});
  for (float v : big.values()) CHECK(v == doctest::Approx(0.4f));
}

TEST_CASE("clip starts and batch sizes") {
  CHECK(clip_starts(90, 9, 1).size() == 82);
  CHECK(clip_starts(90, 9, 9).size() == 10);
  CHECK(clip_starts(8, 9, 1).empty());

  // Two videos with 5 and 5 clips: 10 clips in batches of 4 -> 4, 4, 2.
  std::vector<Tensor<float>> videos;
  for (int v = 0; v < 2; ++v) {
    Tensor<float> vid({13, 4, 4, 3});
    for (std::size_t t = 0; t < 13; ++t)
      for (std::size_t i = 0; i < 48; ++i) vid[t * 48 + i] = float(v * 100 + t) / 255.0f;
    videos.push_back(vid);
  }
  BatchIterator it(videos, 9, 4, 42);
  CHECK(it.clip_count() == 10);
  REQUIRE(it.batches_per_epoch() == 3);
  CHECK(it.batch(0, 0).targets.dim(0) == 4);
  CHECK(it.batch(0, 1).targets.dim(0) == 4);
  CHECK(it.batch(0, 2).targets.dim(0) == 2);

  // Keyframes are exactly frames 0, 4 and 8 of each target clip.
  const Batch b = it.batch(1, 0);
  const std::size_t frame = 48;
  for (std::size_t i = 0; i < b.targets.dim(0); ++i)
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t p = 0; p < frame; ++p)
        CHECK(b.keyframes[(i * 3 + k) * frame + p] == b.targets[(i * 9 + keyframe_indices(9)[k]) * frame + p]);
}

TEST_CASE("epoch order is a seeded permutation") {
  std::vector<Tensor<float>> videos(1, Tensor<float>({40, 4, 4, 3}));
  BatchIterator a(videos, 9, 4, 7), b(videos, 9, 4, 7), c(videos, 9, 4, 8);
  const auto o = a.epoch_order(0);
  CHECK(std::set<std::size_t>(o.begin(), o.end()).size() == a.clip_count());
  CHECK(o == b.epoch_order(0));
  CHECK(o != a.epoch_order(1));
  CHECK(o != c.epoch_order(0));
}

TEST_CASE("synthetic generation is deterministic and labelled") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const auto videos = generate_synthetic(small_spec(), a);
  generate_synthetic(small_spec(), b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
  }
  CHECK(files == 5 * 50 + 3 + 1);

  const DatasetManifest test = load_manifest(a, "test", 64, 64);
  test.validate(true);
  REQUIRE(test.videos.size() == 3);
  std::set<std::string> kinds;
  for (const auto& v : videos) {
    if (v.split != "test") continue;
    kinds.insert(to_string(*v.anomaly));
    const auto labels = read_labels(a / "test" / (v.video_id + ".labels"));
    REQUIRE(labels.size() == 50);
    for (std::size_t t = 0; t < 50; ++t) CHECK(labels[t] == int(t >= v.span.start && t < v.span.start + v.span.length));
    CHECK(v.span.length >= 18);
    CHECK(v.span.length <= 27);
  }
  CHECK(kinds.size() == 3);
  const Tensor<float> vid = load_video(test.videos[0], 64, 64);
  CHECK(vid.shape() == Shape{50, 64, 64, 3});

  // Writing over a foreign non-empty directory is refused; regenerating is not.
  CHECK_NOTHROW(generate_synthetic(small_spec(), a));
  const fs::path foreign = scratch("gen_foreign");
  fs::create_directories(foreign);
  std::ofstream(foreign / "keep.txt") << "x";
  CHECK_THROWS_AS(generate_synthetic(small_spec(), foreign), IoError);
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(foreign);
}

TEST_CASE("anomalies only alter frames inside their span") {
  const SyntheticSpec spec = small_spec();
  const std::size_t frame = spec.height * spec.width * 3;
  const AnomalySpan span{20, 10};
  const auto normal = render_synthetic_video(spec, true, 0, std::nullopt, span);
  CHECK(std::count(normal.labels.begin(), normal.labels.end(), 1) == 0);
  for (AnomalyType type : {AnomalyType::kSpeedJump, AnomalyType::kTeleport, AnomalyType::kShapeSwap}) {
    const auto odd = render_synthetic_video(spec, true, 0, type, span);
    CAPTURE(to_string(type));
    CHECK(std::count(odd.labels.begin(), odd.labels.end(), 1) == 10);
    // Speed jumps change position from the next frame on; the others at once.
    const std::size_t expected = type == AnomalyType::kSpeedJump ? 21 : 20;
    CHECK(first_differing_frame(normal, odd, frame) == expected);
  }
  CHECK(parse_anomaly_type("teleport") == AnomalyType::kTeleport);
  CHECK_THROWS_AS(parse_anomaly_type("wobble"), ConfigError);
}

TEST_CASE("teleporting moves the shape far between consecutive frames") {
  SyntheticSpec spec = small_spec();
  spec.min_shapes = spec.max_shapes = 1;
  const std::size_t frame = spec.height * spec.width * 3;
  const auto v = render_synthetic_video(spec, true, 1, AnomalyType::kTeleport, {10, 20});
  // Pixels that change between frames t and t+1.
  auto moved = [&](std::size_t t) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < frame; ++i) n += v.pixels[t * frame + i] != v.pixels[(t + 1) * frame + i];
    return n;
  };
  // A 1-2.5 px step touches a thin crescent; a jump redraws the whole shape twice.
  std::size_t normal = 0, jumps = 0;
  for (std::size_t t = 0; t < 9; ++t) normal = std::max(normal, moved(t));
  for (std::size_t t = 11; t < 28; ++t) jumps += moved(t) > normal;
  CHECK(jumps >= 12);
}
