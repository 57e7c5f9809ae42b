// keyrestore: synthetic data generation, training, scoring, evaluation,
// plotting and attention dumps for the keyframe restoration model.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "keyrestore/checkpoint.hpp"
#include "keyrestore/data.hpp"
#include "keyrestore/keyvalue.hpp"
#include "keyrestore/pipeline.hpp"
#include "keyrestore/scoring.hpp"
#include "keyrestore/training.hpp"

namespace fs = std::filesystem;
using namespace keyrestore;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string checkpoint;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_checkpoint) {
  cmd->add_option("--config", c.config, "key = value configuration file");
  cmd->add_option("--seed", c.seed, "random seed (overrides the config file)");
  cmd->add_flag("--deterministic", c.deterministic, "single-threaded, fixed-order numerics");
  if (with_checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "checkpoint directory");
  cmd->add_option("--out", c.out, "output path");
}

RunConfig run_config(const Common& c, const std::vector<std::string>& overrides, RunConfig cfg = {}) {
  if (!c.config.empty())
    for (const auto& [k, v] : read_key_values(c.config)) cfg.apply(k, v);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

/// Accepts a checkpoint directory or a training output directory holding best/ or last/.
fs::path checkpoint_path(const std::string& arg) {
  if (arg.empty()) throw ConfigError("--checkpoint is required");
  fs::path p = arg;
  if (fs::exists(p / "meta.json")) return p;
  for (const char* sub : {"best", "last"})
    if (fs::exists(p / sub / "meta.json")) return p / sub;
  throw IoError("no checkpoint found at " + p.string());
}

/// Network from a checkpoint; a config file, when given, must describe the same model.
std::unique_ptr<Network<float>> load_network(const fs::path& ckpt, const Common& c,
                                             const std::vector<std::string>& overrides) {
  const CheckpointMeta meta = load_checkpoint_meta(ckpt);
  // The checkpoint's architecture is the baseline; a config file or --set
  // may still override it (and then must agree with the stored weights).
  RunConfig base;
  base.model = meta.model;
  const ModelConfig model = run_config(c, overrides, base).model;
  auto net = std::make_unique<Network<float>>(model, meta.seed);
  load_parameters(ckpt, *net);
  return net;
}

fs::path data_root(const Common& c, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!c.config.empty() || !overrides.empty()) cfg = run_config(c, overrides);
  return resolve_data_root(cfg);
}

std::vector<fs::path> csv_inputs(const std::vector<std::string>& args) {
  std::vector<fs::path> files;
  for (const auto& a : args) {
    if (fs::is_directory(a)) {
      std::vector<fs::path> found;
      for (const auto& f : fs::directory_iterator(a))
        if (f.path().extension() == ".csv") found.push_back(f.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(a);
    }
  }
  if (files.empty()) throw IoError("no score CSV files given");
  return files;
}

int cmd_generate(const Common& c, const std::vector<std::string>& overrides) {
  SyntheticSpec spec;
  if (!c.config.empty())
    for (const auto& [k, v] : read_key_values(c.config)) apply_synthetic_option(spec, k, v);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_synthetic_option(spec, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) spec.seed = *c.seed;
  spec.validate();
  fs::path root = c.out;
  if (root.empty()) root = resolve_data_root(RunConfig{});
  const auto videos = generate_synthetic(spec, root);
  std::size_t train = 0, test = 0;
  for (const auto& v : videos) (v.split == "train" ? train : test)++;
  std::printf("generated %zu train + %zu test videos (%zux%zu, %zu frames each) in %s\n", train, test,
              spec.height, spec.width, spec.frames_per_video, root.c_str());
  for (const auto& v : videos)
    if (v.anomaly)
      std::printf("  %s: %s frames [%zu, %zu)\n", v.video_id.c_str(), to_string(*v.anomaly).c_str(),
                  v.span.start, v.span.start + v.span.length);
  return 0;
}

int cmd_train(const Common& c, const std::vector<std::string>& overrides, std::optional<std::size_t> stop_at) {
  RunConfig cfg = run_config(c, overrides);
  if (!c.out.empty()) cfg.checkpoint_dir = c.out;
  TrainOptions opts;
  if (!c.checkpoint.empty()) opts.resume = checkpoint_path(c.checkpoint);
  opts.stop_at = stop_at;
  const TrainSummary s = train(cfg, opts);
  std::printf("trained steps %zu..%zu in %.1fs; final loss %.6f; best epoch loss %.6f\n", s.first_step, s.steps,
              s.seconds, s.last_loss, s.best_epoch_loss);
  std::printf("loss log: %s\ncheckpoints: %s\n", s.loss_log.c_str(), cfg.checkpoint_dir.c_str());
  return 0;
}

int cmd_score(const Common& c, const std::vector<std::string>& overrides, const std::string& split) {
  const fs::path ckpt = checkpoint_path(c.checkpoint);
  auto net = load_network(ckpt, c, overrides);
  const ModelConfig& m = net->config();
  const DatasetManifest manifest = load_manifest(data_root(c, overrides), split, m.height, m.width);
  const fs::path out = c.out.empty() ? fs::path("scores") : fs::path(c.out);
  fs::create_directories(out);
  const auto series = score_split(*net, manifest, true);
  for (const auto& s : series) write_score_csv(out / (s.video_id + ".csv"), s);
  std::printf("wrote %zu score files to %s\n", series.size(), out.c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::vector<std::string>& inputs) {
  std::vector<AnomalyScoreSeries> series;
  for (const auto& f : csv_inputs(inputs)) series.push_back(read_score_csv(f));
  const double overall = frame_auc(series);
  nlohmann::json report = {{"overall_auc", overall}, {"videos", nlohmann::json::array()}};
  std::printf("frame-level AUC: %.4f (%zu videos)\n", overall, series.size());
  for (const auto& s : series) {
    nlohmann::json v = {{"id", s.video_id}, {"frames", s.scores.size()}};
    try {
      const double auc = roc_auc(s.scores, *s.labels);
      v["auc"] = auc;
      std::printf("  %-16s %.4f\n", s.video_id.c_str(), auc);
    } catch (const ShapeError&) {
      v["auc"] = nullptr;
      std::printf("  %-16s n/a (single class)\n", s.video_id.c_str());
    }
    report["videos"].push_back(v);
  }
  if (!c.out.empty()) {
    std::ofstream out(c.out);
    if (!out) throw IoError("cannot write " + c.out);
    out << report.dump(2) << '\n';
  }
  return 0;
}

int cmd_plot(const Common& c, const std::vector<std::string>& inputs) {
  const fs::path out = c.out.empty() ? fs::path("plots") : fs::path(c.out);
  fs::create_directories(out);
  std::size_t written = 0;
  for (const auto& f : csv_inputs(inputs)) {
    try {
      const AnomalyScoreSeries s = read_score_csv(f);
      const PlotImage img = render_score_plot(s);
      write_png(out / (s.video_id + ".png"), img.rgb, img.height, img.width, 3);
      ++written;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "warning: skipping %s: %s\n", f.c_str(), e.what());
    }
  }
  std::printf("wrote %zu plots to %s\n", written, out.c_str());
  return 0;
}

int cmd_dump(const Common& c, const std::vector<std::string>& overrides, const std::string& split,
             std::string video, std::size_t start) {
  const fs::path ckpt = checkpoint_path(c.checkpoint);
  auto net = load_network(ckpt, c, overrides);
  const ModelConfig& m = net->config();
  const DatasetManifest manifest = load_manifest(data_root(c, overrides), split, m.height, m.width);
  if (manifest.videos.empty()) throw IoError("split " + split + " has no videos");
  const VideoEntry* entry = &manifest.videos.front();
  if (!video.empty()) {
    entry = nullptr;
    for (const auto& v : manifest.videos)
      if (v.video_id == video) entry = &v;
    if (!entry) throw ConfigError("no video '" + video + "' in split " + split);
  }
  const Tensor<float> frames = load_video(*entry, m.height, m.width);
  if (start + m.clip_length > frames.dim(0))
    throw ConfigError("clip starting at frame " + std::to_string(start) + " runs past the video end");
  const std::size_t frame = frames.size() / frames.dim(0);
  Tensor<float> clip({m.clip_length, m.height, m.width, 3},
                     std::vector<float>(frames.data() + start * frame, frames.data() + (start + m.clip_length) * frame));
  const AttentionDump dump = dump_attention(*net, extract_keyframe_stack(clip));
  const fs::path out = c.out.empty() ? fs::path("attention") : fs::path(c.out);
  fs::create_directories(out);
  std::size_t written = 0;
  for (std::size_t n = 4; n-- > 0;)
    if (!dump.attention[n].empty()) {
      write_png(out / ("attention_D" + std::to_string(n) + ".png"), to_display(dump.attention[n]));
      ++written;
    }
  for (std::size_t n = 3; n-- > 0;)
    if (!dump.skip_features[n].empty()) {
      write_png(out / ("tu_features_D" + std::to_string(n) + ".png"), to_display(dump.skip_features[n]));
      ++written;
    }
  std::printf("wrote %zu images for %s frames [%zu, %zu) to %s\n", written, entry->video_id.c_str(), start,
              start + m.clip_length, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keyframe-conditioned video event restoration for anomaly detection"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::string> overrides, inputs;
  std::string split = "test", video;
  std::size_t start = 0;

  auto* gen = app.add_subcommand("generate", "write the synthetic moving-shapes dataset");
  add_common(gen, common, false);
  gen->add_option("--set", overrides, "override one key=value option");

  auto* tr = app.add_subcommand("train", "train a model (--checkpoint resumes)");
  add_common(tr, common, true);
  tr->add_option("--set", overrides, "override one key=value option");
  std::optional<std::size_t> stop_at;
  tr->add_option("--stop-at", stop_at, "stop after this many total steps; resume later with --checkpoint");

  auto* sc = app.add_subcommand("score", "write per-video anomaly score CSVs");
  add_common(sc, common, true);
  sc->add_option("--set", overrides, "override one key=value option");
  sc->add_option("--split", split, "dataset split")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "frame-level AUC of score CSVs");
  add_common(ev, common, false);
  ev->add_option("inputs", inputs, "score CSV files or directories")->required();

  auto* pl = app.add_subcommand("plot", "render score curves as PNG");
  add_common(pl, common, false);
  pl->add_option("inputs", inputs, "score CSV files or directories")->required();

  auto* da = app.add_subcommand("dump-attention", "write cross-attention and TU feature maps");
  add_common(da, common, true);
  da->add_option("--set", overrides, "override one key=value option");
  da->add_option("--split", split, "dataset split")->capture_default_str();
  da->add_option("--video", video, "video id (default: first in split)");
  da->add_option("--start", start, "first frame of the clip")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (common.deterministic) set_deterministic();
    if (gen->parsed()) return cmd_generate(common, overrides);
    if (tr->parsed()) return cmd_train(common, overrides, stop_at);
    if (sc->parsed()) return cmd_score(common, overrides, split);
    if (ev->parsed()) return cmd_eval(common, inputs);
    if (pl->parsed()) return cmd_plot(common, inputs);
    if (da->parsed()) return cmd_dump(common, overrides, split, video, start);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
