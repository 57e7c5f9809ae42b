#include "keyrestore/training.hpp"

#include <cblas.h>
#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "keyrestore/data.hpp"
#include "keyrestore/keyvalue.hpp"

namespace keyrestore {

namespace fs = std::filesystem;

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  if (!(epsilon > 0)) throw ConfigError("adam_epsilon must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (min_learning_rate < 0 || min_learning_rate > learning_rate)
    throw ConfigError("min_learning_rate must lie in [0, learning_rate]");
  if (grad_clip < 0) throw ConfigError("grad_clip must be non-negative");
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  optim.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (clip_stride == 0) throw ConfigError("clip_stride must be positive");
  if (steps == 0 && epochs == 0) throw ConfigError("either steps or epochs must be positive");
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  auto sz = [&] { return parse_size(key, value); };
  auto dbl = [&] { return parse_double(key, value); };
  auto bln = [&] { return parse_bool(key, value); };
  if (key == "clip_length") model.clip_length = sz();
  else if (key == "height") model.height = sz();
  else if (key == "width") model.width = sz();
  else if (key == "window") model.window = sz();
  else if (key == "channels") model.channels = sz();
  else if (key == "depth") model.depth = sz();
  else if (key == "heads") model.heads = sz();
  else if (key == "input_channels") model.input_channels = sz();
  else if (key == "extractor_widths") model.extractor_widths = parse_size_list(key, value);
  else if (key == "mlp_ratio") model.mlp_ratio = sz();
  else if (key == "cross_attention_skip") model.cross_attention_skip = bln();
  else if (key == "tu_residual_skip") model.tu_residual_skip = bln();
  else if (key == "loss_epsilon") loss.epsilon = dbl();
  else if (key == "afd_loss") loss.afd = bln();
  else if (key == "learning_rate") optim.learning_rate = dbl();
  else if (key == "beta1") optim.beta1 = dbl();
  else if (key == "beta2") optim.beta2 = dbl();
  else if (key == "adam_epsilon") optim.epsilon = dbl();
  else if (key == "weight_decay") optim.weight_decay = dbl();
  else if (key == "min_learning_rate") optim.min_learning_rate = dbl();
  else if (key == "grad_clip") optim.grad_clip = dbl();
  else if (key == "steps") steps = sz();
  else if (key == "epochs") epochs = sz();
  else if (key == "batch_size") batch_size = sz();
  else if (key == "clip_stride") clip_stride = sz();
  else if (key == "seed") seed = sz();
  else if (key == "data_root") data_root = value;
  else if (key == "checkpoint_dir") checkpoint_dir = value;
  else if (key == "log_every") log_every = sz();
  else throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_key_values() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {{"clip_length", std::to_string(model.clip_length)},
          {"height", std::to_string(model.height)},
          {"width", std::to_string(model.width)},
          {"window", std::to_string(model.window)},
          {"channels", std::to_string(model.channels)},
          {"depth", std::to_string(model.depth)},
          {"heads", std::to_string(model.heads)},
          {"input_channels", std::to_string(model.input_channels)},
          {"extractor_widths", join(model.extractor_widths)},
          {"mlp_ratio", std::to_string(model.mlp_ratio)},
          {"cross_attention_skip", b(model.cross_attention_skip)},
          {"tu_residual_skip", b(model.tu_residual_skip)},
          {"loss_epsilon", fmt(loss.epsilon)},
          {"afd_loss", b(loss.afd)},
          {"learning_rate", fmt(optim.learning_rate)},
          {"beta1", fmt(optim.beta1)},
          {"beta2", fmt(optim.beta2)},
          {"adam_epsilon", fmt(optim.epsilon)},
          {"weight_decay", fmt(optim.weight_decay)},
          {"min_learning_rate", fmt(optim.min_learning_rate)},
          {"grad_clip", fmt(optim.grad_clip)},
          {"steps", std::to_string(steps)},
          {"epochs", std::to_string(epochs)},
          {"batch_size", std::to_string(batch_size)},
          {"clip_stride", std::to_string(clip_stride)},
          {"seed", std::to_string(seed)},
          {"data_root", data_root},
          {"checkpoint_dir", checkpoint_dir},
          {"log_every", std::to_string(log_every)}};
}

RunConfig load_run_config(const fs::path& path) {
  RunConfig cfg;
  for (const auto& [k, v] : read_key_values(path)) cfg.apply(k, v);
  cfg.validate();
  return cfg;
}

fs::path resolve_data_root(const RunConfig& cfg) {
  if (const char* env = std::getenv("KEYRESTORE_DATA_ROOT"); env && *env) return env;
  return cfg.data_root;
}

double cosine_learning_rate(std::size_t step, std::size_t total, double base, double floor) {
  if (total == 0) return base;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(ParameterStore<float>& store, double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (auto& [name, p] : store.entries()) {
    if (!p.trainable) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.shape() != p.value.shape()) m = Tensor<float>(p.value.shape()), v = Tensor<float>(p.value.shape());
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* pm = m.data();
    float* pv = v.data();
    const std::size_t n = p.value.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      pm[i] = static_cast<float>(b1 * pm[i] + (1 - b1) * gi);
      pv[i] = static_cast<float>(b2 * pv[i] + (1 - b2) * gi * gi);
      const double update = (pm[i] / c1) / (std::sqrt(pv[i] / c2) + cfg_.epsilon);
      w[i] = static_cast<float>(w[i] * decay - lr * update);
    }
  }
}

TensorMap AdamW::state() const {
  TensorMap out;
  for (const auto& [k, t] : m_) out.emplace("adam.m." + k, t);
  for (const auto& [k, t] : v_) out.emplace("adam.v." + k, t);
  out.emplace("adam.t", Tensor<float>({1}, {static_cast<float>(t_)}));
  return out;
}

void AdamW::load_state(const TensorMap& state) {
  m_.clear();
  v_.clear();
  t_ = 0;
  for (const auto& [k, t] : state) {
    if (k.rfind("adam.m.", 0) == 0) m_.emplace(k.substr(7), t);
    else if (k.rfind("adam.v.", 0) == 0) v_.emplace(k.substr(7), t);
    else if (k == "adam.t") t_ = static_cast<std::size_t>(t[0]);
  }
}

double clip_gradients(ParameterStore<float>& store, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : store.entries())
    if (p.trainable)
      for (float g : p.grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float k = static_cast<float>(max_norm / norm);
    for (auto& [name, p] : store.entries())
      if (p.trainable)
        for (float& g : p.grad.values()) g *= k;
  }
  return norm;
}

void set_deterministic() {
  omp_set_dynamic(0);
  omp_set_num_threads(1);
  openblas_set_num_threads(1);
}

TrainSummary train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Network<float> net(cfg.model, cfg.seed);
  AdamW adam(cfg.optim);
  CheckpointMeta meta;
  meta.model = cfg.model;
  meta.seed = cfg.seed;
  meta.best_loss = std::numeric_limits<double>::infinity();
  if (opts.resume) {
    load_parameters(*opts.resume, net);
    const CheckpointMeta prev = load_checkpoint_meta(*opts.resume);
    meta.step = prev.step;
    meta.epoch = prev.epoch;
    meta.best_loss = prev.best_loss;
    meta.epoch_loss_sum = prev.epoch_loss_sum;
    meta.epoch_loss_count = prev.epoch_loss_count;
    adam.load_state(load_extra_tensors(*opts.resume));
  }

  const fs::path root = resolve_data_root(cfg);
  const DatasetManifest manifest = load_manifest(root, "train", cfg.model.height, cfg.model.width);
  std::vector<Tensor<float>> videos;
  for (const auto& v : manifest.videos) videos.push_back(load_video(v, cfg.model.height, cfg.model.width));
  BatchIterator batches(std::move(videos), cfg.model.clip_length, cfg.batch_size, cfg.seed, cfg.clip_stride);
  if (batches.clip_count() == 0) throw ConfigError("training split " + root.string() + " yields no clips");
  const std::size_t per_epoch = batches.batches_per_epoch();
  const std::size_t total = cfg.steps ? cfg.steps : cfg.epochs * per_epoch;

  const fs::path ckdir = cfg.checkpoint_dir;
  fs::create_directories(ckdir);
  TrainSummary summary;
  summary.first_step = meta.step;
  summary.loss_log = ckdir / "loss.csv";
  const bool append = opts.resume && fs::exists(summary.loss_log);
  std::ofstream log(summary.loss_log, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + summary.loss_log.string());
  if (!append) log << "step,epoch,lr,charbonnier,afd,total\n";
  {
    std::ofstream echo(ckdir / "run.cfg");
    for (const auto& [k, v] : cfg.to_key_values()) echo << k << " = " << v << '\n';
  }

  double& epoch_sum = meta.epoch_loss_sum;
  std::size_t& epoch_count = meta.epoch_loss_count;
  const std::size_t end = opts.stop_at ? std::min(total, *opts.stop_at) : total;
  for (std::size_t step = meta.step; step < end; ++step) {
    const std::size_t epoch = step / per_epoch, index = step % per_epoch;
    const Batch b = batches.batch(epoch, index);
    const double lr = cosine_learning_rate(step, total, cfg.optim.learning_rate, cfg.optim.min_learning_rate);
    net.parameters().zero_grad();
    const Tensor<float> pred = net.forward(b.keyframes, Mode::kTrain);
    Tensor<float> grad(pred.shape());
    const LossTerms loss = total_loss(pred, b.targets, cfg.loss, &grad);
    if (!std::isfinite(loss.total())) throw std::runtime_error("loss diverged at step " + std::to_string(step));
    net.backward(grad);
    if (cfg.optim.grad_clip > 0) clip_gradients(net.parameters(), cfg.optim.grad_clip);
    adam.step(net.parameters(), lr);

    char row[160];
    std::snprintf(row, sizeof row, "%zu,%zu,%.9g,%.9g,%.9g,%.9g\n", step + 1, epoch, lr, loss.charbonnier,
                  loss.afd, loss.total());
    log << row << std::flush;
    summary.last_loss = loss.total();
    epoch_sum += loss.total();
    ++epoch_count;
    meta.step = step + 1;
    meta.epoch = epoch;
    if (opts.verbose && cfg.log_every && (meta.step % cfg.log_every == 0 || meta.step == total)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %zu/%zu epoch %zu loss %.6f lr %.3g (%.1fs)\n", meta.step, total, epoch,
                   loss.total(), lr, secs);
    }
    const bool epoch_end = index + 1 == per_epoch || meta.step == total;
    if (epoch_end) {
      const double mean = epoch_sum / static_cast<double>(epoch_count);
      epoch_sum = 0.0;
      epoch_count = 0;
      const bool best = mean < meta.best_loss;
      if (best) meta.best_loss = mean;
      const TensorMap state = adam.state();
      save_checkpoint(ckdir / "last", net, meta, state);
      if (best) save_checkpoint(ckdir / "best", net, meta, state);
    } else if (meta.step == end) {
      save_checkpoint(ckdir / "last", net, meta, adam.state());
    }
  }
  summary.steps = meta.step;
  summary.best_epoch_loss = meta.best_loss;
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

}  // namespace keyrestore
