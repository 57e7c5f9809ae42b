#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "keyrestore/checkpoint.hpp"
#include "keyrestore/losses.hpp"
#include "keyrestore/model.hpp"

namespace keyrestore {

struct OptimizerConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;  // decoupled
  double min_learning_rate = 0.0;  // cosine floor
  double grad_clip = 0.0;  // global L2 norm; 0 disables

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optim;
  std::size_t steps = 0;   // total optimisation steps; 0 means epochs * batches
  std::size_t epochs = 10;
  std::size_t batch_size = 4;
  std::size_t clip_stride = 1;
  std::uint64_t seed = 42;
  std::string data_root = "data";
  std::string checkpoint_dir = "checkpoints";
  std::size_t log_every = 10;  // progress lines on stderr

  void validate() const;
  /// Sets one key; throws ConfigError on unknown keys or bad values.
  void apply(const std::string& key, const std::string& value);
  /// Every key with its current value, in a stable order.
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
};

/// Defaults overridden by a key=value file.
RunConfig load_run_config(const std::filesystem::path& path);

/// KEYRESTORE_DATA_ROOT when set, else cfg.data_root.
std::filesystem::path resolve_data_root(const RunConfig& cfg);

/// Cosine annealing from base to floor over total steps.
double cosine_learning_rate(std::size_t step, std::size_t total, double base, double floor = 0.0);

/// Adam with decoupled weight decay applied to every trainable parameter.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(ParameterStore<float>& store, double learning_rate);
  std::size_t steps_taken() const { return t_; }

  /// Moment estimates for checkpointing ("adam.m.<param>", "adam.v.<param>", "adam.t").
  TensorMap state() const;
  void load_state(const TensorMap& state);

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor<float>> m_, v_;
};

/// Rescales gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_gradients(ParameterStore<float>& store, double max_norm);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  bool verbose = true;
  /// Stop (and checkpoint) once this many steps are done, without changing
  /// the schedule; lets a long run proceed in chunks.
  std::optional<std::size_t> stop_at;
};

struct TrainSummary {
  std::size_t first_step = 0;
  std::size_t steps = 0;  // final step counter
  double last_loss = 0.0;
  double best_epoch_loss = 0.0;
  double seconds = 0.0;
  std::filesystem::path loss_log;
};

/// Trains on <data_root>/train. Writes <checkpoint_dir>/loss.csv (one row per
/// step), <checkpoint_dir>/last after every epoch and at the end, and
/// <checkpoint_dir>/best for the lowest mean epoch loss.
TrainSummary train(const RunConfig& cfg, const TrainOptions& opts = {});

/// Single-threaded numerics for reproducible runs.
void set_deterministic();

}  // namespace keyrestore
