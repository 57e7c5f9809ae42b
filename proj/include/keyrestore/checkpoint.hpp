#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "keyrestore/model.hpp"

namespace keyrestore {

/// Everything besides tensors that a checkpoint records.
struct CheckpointMeta {
  ModelConfig model;
  std::size_t step = 0;  // optimisation steps completed
  std::size_t epoch = 0;
  double best_loss = 0.0;  // +inf until an epoch has completed
  std::uint64_t seed = 0;
  // Running loss of a partially completed epoch, so a resumed run reports
  // the same epoch mean as an uninterrupted one.
  double epoch_loss_sum = 0.0;
  std::size_t epoch_loss_count = 0;
};

using TensorMap = std::map<std::string, Tensor<float>>;

/// Little-endian tensor file: "KRT1", u32 rank, u64 dims..., float32 payload.
void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_tensor_file(const std::filesystem::path& path);

/// Writes <dir>/meta.json, <dir>/params/<name>.bin for every parameter
/// (batch-norm running statistics included) and <dir>/extra/<name>.bin for
/// `extra` tensors (optimizer state). The directory is replaced atomically.
void save_checkpoint(const std::filesystem::path& dir, const Network<float>& net,
                     const CheckpointMeta& meta, const TensorMap& extra = {});

CheckpointMeta load_checkpoint_meta(const std::filesystem::path& dir);

/// Loads parameters into net. Throws ConfigError citing both fingerprints
/// when the checkpoint was written for a different architecture.
void load_parameters(const std::filesystem::path& dir, Network<float>& net);

TensorMap load_extra_tensors(const std::filesystem::path& dir);

}  // namespace keyrestore
