#pragma once

#include "keyrestore/tensor.hpp"

namespace keyrestore {

struct LossConfig {
  double epsilon = 1e-3;
  bool afd = true;  // false trains on the Charbonnier term alone

  void validate() const;
};

/// Loss inputs are clips (T, H, W, c) or batches (B, T, H, W, c). Each term
/// averages over the elements of a frame (or frame pair), sums over frames,
/// and averages over the batch.
///
/// When grad is non-null, d(loss)/d(pred) is added into it; it must already
/// have pred's shape.
template <typename T>
double charbonnier(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg,
                   Tensor<T>* grad = nullptr);

/// Mismatch between elementwise squared adjacent-frame differences of pred
/// and target, under the same robust penalty. Needs T >= 2.
template <typename T>
double afd_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg,
                Tensor<T>* grad = nullptr);

struct LossTerms {
  double charbonnier = 0.0;
  double afd = 0.0;
  double total() const { return charbonnier + afd; }
};

/// Unit-weight sum; the AFD term is skipped (reported as 0) when cfg.afd is off.
template <typename T>
LossTerms total_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg,
                     Tensor<T>* grad = nullptr);

}  // namespace keyrestore
