#include "keyrestore/losses.hpp"

#include <cmath>

namespace keyrestore {

void LossConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon))
    throw ConfigError("loss epsilon must be a positive finite number");
}

namespace {

template <typename T>
FeatureDims check_pair(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad,
                       const char* what) {
  require_same_shape(pred, target, what);
  if (pred.rank() != 4 && pred.rank() != 5)
    throw ShapeError(std::string(what) + ": expected (T,H,W,c) or (B,T,H,W,c), got " +
                     shape_string(pred.shape()));
  if (grad) require_same_shape(pred, *grad, what);
  return FeatureDims::of(pred.shape());
}

}  // namespace

template <typename T>
double charbonnier(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg,
                   Tensor<T>* grad) {
  const FeatureDims d = check_pair(pred, target, grad, "charbonnier");
  const double eps2 = cfg.epsilon * cfg.epsilon;
  const std::size_t n = pred.size();
  const double scale = 1.0 / static_cast<double>(d.pixels() * d.channels * d.batch);
  const T* p = pred.data();
  const T* g = target.data();
  T* dp = grad ? grad->data() : nullptr;
  double sum = 0.0;
#pragma omp parallel for reduction(+ : sum) schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = static_cast<double>(p[i]) - static_cast<double>(g[i]);
    const double s = std::sqrt(diff * diff + eps2);
    sum += diff * diff / (s + cfg.epsilon);  // s - eps without cancellation
    if (dp) dp[i] += static_cast<T>(diff / s * scale);
  }
  // The eps floor of every term is added back in closed form, so a perfect
  // prediction costs exactly frames * eps.
  return cfg.epsilon * static_cast<double>(d.frames) + sum * scale;
}

template <typename T>
double afd_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg,
                Tensor<T>* grad) {
  const FeatureDims d = check_pair(pred, target, grad, "afd_loss");
  if (d.frames < 2) throw ShapeError("afd_loss needs at least 2 frames");
  const double eps2 = cfg.epsilon * cfg.epsilon;
  const std::size_t frame = d.pixels() * d.channels;
  const double scale = 1.0 / static_cast<double>(frame * d.batch);
  const T* p = pred.data();
  const T* g = target.data();
  T* dp = grad ? grad->data() : nullptr;
  double sum = 0.0;
  // Pairs (t, t+1) share frame t+1, so gradient writes are split by frame
  // offset i and never collide across threads.
#pragma omp parallel for reduction(+ : sum) schedule(static)
  for (std::size_t i = 0; i < frame; ++i) {
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = b * d.frames * frame + i;
      for (std::size_t t = 0; t + 1 < d.frames; ++t) {
        const std::size_t a = base + t * frame, c = a + frame;
        const double dphat = static_cast<double>(p[a]) - static_cast<double>(p[c]);
        const double dreal = static_cast<double>(g[a]) - static_cast<double>(g[c]);
        const double r = dphat * dphat - dreal * dreal;
        const double s = std::sqrt(r * r + eps2);
        sum += r * r / (s + cfg.epsilon);
        if (dp) {
          const double k = r / s * scale * 2.0 * dphat;
          dp[a] += static_cast<T>(k);
          dp[c] -= static_cast<T>(k);
        }
      }
    }
  }
  return cfg.epsilon * static_cast<double>(d.frames - 1) + sum * scale;
}

template <typename T>
LossTerms total_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg,
                     Tensor<T>* grad) {
  cfg.validate();
  LossTerms out;
  out.charbonnier = charbonnier(pred, target, cfg, grad);
  if (cfg.afd) out.afd = afd_loss(pred, target, cfg, grad);
  return out;
}

template double charbonnier<float>(const Tensor<float>&, const Tensor<float>&, const LossConfig&,
                                   Tensor<float>*);
template double charbonnier<double>(const Tensor<double>&, const Tensor<double>&,
                                    const LossConfig&, Tensor<double>*);
template double afd_loss<float>(const Tensor<float>&, const Tensor<float>&, const LossConfig&,
                                Tensor<float>*);
template double afd_loss<double>(const Tensor<double>&, const Tensor<double>&, const LossConfig&,
                                 Tensor<double>*);
template LossTerms total_loss<float>(const Tensor<float>&, const Tensor<float>&,
                                     const LossConfig&, Tensor<float>*);
template LossTerms total_loss<double>(const Tensor<double>&, const Tensor<double>&,
                                      const LossConfig&, Tensor<double>*);

}  // namespace keyrestore
