#include <random>

#include "doctest.h"
#include "keyrestore/losses.hpp"
#include "oracles.hpp"

using namespace keyrestore;

namespace {

// Plain-loop definitions: per-frame mean of the robust penalty, summed over
// frames (or adjacent pairs), averaged over the batch.
double charbonnier_oracle(const Tensor<double>& p, const Tensor<double>& g, double eps) {
  const FeatureDims d = FeatureDims::of(p.shape());
  const std::size_t frame = d.pixels() * d.channels;
  double total = 0.0;
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < d.frames; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < frame; ++i) {
        const std::size_t k = (b * d.frames + t) * frame + i;
        s += std::sqrt((p[k] - g[k]) * (p[k] - g[k]) + eps * eps);
      }
      total += s / double(frame);
    }
  return total / double(d.batch);
}

double afd_oracle(const Tensor<double>& p, const Tensor<double>& g, double eps) {
  const FeatureDims d = FeatureDims::of(p.shape());
  const std::size_t frame = d.pixels() * d.channels;
  double total = 0.0;
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t + 1 < d.frames; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < frame; ++i) {
        const std::size_t k0 = (b * d.frames + t) * frame + i, k1 = k0 + frame;
        const double dp = (p[k0] - p[k1]) * (p[k0] - p[k1]);
        const double dg = (g[k0] - g[k1]) * (g[k0] - g[k1]);
        s += std::sqrt((dp - dg) * (dp - dg) + eps * eps);
      }
      total += s / double(frame);
    }
  return total / double(d.batch);
}

Tensor<double> random_clip(Shape s, std::mt19937_64& rng) {
  Tensor<double> t(std::move(s));
  oracle::fill_uniform(t, rng, 0.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("a perfect prediction costs exactly frames times epsilon") {
  const LossConfig cfg;
  std::mt19937_64 rng(1);
  for (std::size_t t : {5, 9, 17}) {
    const Tensor<double> x = random_clip({t, 16, 16, 3}, rng);
    CHECK(charbonnier(x, x, cfg) == double(t) * 1e-3);
    CHECK(afd_loss(x, x, cfg) == double(t - 1) * 1e-3);
    const Tensor<float> xf = x.cast<float>();
    CHECK(charbonnier(xf, xf, cfg) == double(t) * 1e-3);
    CHECK(afd_loss(xf, xf, cfg) == double(t - 1) * 1e-3);
    const Tensor<double> xb = random_clip({3, t, 8, 8, 3}, rng);
    CHECK(total_loss(xb, xb, cfg).total() == double(t) * 1e-3 + double(t - 1) * 1e-3);
  }
}

TEST_CASE("loss values match plain-loop definitions") {
  std::mt19937_64 rng(2);
  for (double eps : {1e-3, 0.1}) {
    LossConfig cfg;
    cfg.epsilon = eps;
    const Tensor<double> p = random_clip({2, 7, 6, 5, 3}, rng), g = random_clip({2, 7, 6, 5, 3}, rng);
    CHECK(charbonnier(p, g, cfg) == doctest::Approx(charbonnier_oracle(p, g, eps)).epsilon(1e-13));
    CHECK(afd_loss(p, g, cfg) == doctest::Approx(afd_oracle(p, g, eps)).epsilon(1e-13));
    cfg.afd = false;
    const LossTerms terms = total_loss(p, g, cfg);
    CHECK(terms.afd == 0.0);
    CHECK(terms.total() == terms.charbonnier);
  }
}

TEST_CASE("a constant offset leaves the adjacent-difference term at its floor") {
  std::mt19937_64 rng(3);
  const Tensor<double> g = random_clip({9, 4, 4, 3}, rng);
  Tensor<double> p = g;
  for (auto& v : p.values()) v += 0.25;
  const LossConfig cfg;
  CHECK(afd_loss(p, g, cfg) == doctest::Approx(8e-3).epsilon(1e-9));
  CHECK(charbonnier(p, g, cfg) == doctest::Approx(9.0 * std::sqrt(0.0625 + 1e-6)).epsilon(1e-12));
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(4);
  const LossConfig cfg;
  Tensor<double> p = random_clip({2, 5, 4, 4, 3}, rng);
  const Tensor<double> g = random_clip({2, 5, 4, 4, 3}, rng);
  for (int term = 0; term < 2; ++term) {
    auto f = [&] { return term == 0 ? charbonnier(p, g, cfg) : afd_loss(p, g, cfg); };
    Tensor<double> grad(p.shape());
    if (term == 0) charbonnier(p, g, cfg, &grad);
    else afd_loss(p, g, cfg, &grad);
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double num = oracle::central_difference<double>(f, p[i], 1e-6);
      worst = std::max(worst, oracle::relative_error(grad[i], num, 1e-8));
    }
    CAPTURE(term);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("gradients accumulate and shapes are checked") {
  const LossConfig cfg;
  Tensor<double> p({5, 2, 2, 1}, 0.5), g({5, 2, 2, 1}, 0.0);
  Tensor<double> once(p.shape()), twice(p.shape());
  charbonnier(p, g, cfg, &once);
  charbonnier(p, g, cfg, &twice);
  charbonnier(p, g, cfg, &twice);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(twice[i] == doctest::Approx(2.0 * once[i]));
  Tensor<double> bad({4, 2, 2, 1});
  CHECK_THROWS_AS(charbonnier(p, bad, cfg), ShapeError);
  CHECK_THROWS_AS(afd_loss(Tensor<double>({1, 2, 2, 1}), Tensor<double>({1, 2, 2, 1}), cfg), ShapeError);
  LossConfig broken;
  broken.epsilon = 0.0;
  CHECK_THROWS_AS(broken.validate(), ConfigError);
}
