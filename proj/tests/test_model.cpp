#include <random>
#include <set>

#include "doctest.h"
#include "keyrestore/model.hpp"
#include "oracles.hpp"

using namespace keyrestore;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.height = c.width = 64;
  c.depth = 2;
  c.channels = 8;
  c.heads = 2;
  c.extractor_widths = {8, 8};
  return c;
}

struct GradProbe {
  Network<double> net;
  Tensor<double> x, r;

  explicit GradProbe(const ModelConfig& cfg, std::size_t batch = 1) : net(cfg, 7) {
    std::mt19937_64 rng(11);
    x = Tensor<double>({batch, 3, cfg.height, cfg.width, 3});
    oracle::fill_uniform(x, rng, 0.0, 1.0);
    r = Tensor<double>({batch, cfg.clip_length, cfg.height, cfg.width, 3});
    oracle::fill_uniform(r, rng);
    // Move away from the initial point: with near-zero attention weights the
    // gradients sit at the finite-difference noise floor.
    std::uniform_real_distribution<double> jitter(-0.1, 0.1);
    for (auto& [name, prm] : net.parameters().entries())
      if (prm.trainable)
        for (auto& v : prm.value.values()) v += jitter(rng);
  }

  double loss() {
    const Tensor<double> y = net.forward(x, Mode::kTrain);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  }

  void backprop() {
    net.parameters().zero_grad();
    (void)net.forward(x, Mode::kTrain);
    net.backward(r);
  }
};

}  // namespace

TEST_CASE("full model gradients match finite differences on a tiny config") {
  GradProbe p(tiny_config());
  CHECK(p.net.parameters().trainable_count() <= 50000);
  p.backprop();
  std::vector<std::pair<std::string, std::size_t>> picks;
  std::mt19937_64 rng(5);
  // One coordinate of every trainable tensor, so every path is exercised.
  for (auto& [name, prm] : p.net.parameters().entries())
    if (prm.trainable) picks.emplace_back(name, rng() % prm.value.size());
  // Several gradients here are exactly zero (key biases under softmax, conv
  // biases ahead of batch norm), so relative error is taken against a floor
  // tied to the overall gradient scale.
  double scale = 0.0;
  for (const auto& [name, i] : picks) scale = std::max(scale, std::abs(p.net.parameters().at(name).grad[i]));
  const double floor = 1e-4 * scale;
  std::size_t worst_fail = 0;
  double worst = 0.0;
  for (const auto& [name, i] : picks) {
    auto& prm = p.net.parameters().at(name);
    const double analytic = prm.grad[i];
    const double numeric = oracle::adaptive_central_difference<double>([&] { return p.loss(); }, prm.value[i]);
    const double err = oracle::relative_error(analytic, numeric, floor);
    if (err > worst) worst = err;
    if (err >= 1e-3) {
      ++worst_fail;
      MESSAGE(name << "[" << i << "] analytic " << analytic << " numeric " << numeric);
    }
  }
  MESSAGE("checked " << picks.size() << " tensors, worst relative error " << worst);
  CHECK(worst_fail == 0);
}

TEST_CASE("full model gradients on a random 100-parameter subset") {
  GradProbe p(tiny_config());
  p.backprop();
  std::vector<std::pair<Param<double>*, std::size_t>> flat;
  for (auto& [name, prm] : p.net.parameters().entries())
    if (prm.trainable)
      for (std::size_t i = 0; i < prm.value.size(); ++i) flat.emplace_back(&prm, i);
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    auto [prm, i] = flat[rng() % flat.size()];
    const double numeric = oracle::adaptive_central_difference<double>([&] { return p.loss(); }, prm->value[i]);
    worst = std::max(worst, oracle::relative_error(prm->grad[i], numeric, 1e-12));
  }
  MESSAGE("worst relative error " << worst);
  CHECK(worst < 1e-3);
}

TEST_CASE("temporal upsampling equals a scatter-form transposed convolution") {
  std::mt19937_64 rng(31);
  for (std::size_t t : {5, 7, 9, 11}) {
    ParameterStore<double> store;
    Initializer init(2);
    const std::size_t c = 3, h = 5, w = 4, kt = t - 3;
    TemporalUpsample<double> tu(store, init, "tu", c, t);
    oracle::fill_uniform(tu.weight->value, rng);
    oracle::fill_uniform(tu.bias->value, rng);
    Tensor<double> x({3, h, w, c});
    oracle::fill_uniform(x, rng);
    const Tensor<double> y = tu.forward(x, Mode::kInfer);
    REQUIRE(y.shape() == Shape{kt, h, w, c});

    // The stored gather kernel is the scatter kernel with the spatial taps flipped.
    std::vector<double> scatter(tu.weight->value.size());
    for (std::size_t a = 0; a < kt; ++a)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
          for (std::size_t i = 0; i < c * c; ++i)
            scatter[((a * 3 + ky) * 3 + kx) * c * c + i] =
                tu.weight->value[((a * 3 + (2 - ky)) * 3 + (2 - kx)) * c * c + i];
    const auto ref = oracle::transposed_conv3d(x.storage(), h, w, c, kt, scatter, tu.bias->value.storage());
    double gap = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) gap = std::max(gap, std::abs(ref[i] - y[i]));
    CAPTURE(t);
    CHECK(gap < 1e-12);
  }
}

TEST_CASE("keyframe positions and prototype ordering") {
  CHECK(keyframe_indices(9) == std::array<std::size_t, 3>{0, 4, 8});
  CHECK(keyframe_indices(5) == std::array<std::size_t, 3>{0, 2, 4});
  Tensor<double> clip({9, 2, 2, 1});
  for (std::size_t f = 0; f < 9; ++f)
    for (std::size_t i = 0; i < 4; ++i) clip[f * 4 + i] = double(f);
  const Tensor<double> keys = extract_keyframe_stack(clip);
  CHECK(keys.shape() == Shape{3, 2, 2, 1});
  CHECK(keys[0] == 0.0);
  CHECK(keys[4] == 4.0);
  CHECK(keys[8] == 8.0);

  // Keyframes tagged 100+k, missing frames tagged j: expect [k0 q0 q1 q2 k1 q3 q4 q5 k2].
  Tensor<double> k({3, 1, 1, 1}, 0.0), q({6, 1, 1, 1}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) k[i] = 100.0 + double(i);
  for (std::size_t j = 0; j < 6; ++j) q[j] = double(j);
  const Tensor<double> proto = assemble_prototype(k, q);
  CHECK(proto.storage() == std::vector<double>{100, 0, 1, 2, 101, 3, 4, 5, 102});
  const auto [dk, dq] = split_prototype(proto, k.shape(), q.shape());
  CHECK(dk == k);
  CHECK(dq == q);
}

TEST_CASE("config validation names the violated constraint") {
  ModelConfig c = tiny_config();
  c.clip_length = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.depth = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.height = 48;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(tiny_config().validate());
  CHECK(ModelConfig{}.head_width() == 64);
}

TEST_CASE("network shapes at every checkpoint, batched and unbatched") {
  ModelConfig c = tiny_config();
  Network<float> net(c, 1);
  Tensor<float> x({2, 3, 64, 64, 3}, 0.5f);
  const Tensor<float> y = net.forward(x, Mode::kTrain);
  CHECK(y.shape() == Shape{2, 9, 64, 64, 3});
  CHECK(net.last_encoder_outputs().fe[0].shape() == Shape{2, 3, 16, 16, 8});
  CHECK(net.last_encoder_outputs().e[3].shape() == Shape{2, 3, 2, 2, 8});
  CHECK(net.last_prototype().shape() == Shape{2, 9, 2, 2, 8});
  CHECK(net.last_decoder_output().shape() == Shape{2, 9, 16, 16, 8});
  CHECK(net.last_skip_features()[0].shape() == Shape{2, 9, 16, 16, 8});
  CHECK(net.restore(Tensor<float>({3, 64, 64, 3}, 0.5f)).shape() == Shape{9, 64, 64, 3});
  CHECK_THROWS_AS(net.forward(Tensor<float>({3, 32, 64, 3}), Mode::kInfer), ShapeError);
}

TEST_CASE("skip ablations change the parameter set and keep the output shape") {
  std::size_t counts[2][2];
  for (int cac = 0; cac < 2; ++cac)
    for (int tuc = 0; tuc < 2; ++tuc) {
      ModelConfig c = tiny_config();
      c.cross_attention_skip = cac;
      c.tu_residual_skip = tuc;
      Network<float> net(c, 1);
      counts[cac][tuc] = net.parameters().trainable_count();
      CHECK(net.restore(Tensor<float>({3, 64, 64, 3}, 0.25f)).shape() == Shape{9, 64, 64, 3});
      CHECK((net.attention_block(0) != nullptr) == bool(cac));
      CHECK(net.parameters().contains("tu.skip.weight") == bool(tuc));
    }
  CHECK(counts[1][1] > counts[1][0]);
  CHECK(counts[1][1] > counts[0][1]);
  CHECK(counts[0][0] < counts[0][1]);
}

TEST_CASE("shape contract over random valid configurations") {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 6; ++trial) {
    ModelConfig c;
    c.clip_length = 5 + 2 * (rng() % 3);
    c.height = 32 * (1 + rng() % 2);
    c.width = 32 * (1 + rng() % 2);
    c.depth = 2;
    c.heads = 1 + rng() % 2;
    c.channels = 4 * c.heads;
    c.window = 2 + 2 * (rng() % 2);
    c.extractor_widths = {4, 4};
    c.cross_attention_skip = rng() % 2;
    c.tu_residual_skip = rng() % 2;
    CAPTURE(c.fingerprint());
    REQUIRE_NOTHROW(c.validate());
    Network<float> net(c, trial);
    Tensor<float> x({3, c.height, c.width, 3}, 0.3f);
    CHECK(net.restore(x).shape() == Shape{c.clip_length, c.height, c.width, 3});
  }
}

TEST_CASE("prototype keyframe slots carry the bottleneck features unchanged") {
  Network<float> net(tiny_config(), 3);
  std::mt19937_64 rng(2);
  Tensor<float> x({3, 64, 64, 3});
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  const Tensor<float> first = net.restore(x);
  const Tensor<float> e3 = net.last_encoder_outputs().e[3];
  const Tensor<float> proto = net.last_prototype();
  const std::size_t frame = e3.size() / 3;
  const auto slots = keyframe_indices(9);
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(std::equal(e3.data() + k * frame, e3.data() + (k + 1) * frame, proto.data() + slots[k] * frame));
  CHECK(net.restore(x) == first);  // inference is deterministic
}

TEST_CASE("skip TU weights are shared across levels and separate from the bottleneck") {
  Network<float> net(tiny_config(), 3);
  std::mt19937_64 rng(9);
  Tensor<float> x({3, 64, 64, 3});
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  (void)net.restore(x);
  const auto skips = net.last_skip_features();
  const Tensor<float> proto = net.last_prototype();
  for (auto& v : net.parameters().at("tu.skip.weight").value.values()) v *= 2.0f;
  (void)net.restore(x);
  for (std::size_t n = 0; n < 3; ++n) CHECK_FALSE(net.last_skip_features()[n] == skips[n]);
  CHECK(net.last_prototype() == proto);
  for (auto& v : net.parameters().at("tu.bottleneck.weight").value.values()) v *= 2.0f;
  (void)net.restore(x);
  CHECK_FALSE(net.last_prototype() == proto);

  // Zeroed skip TU: the missing-frame slots of every residual skip are zero.
  net.parameters().at("tu.skip.weight").value.fill(0.0f);
  net.parameters().at("tu.skip.bias").value.fill(0.0f);
  (void)net.restore(x);
  const Tensor<float>& s0 = net.last_skip_features()[0];
  const std::size_t frame = s0.size() / 9;
  for (std::size_t t : {1, 2, 3, 5, 6, 7})
    CHECK(std::all_of(s0.data() + t * frame, s0.data() + (t + 1) * frame, [](float v) { return v == 0.0f; }));
}
