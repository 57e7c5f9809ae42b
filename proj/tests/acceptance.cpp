// Acceptance report: one PASS/FAIL line per criterion, exit status 0 only
// when every criterion passes.
//
//   acceptance [--e2e DIR] [--only N,...]
//
// Criterion 8 reads the artifacts of tools/run_desk_experiment.sh from DIR
// (default: $KEYRESTORE_E2E_DIR, else ./e2e).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "keyrestore/attention.hpp"
#include "keyrestore/checkpoint.hpp"
#include "keyrestore/data.hpp"
#include "keyrestore/losses.hpp"
#include "keyrestore/model.hpp"
#include "keyrestore/scoring.hpp"
#include "keyrestore/training.hpp"
#include "oracles.hpp"

using namespace keyrestore;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("keyrestore_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.height = c.width = 64;
  c.depth = 2;
  c.channels = 8;
  c.heads = 2;
  c.extractor_widths = {8, 8};
  return c;
}

ModelConfig desk_model() {
  ModelConfig c;
  c.height = c.width = 64;
  c.depth = 2;
  return c;
}

// ---------------------------------------------------------------- 1
Outcome window_machinery() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  std::size_t bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng() % 8, b = 1 + rng() % 2, f = 1 + rng() % 9;
    const std::size_t h = m * (1 + rng() % 6), w = m * (1 + rng() % 6), c = 1 + rng() % 8;
    Tensor<float> x({b, f, h, w, c});
    oracle::fill_uniform(x, rng);
    if (!(reverse_windows(partition_windows(x, m), FeatureDims::of(x.shape())) == x)) ++bad;
    const auto s = static_cast<std::ptrdiff_t>(rng() % std::min(h, w));
    if (!(cyclic_shift(cyclic_shift(x, s), -s) == x)) ++bad;
  }
  const double secs = since(t0);
  return {bad == 0 && secs < 10.0, std::to_string(bad) + " mismatches over 200 shapes, " + fmt("%.2fs", secs)};
}

// ---------------------------------------------------------------- 2
Outcome attention_oracle() {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + rng() % 3, c = heads * (1 + rng() % 4), m = 2;
    const bool cross = trial % 2 == 1;
    const std::size_t fq = cross ? 9 : 1 + rng() % 3, fk = cross ? 3 : fq;
    const std::size_t lq = fq * m * m, lk = fk * m * m, nw = 4;
    ParameterStore<double> store;
    Initializer init(rng());
    WindowAttention<double> attn(store, init, "a", c, heads);
    for (auto& [n, p] : store.entries()) oracle::fill_uniform(p.value, rng, -0.5, 0.5);
    std::optional<Tensor<double>> mask;
    if (trial % 3 == 0) mask = shifted_window_mask<double>(4, 4, m, 1, fq, fk);
    Tensor<double> q({nw, lq, c}), kv({nw, lk, c});
    oracle::fill_uniform(q, rng);
    oracle::fill_uniform(kv, rng);
    const Tensor<double>& src = cross ? kv : q;
    const Tensor<double> y = attn.forward(q, src, mask ? &*mask : nullptr, Mode::kInfer);
    auto vals = [](const Param<double>* p) { return p->value.storage(); };
    const auto wq = vals(attn.wq.weight), bq = vals(attn.wq.bias), wk = vals(attn.wk.weight),
               bk = vals(attn.wk.bias), wv = vals(attn.wv.weight), bv = vals(attn.wv.bias),
               wo = vals(attn.wo.weight), bo = vals(attn.wo.bias);
    for (std::size_t win = 0; win < nw; ++win) {
      std::vector<double> xq(q.data() + win * lq * c, q.data() + (win + 1) * lq * c);
      std::vector<double> xk(src.data() + win * lk * c, src.data() + (win + 1) * lk * c);
      std::vector<double> mk;
      if (mask) mk.assign(mask->data() + win * lq * lk, mask->data() + (win + 1) * lq * lk);
      const auto ref = oracle::dense_attention(xq, xk, lq, lk, c, heads, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
                                               mask ? &mk : nullptr);
      for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - y[win * lq * c + i]));
    }
  }
  return {worst <= 1e-6, fmt("max abs gap %.3g over 50 cases (self and cross)", worst)};
}

// ---------------------------------------------------------------- 3
Outcome gradient_checks() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(3);
  const LossConfig lc;
  Tensor<double> p({2, 5, 4, 4, 3}), g({2, 5, 4, 4, 3});
  oracle::fill_uniform(p, rng, 0.0, 1.0);
  oracle::fill_uniform(g, rng, 0.0, 1.0);
  double loss_worst = 0.0;
  for (int term = 0; term < 2; ++term) {
    Tensor<double> grad(p.shape());
    if (term == 0) charbonnier(p, g, lc, &grad);
    else afd_loss(p, g, lc, &grad);
    auto f = [&] { return term == 0 ? charbonnier(p, g, lc) : afd_loss(p, g, lc); };
    for (std::size_t i = 0; i < p.size(); ++i)
      loss_worst = std::max(loss_worst, oracle::relative_error(grad[i], oracle::adaptive_central_difference<double>(f, p[i]), 1e-8));
  }

  Network<double> net(tiny_model(), 7);
  Tensor<double> x({1, 3, 64, 64, 3}), r({1, 9, 64, 64, 3});
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  oracle::fill_uniform(r, rng);
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (auto& [n, prm] : net.parameters().entries())
    if (prm.trainable)
      for (auto& v : prm.value.values()) v += jitter(rng);
  auto loss = [&] {
    const Tensor<double> y = net.forward(x, Mode::kTrain);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  net.parameters().zero_grad();
  (void)net.forward(x, Mode::kTrain);
  net.backward(r);
  std::vector<std::pair<Param<double>*, std::size_t>> flat;
  for (auto& [n, prm] : net.parameters().entries())
    if (prm.trainable)
      for (std::size_t i = 0; i < prm.value.size(); ++i) flat.emplace_back(&prm, i);
  std::mt19937_64 pick(17);
  double model_worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    auto [prm, i] = flat[pick() % flat.size()];
    const double num = oracle::adaptive_central_difference<double>(loss, prm->value[i]);
    model_worst = std::max(model_worst, oracle::relative_error(prm->grad[i], num, 1e-12));
  }
  const double secs = since(t0);
  return {loss_worst <= 1e-6 && model_worst <= 1e-3 && secs < 300.0,
          fmt("losses %.3g rel, ", loss_worst) + fmt("tiny model %.3g rel on 100 params, ", model_worst) +
              fmt("%.0fs", secs)};
}

// ---------------------------------------------------------------- 4
Outcome loss_identities() {
  std::mt19937_64 rng(4);
  Tensor<double> x({9, 32, 32, 3});
  oracle::fill_uniform(x, rng, 0.0, 1.0);
  const LossConfig lc;
  const double c = charbonnier(x, x, lc), a = afd_loss(x, x, lc);
  return {c == 9 * 1e-3 && a == 8 * 1e-3, fmt("charbonnier %.17g, ", c) + fmt("afd %.17g at T=9", a)};
}

// ---------------------------------------------------------------- 5
Outcome shape_contract() {
  const ModelConfig cfg;
  Network<float> net(cfg, 5);
  Tensor<float> keys({3, 256, 256, 3}, 0.5f);
  const Tensor<float> f = net.extract_features(keys.reshaped({1, 3, 256, 256, 3}), Mode::kInfer);
  const Tensor<float> y = net.restore(keys);
  const bool ok = f.shape() == Shape{1, 3, 64, 64, 96} && y.shape() == Shape{9, 256, 256, 3};
  return {ok, "features " + shape_string(f.shape()) + ", output " + shape_string(y.shape())};
}

// ---------------------------------------------------------------- 6
Outcome scoring() {
  const double p = psnr_from(1.0, 0.01);
  const auto s = score_video("v", 3, {{{0, 1}, 30.0}, {{1, 1}, 20.0}, {{2, 1}, 25.0}});
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 300;
    std::vector<double> sc(n);
    std::vector<int> lb(n);
    for (std::size_t i = 0; i < n; ++i) {
      sc[i] = trial % 2 ? double(rng() % 7) : std::uniform_real_distribution<double>(0, 1)(rng);
      lb[i] = int(rng() % 4 == 0);
    }
    lb[0] = 1;
    lb[1] = 0;
    AnomalyScoreSeries one{"x", {}, sc, lb};
    worst = std::max(worst, std::abs(frame_auc({one}) - oracle::pairwise_auc(sc, lb)));
  }
  const bool ok = p == 20.0 && s.scores == std::vector<double>{0.0, 1.0, 0.5} && worst <= 1e-12;
  std::ostringstream d;
  d << "psnr " << p << " dB, scores [" << s.scores[0] << "," << s.scores[1] << "," << s.scores[2]
    << "], auc gap " << worst;
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 7
Outcome ablations() {
  std::mt19937_64 rng(7);
  Tensor<float> keys({1, 3, 64, 64, 3}), target({1, 9, 64, 64, 3});
  oracle::fill_uniform(keys, rng, 0.0, 1.0);
  oracle::fill_uniform(target, rng, 0.0, 1.0);
  const char* names[4] = {"w/o DSC", "w CAC", "w TUC", "w DSC"};
  std::string detail;
  bool ok = true;
  for (int k = 0; k < 4; ++k) {
    ModelConfig cfg = desk_model();
    cfg.cross_attention_skip = k == 1 || k == 3;
    cfg.tu_residual_skip = k == 2 || k == 3;
    Network<float> net(cfg, 42);
    AdamW opt(OptimizerConfig{});
    net.parameters().zero_grad();
    const Tensor<float> y = net.forward(keys, Mode::kTrain);
    Tensor<float> grad(y.shape());
    const double loss = total_loss(y, target, LossConfig{}, &grad).total();
    net.backward(grad);
    opt.step(net.parameters(), 2e-4);
    const Tensor<float> z = net.restore(keys.reshaped({3, 64, 64, 3}));
    const bool good = y.shape() == Shape{1, 9, 64, 64, 3} && z.shape() == Shape{9, 64, 64, 3} && std::isfinite(loss);
    ok = ok && good;
    detail += std::string(k ? "; " : "") + names[k] + (good ? " ok" : " BAD");
  }
  return {ok, detail + " (64x64 desk profile, one step each)"};
}

// ---------------------------------------------------------------- 8
std::optional<double> split_auc(const fs::path& dir) {
  if (!fs::is_directory(dir)) return std::nullopt;
  std::vector<AnomalyScoreSeries> series;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".csv") series.push_back(read_score_csv(e.path()));
  if (series.empty()) return std::nullopt;
  return frame_auc(series);
}

Outcome end_to_end(const fs::path& root) {
  const auto dsc = split_auc(root / "scores" / "dsc"), base = split_auc(root / "scores" / "no_dsc");
  if (!dsc || !base)
    return {false, "no experiment artifacts under " + root.string() + " (run tools/run_desk_experiment.sh)"};
  std::size_t steps = 0;
  double hours = 0.0;
  try {
    steps = load_checkpoint_meta(root / "runs" / "dsc" / "last").step;
    const auto t = fs::last_write_time(root / "runs" / "dsc" / "last" / "meta.json") -
                   fs::last_write_time(root / "runs" / "dsc" / "run.cfg");
    hours = std::chrono::duration<double>(t).count() / 3600.0;
  } catch (const std::exception&) {
  }
  const bool ok = *dsc >= 0.85 && *dsc > *base && hours < 4.0;
  return {ok, fmt("AUC %.4f with both skips", *dsc) + fmt(" vs %.4f without", *base) +
                  ", " + std::to_string(steps) + " steps" + fmt(" in %.2f h CPU", hours)};
}

// ---------------------------------------------------------------- 9
Outcome reproducibility() {
  set_deterministic();
  const fs::path data = scratch("data"), a = scratch("a"), b = scratch("b"), ck = scratch("ckpt");
  SyntheticSpec spec;
  spec.num_train_videos = 1;
  spec.num_test_videos = 0;
  spec.frames_per_video = 21;
  generate_synthetic(spec, data);
  RunConfig cfg;
  cfg.model = tiny_model();
  cfg.batch_size = 2;
  cfg.steps = 4;
  cfg.clip_stride = 4;
  cfg.data_root = data.string();
  cfg.checkpoint_dir = a.string();
  train(cfg, TrainOptions{std::nullopt, false});
  cfg.checkpoint_dir = b.string();
  train(cfg, TrainOptions{std::nullopt, false});
  const bool same_log = slurp(a / "loss.csv") == slurp(b / "loss.csv") && !slurp(a / "loss.csv").empty();

  Network<float> src(cfg.model, 9), dst(cfg.model, 10);
  load_parameters(a / "last", src);
  save_checkpoint(ck, src, {cfg.model, 4, 1, 0.0, 42});
  load_parameters(ck, dst);
  bool exact = true;
  for (const auto& [name, p] : src.parameters().entries()) exact = exact && dst.parameters().at(name).value == p.value;
  for (const auto& d : {data, a, b, ck}) fs::remove_all(d);
  return {same_log && exact, std::string("loss logs ") + (same_log ? "identical" : "DIFFER") +
                                 ", checkpoint round trip " + (exact ? "bit-exact" : "NOT exact")};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path e2e = std::getenv("KEYRESTORE_E2E_DIR") ? fs::path(std::getenv("KEYRESTORE_E2E_DIR")) : fs::path("e2e");
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--e2e" && i + 1 < argc) {
      e2e = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: %s [--e2e DIR] [--only N,...]\n", argv[0]);
      return 2;
    }
  }
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"window machinery", window_machinery},
      {"attention oracle", attention_oracle},
      {"gradient checks", gradient_checks},
      {"loss identities", loss_identities},
      {"shape contract", shape_contract},
      {"scoring", scoring},
      {"ablation plumbing", ablations},
      {"end-to-end desk experiment", [&] { return end_to_end(e2e); }},
      {"reproducibility", reproducibility},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
