#include "keyrestore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace keyrestore {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'K', 'R', 'T', '1'};

json model_to_json(const ModelConfig& c) {
  return {{"clip_length", c.clip_length},       {"height", c.height},
          {"width", c.width},                   {"window", c.window},
          {"channels", c.channels},             {"depth", c.depth},
          {"heads", c.heads},                   {"input_channels", c.input_channels},
          {"extractor_widths", c.extractor_widths}, {"mlp_ratio", c.mlp_ratio},
          {"cross_attention_skip", c.cross_attention_skip},
          {"tu_residual_skip", c.tu_residual_skip}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  c.clip_length = j.at("clip_length");
  c.height = j.at("height");
  c.width = j.at("width");
  c.window = j.at("window");
  c.channels = j.at("channels");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.input_channels = j.at("input_channels");
  c.extractor_widths = j.at("extractor_widths").get<std::vector<std::size_t>>();
  c.mlp_ratio = j.at("mlp_ratio");
  c.cross_attention_skip = j.at("cross_attention_skip");
  c.tu_residual_skip = j.at("tu_residual_skip");
  return c;
}

void write_tensors(const fs::path& dir, const std::vector<std::pair<std::string, const Tensor<float>*>>& items) {
  fs::create_directories(dir);
  for (const auto& [name, t] : items) write_tensor_file(dir / (name + ".bin"), *t);
}

}  // namespace

void write_tensor_file(const fs::path& path, const Tensor<float>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 4);
  const auto rank = static_cast<std::uint32_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  for (std::size_t d : t.shape()) {
    const auto v = static_cast<std::uint64_t>(d);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor<float> read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[4];
  std::uint32_t rank = 0;
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0 ||
      !in.read(reinterpret_cast<char*>(&rank), sizeof rank) || rank > 8)
    throw IoError(path.string() + ": not a tensor file");
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError(path.string() + ": truncated header");
    d = static_cast<std::size_t>(v);
  }
  Tensor<float> t(shape);
  if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float))))
    throw IoError(path.string() + ": truncated payload");
  return t;
}

void save_checkpoint(const fs::path& dir, const Network<float>& net, const CheckpointMeta& meta,
                     const TensorMap& extra) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  std::vector<std::pair<std::string, const Tensor<float>*>> params;
  json names = json::array();
  for (const auto& [name, p] : net.parameters().entries()) {
    params.emplace_back(name, &p.value);
    names.push_back(name);
  }
  write_tensors(tmp / "params", params);
  std::vector<std::pair<std::string, const Tensor<float>*>> extras;
  for (const auto& [name, t] : extra) extras.emplace_back(name, &t);
  if (!extras.empty()) write_tensors(tmp / "extra", extras);
  json doc = {{"format", 1},
              {"fingerprint", meta.model.fingerprint()},
              {"model", model_to_json(meta.model)},
              {"step", meta.step},
              {"epoch", meta.epoch},
              {"best_loss", std::isfinite(meta.best_loss) ? json(meta.best_loss) : json(nullptr)},
              {"seed", meta.seed},
              {"epoch_loss_sum", meta.epoch_loss_sum},
              {"epoch_loss_count", meta.epoch_loss_count},
              {"parameters", names}};
  std::ofstream(tmp / "meta.json") << doc.dump(2) << '\n';
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

CheckpointMeta load_checkpoint_meta(const fs::path& dir) {
  const fs::path path = dir / "meta.json";
  std::ifstream in(path);
  if (!in) throw IoError("checkpoint metadata not found: " + path.string());
  try {
    const json doc = json::parse(in);
    CheckpointMeta m;
    m.model = model_from_json(doc.at("model"));
    m.step = doc.at("step");
    m.epoch = doc.at("epoch");
    const json& best = doc.at("best_loss");
    m.best_loss = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
    m.seed = doc.at("seed");
    m.epoch_loss_sum = doc.value("epoch_loss_sum", 0.0);
    m.epoch_loss_count = doc.value("epoch_loss_count", std::size_t{0});
    return m;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint metadata " + path.string() + ": " + e.what());
  }
}

void load_parameters(const fs::path& dir, Network<float>& net) {
  const CheckpointMeta meta = load_checkpoint_meta(dir);
  const std::string have = net.config().fingerprint(), want = meta.model.fingerprint();
  if (have != want)
    throw ConfigError("checkpoint " + dir.string() + " was written for model [" + want +
                      "] but the configured model is [" + have + "]");
  for (auto& [name, p] : net.parameters().entries()) {
    Tensor<float> t = read_tensor_file(dir / "params" / (name + ".bin"));
    if (t.shape() != p.value.shape())
      throw ConfigError("checkpoint parameter " + name + " has shape " + shape_string(t.shape()) +
                        ", expected " + shape_string(p.value.shape()));
    p.value = std::move(t);
  }
}

TensorMap load_extra_tensors(const fs::path& dir) {
  TensorMap out;
  const fs::path extra = dir / "extra";
  if (!fs::is_directory(extra)) return out;
  for (const auto& f : fs::directory_iterator(extra))
    if (f.path().extension() == ".bin") out.emplace(f.path().stem().string(), read_tensor_file(f.path()));
  return out;
}

}  // namespace keyrestore
