#include "cmformer/checkpoint.hpp"

#include <cstring>
#include <map>

#include "cmformer/binio.hpp"

namespace cmf {

namespace {

constexpr char kMagic[5] = "CMCK";
constexpr std::uint32_t kVersion = 1;

struct RawTensor {
  Shape shape;
  std::vector<float> values;
};

void write_entry(BinWriter& w, const std::string& name, const Shape& shape,
                 const std::vector<float>& values) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (float v : values) w.f32(v);
}

std::vector<float> to_f32(const Tensor& t) {
  std::vector<float> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(t.data()[i]);
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model) {
  auto params = model.named_params();
  BinWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(params.size() + 2));

  const DecoderConfig& dc = model.cfg.decoder;
  std::vector<float> config{
      static_cast<float>(model.cfg.n_classes),
      static_cast<float>(model.cfg.n_queries),
      static_cast<float>(model.cfg.width),
      static_cast<float>(model.cfg.attn_heads),
      model.cfg.share_query_proj ? 1.0f : 0.0f,
      dc.enhancement.at(32) ? 1.0f : 0.0f,
      dc.enhancement.at(16) ? 1.0f : 0.0f,
      dc.enhancement.at(8) ? 1.0f : 0.0f,
  };
  write_entry(w, "__config__", {config.size()}, config);

  std::vector<float> schedule;
  for (int s : dc.resolution_schedule)
    schedule.push_back(static_cast<float>(s));
  write_entry(w, "__schedule__", {schedule.size()}, schedule);

  for (auto& [name, tensor] : params) {
    write_entry(w, name, tensor.shape(), to_f32(tensor));
  }
  w.close();
}

Model load_checkpoint(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kMagic);
  r.expect_version(kVersion);
  const std::uint32_t count = r.u32();

  std::map<std::string, RawTensor> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const std::uint8_t rank = r.u8();
    RawTensor raw;
    for (std::uint8_t d = 0; d < rank; ++d) raw.shape.push_back(r.u32());
    raw.values.resize(shape_numel(raw.shape));
    for (float& v : raw.values) v = r.f32();
    entries.emplace(std::move(name), std::move(raw));
  }

  auto cfg_it = entries.find("__config__");
  auto sched_it = entries.find("__schedule__");
  if (cfg_it == entries.end() || sched_it == entries.end() ||
      cfg_it->second.values.size() < 8) {
    throw format_error("checkpoint missing config entries: " + path);
  }
  const auto& cv = cfg_it->second.values;
  ModelConfig cfg;
  cfg.n_classes = static_cast<std::size_t>(cv[0]);
  cfg.n_queries = static_cast<std::size_t>(cv[1]);
  cfg.width = static_cast<std::size_t>(cv[2]);
  cfg.attn_heads = static_cast<std::size_t>(cv[3]);
  cfg.share_query_proj = cv[4] != 0.0f;
  cfg.decoder.enhancement[32] = cv[5] != 0.0f;
  cfg.decoder.enhancement[16] = cv[6] != 0.0f;
  cfg.decoder.enhancement[8] = cv[7] != 0.0f;
  cfg.decoder.resolution_schedule.clear();
  for (float s : sched_it->second.values)
    cfg.decoder.resolution_schedule.push_back(static_cast<int>(s));
  cfg.decoder.n_layers = cfg.decoder.resolution_schedule.size();

  Model model = Model::init(cfg, 0);
  for (auto& [name, tensor] : model.named_params()) {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw format_error("checkpoint missing tensor '" + name + "': " + path);
    }
    if (it->second.shape != tensor.shape()) {
      throw config_error("checkpoint tensor '" + name + "' has shape " +
                         shape_str(it->second.shape) + ", model expects " +
                         shape_str(tensor.shape()));
    }
    for (std::size_t i = 0; i < tensor.numel(); ++i)
      tensor.data()[i] = static_cast<double>(it->second.values[i]);
  }
  return model;
}

}  // namespace cmf
