#include "flipreid/checkpoint.hpp"

#include <map>

#include "flipreid/binary_io.hpp"
#include "flipreid/error.hpp"
#include "flipreid/hashing.hpp"

namespace flipreid {

namespace {

struct Entry {
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

void put(io::ByteWriter &w, const std::string &name, const std::vector<std::size_t> &shape,
         std::span<const double> values) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (double v : values) w.f64(v);
}

const Entry &get(const std::map<std::string, Entry> &entries, const std::string &name, std::size_t expected_size) {
  auto it = entries.find(name);
  if (it == entries.end()) throw FormatError("checkpoint is missing \"" + name + "\"");
  if (expected_size != 0 && it->second.values.size() != expected_size)
    throw FormatError("checkpoint entry \"" + name + "\" has " + std::to_string(it->second.values.size()) +
                      " values, expected " + std::to_string(expected_size));
  return it->second;
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model &model) {
  const auto &cfg = model.config();
  const auto &params = model.params();

  std::vector<std::pair<std::string, Entry>> entries;
  auto add = [&](std::string name, std::vector<std::size_t> shape, std::vector<double> v) {
    entries.emplace_back(std::move(name), Entry{std::move(shape), std::move(v)});
  };
  add("config.input", {3}, {double(cfg.in_channels), double(cfg.height), double(cfg.width)});
  std::vector<double> blocks;
  for (const auto &b : cfg.blocks) blocks.insert(blocks.end(), {double(b.out_channels), double(b.kernel), double(b.stride)});
  add("config.blocks", {cfg.blocks.size(), 3}, blocks);
  add("config.regions", {2}, {double(cfg.num_regions), double(cfg.reduced_dim)});
  add("config.num_classes", {1}, {double(cfg.num_classes)});
  add("config.gem", {2}, {cfg.gem_init_p, cfg.gem_eps});
  add("config.batchnorm", {3}, {cfg.bn_momentum, cfg.bn_train_eps, cfg.bn_var_floor});
  add("config.preprocess_mean", {cfg.preprocess.channel_mean.size()}, cfg.preprocess.channel_mean);
  add("config.preprocess_std", {cfg.preprocess.channel_std.size()}, cfg.preprocess.channel_std);
  add("clip.bounds", {2}, {params.clip_lo, params.clip_hi});
  params.for_each([&](const std::string &name, const Param &p) { add(name, p.shape, p.value); });

  io::ByteWriter w;
  w.magic("FRMC");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto &[name, e] : entries) put(w, name, e.shape, e.values);
  return w.release();
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "FRMC checkpoint");
  r.expect_magic("FRMC");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32();
  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    Entry e;
    const auto rank = r.u32();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.u32());
      n *= e.shape.back();
    }
    if (n * 8 > r.remaining()) throw FormatError("checkpoint entry \"" + name + "\" is truncated");
    e.values.resize(n);
    for (auto &v : e.values) v = r.f64();
    entries.emplace(std::move(name), std::move(e));
  }
  r.expect_end();

  ModelConfig cfg;
  const auto &input = get(entries, "config.input", 3).values;
  cfg.in_channels = std::size_t(input[0]);
  cfg.height = std::size_t(input[1]);
  cfg.width = std::size_t(input[2]);
  const auto &blocks = get(entries, "config.blocks", 0);
  if (blocks.shape.size() != 2 || blocks.shape[1] != 3) throw FormatError("config.blocks must be (B, 3)");
  cfg.blocks.clear();
  for (std::size_t b = 0; b < blocks.shape[0]; ++b)
    cfg.blocks.push_back({std::size_t(blocks.values[3 * b]), std::size_t(blocks.values[3 * b + 1]),
                          std::size_t(blocks.values[3 * b + 2])});
  const auto &regions = get(entries, "config.regions", 2).values;
  cfg.num_regions = std::size_t(regions[0]);
  cfg.reduced_dim = std::size_t(regions[1]);
  cfg.num_classes = std::size_t(get(entries, "config.num_classes", 1).values[0]);
  const auto &gem = get(entries, "config.gem", 2).values;
  cfg.gem_init_p = gem[0];
  cfg.gem_eps = gem[1];
  const auto &bn = get(entries, "config.batchnorm", 3).values;
  cfg.bn_momentum = bn[0];
  cfg.bn_train_eps = bn[1];
  cfg.bn_var_floor = bn[2];
  cfg.preprocess.channel_mean = get(entries, "config.preprocess_mean", cfg.in_channels).values;
  cfg.preprocess.channel_std = get(entries, "config.preprocess_std", cfg.in_channels).values;
  const auto &clip = get(entries, "clip.bounds", 2).values;
  cfg.clip_lo = clip[0];
  cfg.clip_hi = clip[1];

  Model model(cfg, 0);
  model.params().clip_lo = clip[0];
  model.params().clip_hi = clip[1];
  model.params().for_each([&](const std::string &name, Param &p) {
    const auto &e = get(entries, name, p.size());
    if (e.shape != p.shape) throw FormatError("checkpoint entry \"" + name + "\" has an unexpected shape");
    p.value = e.values;
  });
  return model;
}

void save_checkpoint(const std::filesystem::path &path, const Model &model) {
  io::write_file_atomic(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path &path) {
  const auto bytes = io::read_file(path);
  return decode_checkpoint(bytes);
}

std::string checkpoint_hash(const Model &model) { return sha1_hex(encode_checkpoint(model)); }

} // namespace flipreid
