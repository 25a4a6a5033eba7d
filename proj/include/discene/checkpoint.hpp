#pragma once

#include <fstream>
#include <string>

#include "discene/model.hpp"
#include "discene/scene_io.hpp"

namespace discene {

namespace detail {

/// ModelConfig packed into a flat numeric tensor so checkpoints are
/// self-describing within the plain tensor container format.
inline Tensor config_to_tensor(const ModelConfig& config) {
  std::vector<double> v;
  v.push_back(1);  // layout version
  v.push_back(static_cast<double>(config.n_queries));
  v.push_back(static_cast<double>(config.n_layers()));
  for (const std::size_t r : config.points_per_layer) {
    v.push_back(static_cast<double>(r));
  }
  v.push_back(static_cast<double>(config.feature_dim));
  v.push_back(static_cast<double>(config.n_classes));
  v.push_back(static_cast<double>(config.feat_channels));
  v.push_back(static_cast<double>(config.encoder.width));
  v.push_back(static_cast<double>(config.encoder.depth));
  v.push_back(static_cast<double>(config.encoder.channels));
  v.push_back(static_cast<double>(config.encoder.patch));
  v.push_back(config.depth_branch_enabled ? 1.0 : 0.0);
  v.push_back(static_cast<double>(config.depth_hidden));
  v.push_back(static_cast<double>(config.image_width));
  v.push_back(static_cast<double>(config.image_height));
  Tensor t{v.size()};
  t.data = std::move(v);
  return t;
}

inline ModelConfig config_from_tensor(const Tensor& t) {
  std::size_t i = 0;
  const auto next = [&]() -> std::size_t {
    require(i < t.size(), "checkpoint: truncated config tensor");
    return static_cast<std::size_t>(t.data[i++]);
  };
  require(next() == 1, "checkpoint: unsupported config layout");
  ModelConfig config;
  config.n_queries = next();
  const std::size_t layers = next();
  config.points_per_layer.clear();
  for (std::size_t d = 0; d < layers; ++d) {
    config.points_per_layer.push_back(next());
  }
  config.feature_dim = next();
  config.n_classes = next();
  config.feat_channels = next();
  config.encoder.width = next();
  config.encoder.depth = next();
  config.encoder.channels = next();
  config.encoder.patch = next();
  config.depth_branch_enabled = next() != 0;
  config.depth_hidden = next();
  config.image_width = next();
  config.image_height = next();
  config.validate();
  return config;
}

}  // namespace detail

/// Checkpoint container: "DSPK", u32 version, u32 tensor count, then per
/// tensor u16 name length + UTF-8 name, u8 rank, rank x u32 dims, and the
/// values as little-endian f32. Tensors are ordered lexicographically by
/// name; the model configuration rides along as the "_meta.config" tensor.
inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const ModelConfig& config) {
  std::map<std::string, Tensor> tensors = params.tensors;
  tensors["_meta.config"] = detail::config_to_tensor(config);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("DSPK", 4);
  io::put_u32(os, 1);
  io::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    require(name.size() <= 0xffff, "save_checkpoint: name too long");
    io::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rank = static_cast<unsigned char>(tensor.rank());
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (const std::size_t dim : tensor.shape) {
      io::put_u32(os, static_cast<std::uint32_t>(dim));
    }
    for (const double v : tensor.data) io::put_f32(os, v);
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline std::pair<ModelParams, ModelConfig> load_checkpoint(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DSPK", 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  if (io::get_u32(is) != 1) {
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  }
  const std::uint32_t count = io::get_u32(is);
  ModelParams params;
  Tensor config_tensor;
  bool have_config = false;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = io::get_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    unsigned char rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is) throw std::runtime_error("load_checkpoint: truncated " + path);
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) dim = io::get_u32(is);
    Tensor tensor(shape);
    for (auto& v : tensor.data) v = io::get_f32(is);
    if (name == "_meta.config") {
      config_tensor = std::move(tensor);
      have_config = true;
    } else {
      params.tensors.emplace(std::move(name), std::move(tensor));
    }
  }
  if (!have_config) {
    throw std::runtime_error("load_checkpoint: missing _meta.config in " + path);
  }
  return {std::move(params), detail::config_from_tensor(config_tensor)};
}

}  // namespace discene
