#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "discene/geometry.hpp"

namespace discene {

/// Round a double through IEEE f32, the on-disk precision of scene headers.
inline double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v),
                              static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_f32(std::ostream& os, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("scene_io: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (!is) throw std::runtime_error("scene_io: truncated file");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline double get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}

}  // namespace io

/// Scene file: "DSC1", u32 version, 3xu32 dims, f32 voxel size, 3xf32 origin,
/// X*Y*Z u8 labels (x-major), 4xf32 intrinsics, 12xf32 row-major 3x4
/// camera-to-world pose. All numbers little-endian.
inline void write_scene(const std::string& path, const VoxelGrid& grid,
                        const Camera& camera) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_scene: cannot open " + path);
  os.write("DSC1", 4);
  io::put_u32(os, 1);
  for (int a = 0; a < 3; ++a) {
    io::put_u32(os, static_cast<std::uint32_t>(grid.spec.dims[a]));
  }
  io::put_f32(os, grid.spec.voxel_size);
  for (int a = 0; a < 3; ++a) io::put_f32(os, grid.spec.origin[a]);
  os.write(reinterpret_cast<const char*>(grid.labels.data()),
           static_cast<std::streamsize>(grid.labels.size()));
  io::put_f32(os, camera.fx);
  io::put_f32(os, camera.fy);
  io::put_f32(os, camera.cx);
  io::put_f32(os, camera.cy);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) io::put_f32(os, camera.rotation[3 * r + c]);
    io::put_f32(os, camera.position[r]);
  }
  if (!os) throw std::runtime_error("write_scene: write failed for " + path);
}

inline std::pair<VoxelGrid, Camera> read_scene(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_scene: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DSC1", 4) != 0) {
    throw std::runtime_error("read_scene: bad magic in " + path);
  }
  const std::uint32_t version = io::get_u32(is);
  if (version != 1) {
    throw std::runtime_error("read_scene: unsupported version in " + path);
  }
  std::size_t dims[3];
  for (auto& d : dims) d = io::get_u32(is);
  const double vs = io::get_f32(is);
  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = io::get_f32(is);
  VoxelGrid grid(GridSpec(dims[0], dims[1], dims[2], vs, origin));
  is.read(reinterpret_cast<char*>(grid.labels.data()),
          static_cast<std::streamsize>(grid.labels.size()));
  if (!is) throw std::runtime_error("read_scene: truncated labels in " + path);
  Camera cam;
  cam.fx = io::get_f32(is);
  cam.fy = io::get_f32(is);
  cam.cx = io::get_f32(is);
  cam.cy = io::get_f32(is);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.rotation[3 * r + c] = io::get_f32(is);
    cam.position[r] = io::get_f32(is);
  }
  if (!is) throw std::runtime_error("read_scene: truncated camera in " + path);
  return {std::move(grid), cam};
}

inline nlohmann::json metrics_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["iou"] = report.iou;
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : report.per_class_iou) {
    if (v) {
      per.push_back(*v);
    } else {
      per.push_back(nullptr);
    }
  }
  j["per_class_iou"] = per;
  j["miou"] = report.miou ? nlohmann::json(*report.miou) : nlohmann::json(nullptr);
  return j;
}

inline void write_metrics_json(const std::string& path,
                               const MetricsReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_metrics_json: cannot open " + path);
  os << metrics_to_json(report).dump(2) << "\n";
}

}  // namespace discene
